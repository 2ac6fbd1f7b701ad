#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "duet/ops.hpp"
#include "duet/rng.hpp"

namespace duet {

// Ordered, named parameter registry. The ordering is the registration order,
// which keeps optimizer state, EMA updates and checkpoints aligned by name.
template <typename T>
class ParamSet {
public:
    Value<T> add(const std::string& name, Tensor<T> init, bool trainable) {
        DUET_CHECK(!index_.count(name), "params: duplicate name ", name);
        Value<T> v = trainable ? Value<T>::param(std::move(init))
                               : Value<T>::constant(std::move(init));
        index_[name] = items_.size();
        items_.push_back({name, v});
        return v;
    }

    Value<T>& at(const std::string& name) {
        auto it = index_.find(name);
        DUET_CHECK(it != index_.end(), "params: unknown name ", name);
        return items_[it->second].value;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    struct Item {
        std::string name;
        Value<T> value;
    };
    std::vector<Item>& items() { return items_; }
    const std::vector<Item>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    void zero_grads() {
        for (auto& it : items_)
            if (it.value->requires_grad) it.value->zero_grad();
    }

    int64_t count_elements() const {
        int64_t n = 0;
        for (const auto& it : items_) n += it.value.val().numel();
        return n;
    }

    // Copy values from a same-structure set (e.g. student -> teacher init).
    // Names may differ in their prefix (before the first dot) only.
    void copy_from(const ParamSet& src) {
        DUET_CHECK(items_.size() == src.items_.size(), "params: size mismatch ",
                   items_.size(), " vs ", src.items_.size());
        auto suffix = [](const std::string& s) { return s.substr(s.find('.')); };
        for (size_t i = 0; i < items_.size(); ++i) {
            DUET_CHECK(suffix(items_[i].name) == suffix(src.items_[i].name),
                       "params: name mismatch ", items_[i].name, " vs ", src.items_[i].name);
            check_same_shape(items_[i].value.val(), src.items_[i].value.val(), "params");
            items_[i].value.val().data = src.items_[i].value.val().data;
        }
    }

private:
    std::vector<Item> items_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    Value<T> w; // (in x out)
    Value<T> b; // (1 x out), absent when bias-free

    static Linear make(ParamSet<T>& ps, const std::string& name, int64_t in, int64_t out,
                       Rng& rng, bool trainable, bool bias = true, double init_std = 0.02) {
        Linear l;
        l.w = ps.add(name + ".w", Tensor<T>::randn({in, out}, rng, init_std), trainable);
        if (bias) l.b = ps.add(name + ".b", Tensor<T>({1, out}), trainable);
        return l;
    }

    Value<T> operator()(const Value<T>& x) const {
        Value<T> y = matmul(x, w);
        return b.defined() ? add_rowvec(y, b) : y;
    }
};

template <typename T>
struct LayerNorm {
    Value<T> gamma;
    Value<T> beta;

    static LayerNorm make(ParamSet<T>& ps, const std::string& name, int64_t dim,
                          bool trainable) {
        LayerNorm ln;
        ln.gamma = ps.add(name + ".g", Tensor<T>({1, dim}, T(1)), trainable);
        ln.beta = ps.add(name + ".b", Tensor<T>({1, dim}), trainable);
        return ln;
    }

    Value<T> operator()(const Value<T>& x) const { return layer_norm_rows(x, gamma, beta); }
};

// Pre-norm transformer block shared by the image and text encoders.
template <typename T>
struct TransformerBlock {
    LayerNorm<T> ln1;
    Linear<T> qkv;
    Linear<T> proj;
    LayerNorm<T> ln2;
    Linear<T> fc1;
    Linear<T> fc2;
    int64_t heads = 0;

    static TransformerBlock make(ParamSet<T>& ps, const std::string& name, int64_t width,
                                 int64_t heads, int64_t mlp_hidden, Rng& rng, bool trainable) {
        TransformerBlock blk;
        blk.heads = heads;
        blk.ln1 = LayerNorm<T>::make(ps, name + ".ln1", width, trainable);
        blk.qkv = Linear<T>::make(ps, name + ".qkv", width, 3 * width, rng, trainable);
        blk.proj = Linear<T>::make(ps, name + ".proj", width, width, rng, trainable);
        blk.ln2 = LayerNorm<T>::make(ps, name + ".ln2", width, trainable);
        blk.fc1 = Linear<T>::make(ps, name + ".fc1", width, mlp_hidden, rng, trainable);
        blk.fc2 = Linear<T>::make(ps, name + ".fc2", mlp_hidden, width, rng, trainable);
        return blk;
    }

    Value<T> operator()(const Value<T>& x, int64_t batch, int64_t seq,
                        const std::vector<int>* valid_lens = nullptr,
                        AttentionCapture<T>* capture = nullptr) const {
        Value<T> a = self_attention(qkv(ln1(x)), batch, seq, heads, valid_lens, capture);
        Value<T> h = add(x, proj(a));
        return add(h, fc2(gelu(fc1(ln2(h)))));
    }
};

} // namespace duet
