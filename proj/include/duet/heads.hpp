#pragma once

#include <string>

#include "duet/nn.hpp"

namespace duet {

struct PrototypeHeadConfig {
    int64_t in_dim = 48;
    int64_t hidden = 0;     // defaults to 2 * in_dim
    int64_t bottleneck = 0; // defaults to in_dim
    int64_t prototypes = 1024;

    PrototypeHeadConfig resolved() const {
        PrototypeHeadConfig c = *this;
        if (c.hidden == 0) c.hidden = 2 * c.in_dim;
        if (c.bottleneck == 0) c.bottleneck = c.in_dim;
        DUET_CHECK(c.prototypes >= 1, "head: prototype count must be positive");
        return c;
    }
};

// 3-layer MLP + l2 normalization + weight-normalized projection to K
// prototype scores. The final projection rows are renormalized to unit norm
// after every optimizer step rather than reparameterized.
template <typename T>
class PrototypeHead {
public:
    PrototypeHead(const PrototypeHeadConfig& cfg, Rng& rng, bool trainable,
                  const std::string& prefix)
        : cfg_(cfg.resolved()) {
        l1_ = Linear<T>::make(params_, prefix + ".l1", cfg_.in_dim, cfg_.hidden, rng, trainable);
        l2_ = Linear<T>::make(params_, prefix + ".l2", cfg_.hidden, cfg_.hidden, rng, trainable);
        l3_ = Linear<T>::make(params_, prefix + ".l3", cfg_.hidden, cfg_.bottleneck, rng,
                              trainable, /*bias=*/false);
        proto_ = params_.add(prefix + ".proto",
                             Tensor<T>::randn({cfg_.prototypes, cfg_.bottleneck}, rng, 0.02),
                             trainable);
        renormalize_prototypes();
    }

    const PrototypeHeadConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    // embeddings (R x in_dim) -> prototype scores (R x K)
    Value<T> project(const Value<T>& embeddings) const {
        DUET_CHECK(embeddings.cols() == cfg_.in_dim, "head: embedding width ",
                   embeddings.cols(), " vs expected ", cfg_.in_dim);
        Value<T> h = gelu(l1_(embeddings));
        h = gelu(l2_(h));
        Value<T> z = l2_normalize_rows(l3_(h));
        return matmul_nt(z, proto_);
    }

    // Unit-norm constraint on the final projection rows; call after each step.
    void renormalize_prototypes() {
        Tensor<T>& w = proto_.val();
        const int64_t k = w.rows(), d = w.cols();
        for (int64_t i = 0; i < k; ++i) {
            T* row = w.row(i);
            T sq = 0;
            for (int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
            const T norm = std::sqrt(sq);
            if (norm > T(0)) {
                const T inv = T(1) / norm;
                for (int64_t j = 0; j < d; ++j) row[j] *= inv;
            }
        }
    }

private:
    PrototypeHeadConfig cfg_;
    ParamSet<T> params_;
    Linear<T> l1_, l2_, l3_;
    Value<T> proto_;
};

} // namespace duet
