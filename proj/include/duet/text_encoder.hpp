#pragma once

#include <string>
#include <vector>

#include "duet/nn.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

struct TextEncoderConfig {
    int64_t vocab_size = 0;
    int64_t width = 48;
    int64_t depth = 4;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    int64_t max_tokens = 64;

    void validate() const {
        DUET_CHECK(vocab_size >= 2, "text: vocabulary size ", vocab_size, " too small");
        DUET_CHECK(width % heads == 0, "text: width ", width, " not divisible by ", heads,
                   " heads");
    }
};

// Transformer over token embeddings; the begin-token output is projected and
// l2-normalized into the caption embedding.
template <typename T>
class TextEncoder {
public:
    TextEncoder(const TextEncoderConfig& cfg, Rng& rng, bool trainable,
                const std::string& prefix = "txt")
        : cfg_(cfg) {
        cfg_.validate();
        const int64_t w = cfg_.width;
        token_emb_ = params_.add(prefix + ".tok_emb",
                                 Tensor<T>::randn({cfg_.vocab_size, w}, rng, 0.02), trainable);
        pos_emb_ = params_.add(prefix + ".pos_emb",
                               Tensor<T>::randn({cfg_.max_tokens, w}, rng, 0.02), trainable);
        for (int64_t d = 0; d < cfg_.depth; ++d)
            blocks_.push_back(TransformerBlock<T>::make(params_,
                                                        prefix + ".blk" + std::to_string(d), w,
                                                        cfg_.heads, cfg_.mlp_ratio * w, rng,
                                                        trainable));
        final_ln_ = LayerNorm<T>::make(params_, prefix + ".ln_f", w, trainable);
        proj_ = Linear<T>::make(params_, prefix + ".proj", w, w, rng, trainable,
                                /*bias=*/false);
    }

    const TextEncoderConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    // Returns unit-norm embeddings, one row per sequence.
    Value<T> forward(const std::vector<TokenSequence>& seqs) const {
        const int64_t batch = int64_t(seqs.size());
        DUET_CHECK(batch >= 1, "text: empty batch");
        int64_t max_len = 1;
        std::vector<int> lens(seqs.size());
        for (size_t i = 0; i < seqs.size(); ++i) {
            DUET_CHECK(!seqs[i].ids.empty(), "text: empty token sequence at index ", i);
            DUET_CHECK(seqs[i].length() <= cfg_.max_tokens, "text: sequence of ",
                       seqs[i].length(), " tokens exceeds limit ", cfg_.max_tokens);
            lens[i] = int(seqs[i].length());
            max_len = std::max(max_len, seqs[i].length());
        }

        // Pad with the begin token id; padded keys are excluded from
        // attention via the per-sequence valid lengths.
        std::vector<int64_t> flat(size_t(batch * max_len), Vocabulary::bos_id);
        for (size_t i = 0; i < seqs.size(); ++i)
            for (size_t t = 0; t < seqs[i].ids.size(); ++t) {
                const int id = seqs[i].ids[t];
                DUET_CHECK(id >= 0 && id < cfg_.vocab_size, "text: token id ", id,
                           " outside vocabulary of ", cfg_.vocab_size);
                flat[i * size_t(max_len) + t] = id;
            }

        Value<T> x = gather_rows(token_emb_, std::move(flat));
        x = add_tiled(x, max_len == cfg_.max_tokens ? pos_emb_
                                                    : slice_rows(pos_emb_, 0, max_len));
        for (const auto& blk : blocks_) x = blk(x, batch, max_len, &lens);
        x = final_ln_(x);

        std::vector<int64_t> begin_rows(static_cast<size_t>(batch));
        for (int64_t b = 0; b < batch; ++b) begin_rows[size_t(b)] = b * max_len;
        return l2_normalize_rows(proj_(gather_rows(x, std::move(begin_rows))));
    }

private:
    TextEncoderConfig cfg_;
    ParamSet<T> params_;
    Value<T> token_emb_, pos_emb_;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> final_ln_;
    Linear<T> proj_;
};

} // namespace duet
