#pragma once

#include <string>
#include <vector>

#include "duet/augment.hpp"
#include "duet/nn.hpp"

namespace duet {

struct VisionEncoderConfig {
    int64_t patch = 8;
    int64_t side = 64; // global resolution; smaller multiples of patch also accepted
    int64_t depth = 4;
    int64_t width = 48;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;

    void validate() const {
        DUET_CHECK(side % patch == 0, "vision: side ", side, " not a multiple of patch ", patch);
        DUET_CHECK(width % heads == 0, "vision: width ", width, " not divisible by ", heads,
                   " heads");
        DUET_CHECK(depth >= 1 && patch >= 1, "vision: degenerate architecture");
    }

    int64_t grid() const { return side / patch; }
    int64_t num_patches() const { return grid() * grid(); }
};

// Output of one batched forward pass. Class-token outputs come raw (CLIP
// normalization happens at the loss); attention rows are over the patch
// positions only, renormalized after dropping the class-token columns.
template <typename T>
struct VisionOutput {
    Value<T> cls_noisy;     // B x width, class token index 0
    Value<T> cls_synthetic; // B x width, class token index 1
    Value<T> patches;       // (B*N) x width
    Tensor<T> attn_noisy;     // B x N (only when requested)
    Tensor<T> attn_synthetic; // B x N
    int64_t batch = 0;
    int64_t n_patches = 0;
    bool masked = false;
};

// Vision transformer with two class tokens and a learned mask token.
template <typename T>
class VisionEncoder {
public:
    VisionEncoder(const VisionEncoderConfig& cfg, Rng& rng, bool trainable,
                  const std::string& prefix = "img")
        : cfg_(cfg) {
        cfg_.validate();
        const int64_t w = cfg_.width;
        const int64_t pdim = 3 * cfg_.patch * cfg_.patch;
        patch_w_ = params_.add(prefix + ".patch.w", Tensor<T>::randn({pdim, w}, rng, 0.02),
                               trainable);
        patch_b_ = params_.add(prefix + ".patch.b", Tensor<T>({1, w}), trainable);
        pos_ = params_.add(prefix + ".pos", Tensor<T>::randn({cfg_.num_patches(), w}, rng, 0.02),
                           trainable);
        cls_noisy_ = params_.add(prefix + ".cls_noisy", Tensor<T>::randn({1, w}, rng, 0.02),
                                 trainable);
        cls_synthetic_ = params_.add(prefix + ".cls_synthetic",
                                     Tensor<T>::randn({1, w}, rng, 0.02), trainable);
        mask_token_ = params_.add(prefix + ".mask_token", Tensor<T>::randn({1, w}, rng, 0.02),
                                  trainable);
        for (int64_t d = 0; d < cfg_.depth; ++d)
            blocks_.push_back(TransformerBlock<T>::make(params_,
                                                        prefix + ".blk" + std::to_string(d), w,
                                                        cfg_.heads, cfg_.mlp_ratio * w, rng,
                                                        trainable));
        final_ln_ = LayerNorm<T>::make(params_, prefix + ".ln_f", w, trainable);
    }

    const VisionEncoderConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    const Value<T>& mask_token() const { return mask_token_; }

    // pixels: (B, 3, S, S) with S a multiple of the patch size. masks, when
    // given, holds one MaskSpec per image; masked patch embeddings are
    // replaced by the mask token before the transformer (position added).
    VisionOutput<T> forward(const Tensor<T>& pixels, const std::vector<MaskSpec>* masks = nullptr,
                            bool want_attention = false) const {
        DUET_CHECK(pixels.shape.size() == 4 && pixels.shape[1] == 3,
                   "vision: expected (B, 3, S, S) pixels, got ", shape_str(pixels.shape));
        const int64_t batch = pixels.shape[0];
        const int64_t side = pixels.shape[2];
        DUET_CHECK(pixels.shape[3] == side, "vision: non-square input ",
                   shape_str(pixels.shape));
        DUET_CHECK(side % cfg_.patch == 0, "vision: side ", side,
                   " incompatible with patch size ", cfg_.patch);
        const int64_t grid = side / cfg_.patch;
        const int64_t n = grid * grid;
        if (masks)
            DUET_CHECK(int64_t(masks->size()) == batch, "vision: ", masks->size(),
                       " masks for batch ", batch);

        Value<T> x = add_rowvec(
            matmul(Value<T>::constant(patchify_(pixels, batch, side, grid)), patch_w_),
            patch_b_);
        if (masks) {
            std::vector<int64_t> flat;
            for (int64_t b = 0; b < batch; ++b)
                for (int pos : (*masks)[size_t(b)].positions) {
                    DUET_CHECK(pos >= 0 && pos < n, "vision: mask position ", pos,
                               " outside [0, ", n, ")");
                    flat.push_back(b * n + pos);
                }
            if (!flat.empty()) x = replace_rows_with_vector(x, std::move(flat), mask_token_);
        }
        x = add_tiled(x, grid == cfg_.grid() ? pos_ : interp_grid(pos_, cfg_.grid(), grid));
        x = prepend_tokens(x, cls_noisy_, cls_synthetic_, batch);

        const int64_t seq = n + 2;
        AttentionCapture<T> capture;
        for (size_t d = 0; d < blocks_.size(); ++d) {
            const bool last = d + 1 == blocks_.size();
            x = blocks_[d](x, batch, seq, nullptr, last && want_attention ? &capture : nullptr);
        }
        x = final_ln_(x);

        VisionOutput<T> out;
        out.batch = batch;
        out.n_patches = n;
        out.masked = masks != nullptr;
        std::vector<int64_t> idx0(static_cast<size_t>(batch)), idx1(static_cast<size_t>(batch));
        std::vector<int64_t> pidx(size_t(batch * n));
        for (int64_t b = 0; b < batch; ++b) {
            idx0[size_t(b)] = b * seq;
            idx1[size_t(b)] = b * seq + 1;
            for (int64_t i = 0; i < n; ++i) pidx[size_t(b * n + i)] = b * seq + 2 + i;
        }
        out.cls_noisy = gather_rows(x, std::move(idx0));
        out.cls_synthetic = gather_rows(x, std::move(idx1));
        out.patches = gather_rows(x, std::move(pidx));

        if (want_attention) {
            out.attn_noisy = Tensor<T>({batch, n});
            out.attn_synthetic = Tensor<T>({batch, n});
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t which = 0; which < 2; ++which) {
                    const T* src = capture.rows.row(b * 2 + which);
                    T* dst = (which == 0 ? out.attn_noisy : out.attn_synthetic).row(b);
                    T sum = 0;
                    for (int64_t i = 0; i < n; ++i) sum += src[2 + i];
                    const T inv = sum > 0 ? T(1) / sum : T(0);
                    for (int64_t i = 0; i < n; ++i) dst[i] = src[2 + i] * inv;
                }
        }
        return out;
    }

private:
    // (B, 3, S, S) -> (B*N) x (3*p*p); patches row-major over the grid,
    // channel-major within a patch.
    Tensor<T> patchify_(const Tensor<T>& pixels, int64_t batch, int64_t side,
                        int64_t grid) const {
        const int64_t p = cfg_.patch;
        Tensor<T> out({batch * grid * grid, 3 * p * p});
        const T* src = pixels.data.data();
        parallel_rows(batch * grid * grid, [&](int64_t row) {
            const int64_t b = row / (grid * grid);
            const int64_t cell = row % (grid * grid);
            const int64_t gy = cell / grid, gx = cell % grid;
            T* dst = out.row(row);
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t py = 0; py < p; ++py) {
                    const T* line =
                        src + ((b * 3 + c) * side + gy * p + py) * side + gx * p;
                    for (int64_t px = 0; px < p; ++px) dst[(c * p + py) * p + px] = line[px];
                }
        });
        return out;
    }

    VisionEncoderConfig cfg_;
    ParamSet<T> params_;
    Value<T> patch_w_, patch_b_, pos_, cls_noisy_, cls_synthetic_, mask_token_;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> final_ln_;
};

} // namespace duet
