#pragma once

#include <cmath>
#include <vector>

#include "duet/image.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// patch masking
// ---------------------------------------------------------------------------

enum class MaskStrategy { random, blockwise };

inline const char* mask_strategy_name(MaskStrategy s) {
    return s == MaskStrategy::random ? "random" : "blockwise";
}

inline MaskStrategy mask_strategy_from(const std::string& name) {
    if (name == "random") return MaskStrategy::random;
    if (name == "blockwise") return MaskStrategy::blockwise;
    fail("augment: unknown mask strategy '", name, "'");
}

struct MaskSpec {
    std::vector<int> positions; // sorted, unique, in [0, n)
    double ratio = 0.0;
    MaskStrategy strategy = MaskStrategy::random;
    int64_t count() const { return int64_t(positions.size()); }
};

// Exactly round(ratio * n) positions on every draw.
inline MaskSpec make_mask(int n, double ratio, MaskStrategy strategy, Rng& rng) {
    DUET_CHECK(n >= 0, "augment: negative position count");
    DUET_CHECK(ratio >= 0.0 && ratio <= 1.0, "augment: mask ratio ", ratio, " outside [0, 1]");
    const int want = int(std::llround(ratio * n));
    MaskSpec spec;
    spec.ratio = ratio;
    spec.strategy = strategy;
    if (want == 0) return spec;

    if (strategy == MaskStrategy::random) {
        spec.positions = rng.sample_indices(n, want);
        return spec;
    }

    // Blockwise: square blocks on the patch grid until the budget is met,
    // trimming the final block in row-major order.
    const int grid = int(std::llround(std::sqrt(double(n))));
    DUET_CHECK(grid * grid == n, "augment: blockwise masking needs a square grid, got ", n);
    std::vector<char> taken(size_t(n), 0);
    int placed = 0;
    while (placed < want) {
        const int remaining = want - placed;
        const int side = std::min(grid, int(std::ceil(std::sqrt(double(remaining)))));
        const int y0 = int(rng.uniform_index(uint64_t(grid - side + 1)));
        const int x0 = int(rng.uniform_index(uint64_t(grid - side + 1)));
        for (int dy = 0; dy < side && placed < want; ++dy)
            for (int dx = 0; dx < side && placed < want; ++dx) {
                const int p = (y0 + dy) * grid + (x0 + dx);
                if (!taken[size_t(p)]) {
                    taken[size_t(p)] = 1;
                    ++placed;
                }
            }
    }
    for (int p = 0; p < n; ++p)
        if (taken[size_t(p)]) spec.positions.push_back(p);
    return spec;
}

// ---------------------------------------------------------------------------
// crops
// ---------------------------------------------------------------------------

struct CropRect {
    double x = 0, y = 0, size = 0; // square window in source pixels
};

struct CropConfig {
    int global_res = 64;
    int local_res = 32;
    int num_local = 6;
    double global_area_min = 0.4, global_area_max = 1.0;
    double local_area_min = 0.05, local_area_max = 0.4;
    bool hflip = true;
    // optional heavier augmentations (color jitter, blur, solarization)
    bool byol_local = false;
    bool byol_global = false;
};

template <typename T>
struct CropSet {
    Tensor<T> global_pixels; // (3, R, R)
    std::vector<Tensor<T>> local_pixels;
    CropRect global_rect;
    bool global_flip = false;
    std::vector<CropRect> local_rects;
    std::vector<char> local_flips;
};

namespace detail {

inline CropRect draw_square(int w, int h, double area_min, double area_max, Rng& rng) {
    const double full = double(std::min(w, h));
    const double area = rng.uniform(area_min, area_max);
    double size = std::floor(full * std::sqrt(area));
    size = std::max(1.0, std::min(size, full));
    CropRect r;
    r.size = size;
    r.x = double(rng.uniform_index(uint64_t(w - int(size) + 1)));
    r.y = double(rng.uniform_index(uint64_t(h - int(size) + 1)));
    return r;
}

template <typename T>
void byol_jitter(Tensor<T>& pixels, Rng& rng) {
    // brightness/contrast jitter, occasional blur and solarization
    const int64_t n = pixels.numel();
    const double brightness = rng.uniform(-0.2, 0.2);
    const double contrast = rng.uniform(0.8, 1.25);
    for (int64_t i = 0; i < n; ++i) {
        double v = double(pixels.data[size_t(i)]);
        v = (v - 0.5) * contrast + 0.5 + brightness;
        pixels.data[size_t(i)] = T(std::min(1.0, std::max(0.0, v)));
    }
    const int side = int(pixels.shape[1]);
    if (rng.bernoulli(0.5)) {
        // 3x3 box blur per channel
        Tensor<T> src = pixels;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    double acc = 0;
                    int cnt = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || xx < 0 || yy >= side || xx >= side) continue;
                            acc += double(src.data[size_t((c * side + yy) * side + xx)]);
                            ++cnt;
                        }
                    pixels.data[size_t((c * side + y) * side + x)] = T(acc / cnt);
                }
    }
    if (rng.bernoulli(0.2)) {
        for (int64_t i = 0; i < n; ++i) {
            double v = double(pixels.data[size_t(i)]);
            if (v > 0.5) pixels.data[size_t(i)] = T(1.0 - v);
        }
    }
}

} // namespace detail

// One global random-resized crop (optionally flipped) plus M local random
// crops. No color augmentation unless the byol flags are set.
template <typename T>
CropSet<T> make_crops(const Image& img, const CropConfig& cfg, Rng& rng) {
    DUET_CHECK(img.width >= 2 && img.height >= 2, "augment: image ", img.width, "x",
               img.height, " too small to crop");
    DUET_CHECK(img.channels == 3, "augment: crops expect RGB input");
    CropSet<T> out;
    out.global_rect = detail::draw_square(img.width, img.height, cfg.global_area_min,
                                          cfg.global_area_max, rng);
    out.global_flip = cfg.hflip && rng.bernoulli(0.5);
    out.global_pixels = Tensor<T>({3, cfg.global_res, cfg.global_res});
    render_crop(img, out.global_rect.x, out.global_rect.y, out.global_rect.size,
                out.global_flip, cfg.global_res, out.global_pixels.data.data());
    if (cfg.byol_global) detail::byol_jitter(out.global_pixels, rng);

    for (int m = 0; m < cfg.num_local; ++m) {
        const CropRect r =
            detail::draw_square(img.width, img.height, cfg.local_area_min, cfg.local_area_max, rng);
        const bool flip = cfg.hflip && rng.bernoulli(0.5);
        Tensor<T> pix({3, cfg.local_res, cfg.local_res});
        render_crop(img, r.x, r.y, r.size, flip, cfg.local_res, pix.data.data());
        if (cfg.byol_local) detail::byol_jitter(pix, rng);
        out.local_rects.push_back(r);
        out.local_flips.push_back(flip);
        out.local_pixels.push_back(std::move(pix));
    }
    return out;
}

} // namespace duet
