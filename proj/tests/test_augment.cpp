#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/augment.hpp"
#include "support/test_util.hpp"

using namespace duet;

namespace {

Image noise_image(int w, int h, uint64_t seed) {
    Image im = Image::make(w, h, 3);
    Rng rng(seed);
    for (auto& p : im.pix) p = uint8_t(rng.uniform_index(256));
    return im;
}

} // namespace

TEST_CASE("mask cardinality is exactly round(ratio * N) on every draw") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 16 + int(rng.uniform_index(100));
        const double ratio = rng.uniform();
        auto spec = make_mask(n, ratio, MaskStrategy::random, rng);
        CHECK(spec.count() == int64_t(std::llround(ratio * n)));
        // unique, sorted, in range
        for (size_t i = 0; i < spec.positions.size(); ++i) {
            CHECK(spec.positions[i] >= 0);
            CHECK(spec.positions[i] < n);
            if (i) CHECK(spec.positions[i] > spec.positions[i - 1]);
        }
    }
    CHECK(make_mask(16, 0.75, MaskStrategy::random, rng).count() == 12);
    CHECK(make_mask(64, 0.0, MaskStrategy::random, rng).count() == 0);
}

TEST_CASE("random masking is uniform: chi-square p-value above 0.01 over 10k draws") {
    Rng rng(20240);
    const int n = 64;
    const double ratio = 0.75;
    const int draws = 10000;
    std::vector<int64_t> counts(n, 0);
    for (int d = 0; d < draws; ++d) {
        auto spec = make_mask(n, ratio, MaskStrategy::random, rng);
        for (int p : spec.positions) counts[size_t(p)]++;
    }
    const double expected = ratio * draws;
    double stat = 0;
    for (int64_t c : counts) {
        const double diff = double(c) - expected;
        stat += diff * diff / expected;
    }
    const double p = testutil::chi2_pvalue(stat, n - 1);
    INFO("chi2 = ", stat, ", p = ", p);
    CHECK(p > 0.01);

    // every per-position frequency within 4 binomial standard deviations
    const double sigma = std::sqrt(draws * ratio * (1 - ratio));
    for (int64_t c : counts) CHECK(std::fabs(double(c) - expected) <= 4.0 * sigma);
}

TEST_CASE("blockwise masking hits the exact budget with contiguous blocks") {
    Rng rng(7);
    for (double ratio : {0.25, 0.5, 0.75}) {
        auto spec = make_mask(64, ratio, MaskStrategy::blockwise, rng);
        CHECK(spec.count() == int64_t(std::llround(ratio * 64)));
        CHECK(spec.strategy == MaskStrategy::blockwise);
    }
    // blockwise draws cluster: mean pairwise grid distance should be well
    // below that of a uniform sample at low ratios
    auto mean_pair_dist = [](const MaskSpec& s) {
        double acc = 0;
        int cnt = 0;
        for (size_t i = 0; i < s.positions.size(); ++i)
            for (size_t j = i + 1; j < s.positions.size(); ++j) {
                const int yi = s.positions[i] / 8, xi = s.positions[i] % 8;
                const int yj = s.positions[j] / 8, xj = s.positions[j] % 8;
                acc += std::abs(yi - yj) + std::abs(xi - xj);
                ++cnt;
            }
        return acc / cnt;
    };
    double block_total = 0, random_total = 0;
    for (int t = 0; t < 50; ++t) {
        block_total += mean_pair_dist(make_mask(64, 0.25, MaskStrategy::blockwise, rng));
        random_total += mean_pair_dist(make_mask(64, 0.25, MaskStrategy::random, rng));
    }
    CHECK(block_total < random_total);
}

TEST_CASE("mask generation is reproducible under a fixed seed") {
    Rng a(99), b(99);
    for (int t = 0; t < 20; ++t) {
        auto sa = make_mask(64, 0.75, MaskStrategy::random, a);
        auto sb = make_mask(64, 0.75, MaskStrategy::random, b);
        CHECK(sa.positions == sb.positions);
    }
}

TEST_CASE("crops stay inside the source image at the configured resolutions") {
    Image im = noise_image(64, 64, 5);
    CropConfig cfg;
    cfg.global_res = 64;
    cfg.local_res = 32;
    cfg.num_local = 6;
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        auto crops = make_crops<float>(im, cfg, rng);
        CHECK(crops.global_pixels.shape == Shape{3, 64, 64});
        CHECK(crops.local_pixels.size() == 6);
        for (const auto& lp : crops.local_pixels) CHECK(lp.shape == Shape{3, 32, 32});

        CHECK(crops.global_rect.x >= 0);
        CHECK(crops.global_rect.y >= 0);
        CHECK(crops.global_rect.x + crops.global_rect.size <= 64.0);
        CHECK(crops.global_rect.y + crops.global_rect.size <= 64.0);
        for (const auto& r : crops.local_rects) {
            CHECK(r.x >= 0);
            CHECK(r.y >= 0);
            CHECK(r.x + r.size <= 64.0);
            CHECK(r.y + r.size <= 64.0);
            CHECK(r.size < crops.global_rect.size + 1e-9); // local area < global area ranges
        }
        for (float v : crops.global_pixels.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("the augmentation stream is bit-identical under identical seeds") {
    Image im = noise_image(64, 64, 6);
    CropConfig cfg;
    Rng a(123), b(123);
    for (int t = 0; t < 5; ++t) {
        auto ca = make_crops<float>(im, cfg, a);
        auto cb = make_crops<float>(im, cfg, b);
        CHECK(ca.global_rect.x == cb.global_rect.x);
        CHECK(ca.global_flip == cb.global_flip);
        CHECK(ca.global_pixels.data == cb.global_pixels.data);
        for (size_t i = 0; i < ca.local_pixels.size(); ++i)
            CHECK(ca.local_pixels[i].data == cb.local_pixels[i].data);
    }
}

TEST_CASE("paper-scale and high-resolution crop configs are representable") {
    // 224/98 for pretraining, 448/140 for the high-res stage
    Image im = noise_image(256, 256, 7);
    CropConfig cfg;
    cfg.global_res = 224;
    cfg.local_res = 98;
    cfg.num_local = 6;
    Rng rng(13);
    auto crops = make_crops<float>(im, cfg, rng);
    CHECK(crops.global_pixels.shape == Shape{3, 224, 224});
    CHECK(crops.local_pixels[0].shape == Shape{3, 98, 98});

    cfg.global_res = 448;
    cfg.local_res = 140;
    auto hires = make_crops<float>(im, cfg, rng);
    CHECK(hires.global_pixels.shape == Shape{3, 448, 448});
    CHECK(hires.local_pixels[0].shape == Shape{3, 140, 140});
}

TEST_CASE("images below the minimum crop size are rejected") {
    Image tiny = Image::make(1, 1, 3);
    CropConfig cfg;
    Rng rng(1);
    CHECK_THROWS_AS(make_crops<float>(tiny, cfg, rng), duet::error);
}

TEST_CASE("optional heavy augmentations only apply behind their flags") {
    Image im = noise_image(64, 64, 8);
    CropConfig plain;
    CropConfig byol = plain;
    byol.byol_local = true;
    Rng a(5), b(5);
    auto ca = make_crops<float>(im, plain, a);
    auto cb = make_crops<float>(im, byol, b);
    // same rng stream until the local pixel jitter, so rects agree but the
    // local pixels differ
    CHECK(ca.global_pixels.data == cb.global_pixels.data);
    bool differs = false;
    for (size_t i = 0; i < ca.local_pixels[0].data.size(); ++i)
        if (ca.local_pixels[0].data[i] != cb.local_pixels[0].data[i]) differs = true;
    CHECK(differs);
}
