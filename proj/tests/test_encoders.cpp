#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/gradcheck.hpp"
#include "duet/text_encoder.hpp"
#include "duet/vision_encoder.hpp"
#include "support/test_util.hpp"

using namespace duet;

namespace {

Tensor<double> random_pixels(int64_t batch, int64_t side, Rng& rng) {
    Tensor<double> t({batch, 3, side, side});
    for (auto& v : t.data) v = rng.uniform();
    return t;
}

VisionEncoderConfig tiny_vision() {
    VisionEncoderConfig cfg;
    cfg.patch = 4;
    cfg.side = 16;
    cfg.depth = 2;
    cfg.width = 16;
    cfg.heads = 2;
    return cfg;
}

} // namespace

TEST_CASE("tokenize maps known words, truncates at 64, and handles empty input") {
    Vocabulary vocab = Vocabulary::build({"a black suv parked", "red circle"});
    auto seq = tokenize("A black SUV", vocab);
    CHECK(seq.ids.size() == 4); // begin + 3 words
    CHECK(seq.ids[0] == Vocabulary::bos_id);
    for (size_t i = 1; i < seq.ids.size(); ++i) CHECK(seq.ids[i] >= 2);

    std::string long_caption;
    for (int i = 0; i < 100; ++i) long_caption += "red ";
    CHECK(tokenize(long_caption, vocab).ids.size() == 64);

    CHECK(tokenize("", vocab).ids.size() == 1);

    // unknown words map to the out-of-vocabulary id
    CHECK(tokenize("zzzunknown", vocab).ids[1] == Vocabulary::oov_id);
}

TEST_CASE("vocabulary round-trips through save/load") {
    testutil::TempDir tmp("vocab");
    Vocabulary vocab = Vocabulary::build({"blue square on a table"});
    vocab.save(tmp.str() + "/vocab.txt");
    Vocabulary loaded = Vocabulary::load(tmp.str() + "/vocab.txt");
    CHECK(loaded.size() == vocab.size());
    CHECK(loaded.id_of("square") == vocab.id_of("square"));
}

TEST_CASE("vision encoder meets the shape contract at several resolutions") {
    Rng rng(5);
    VisionEncoderConfig cfg;
    cfg.patch = 8;
    cfg.side = 64;
    cfg.depth = 2;
    cfg.width = 32;
    cfg.heads = 4;
    VisionEncoder<double> enc(cfg, rng, true);

    auto out = enc.forward(random_pixels(2, 64, rng), nullptr, true);
    CHECK(out.n_patches == 64); // (64/8)^2
    CHECK(out.cls_noisy.rows() == 2);
    CHECK(out.cls_synthetic.rows() == 2);
    CHECK(out.patches.rows() == 2 * 64);
    CHECK(out.patches.cols() == 32);

    // smaller crop: positional embeddings interpolate to the 4x4 grid
    auto local = enc.forward(random_pixels(3, 32, rng));
    CHECK(local.n_patches == 16);
    CHECK(local.patches.rows() == 3 * 16);

    CHECK_THROWS_AS(enc.forward(random_pixels(1, 12, rng)), duet::error);
}

TEST_CASE("class-token attention rows are distributions over the patches") {
    Rng rng(6);
    VisionEncoder<double> enc(tiny_vision(), rng, true);
    auto out = enc.forward(random_pixels(3, 16, rng), nullptr, true);
    for (int64_t b = 0; b < 3; ++b) {
        double sum0 = 0, sum1 = 0;
        for (int64_t i = 0; i < out.n_patches; ++i) {
            CHECK(out.attn_noisy.at(b, i) >= 0.0);
            CHECK(out.attn_synthetic.at(b, i) >= 0.0);
            sum0 += out.attn_noisy.at(b, i);
            sum1 += out.attn_synthetic.at(b, i);
        }
        CHECK(std::fabs(sum0 - 1.0) <= 1e-6);
        CHECK(std::fabs(sum1 - 1.0) <= 1e-6);
    }
}

TEST_CASE("full masking erases pixel dependence") {
    Rng rng(9);
    VisionEncoder<double> enc(tiny_vision(), rng, true);
    const int64_t n = enc.config().num_patches();

    MaskSpec all;
    all.ratio = 1.0;
    for (int i = 0; i < n; ++i) all.positions.push_back(i);
    std::vector<MaskSpec> masks{all};

    Tensor<double> pix = random_pixels(1, 16, rng);
    Tensor<double> permuted = pix;
    Rng shuffle_rng(3);
    shuffle_rng.shuffle(permuted.data);

    auto a = enc.forward(pix, &masks);
    auto b = enc.forward(permuted, &masks);
    for (int64_t i = 0; i < a.patches.val().numel(); ++i)
        CHECK(a.patches.val().data[size_t(i)] ==
              doctest::Approx(b.patches.val().data[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("partial masking changes exactly the masked token inputs") {
    Rng rng(10);
    VisionEncoder<double> enc(tiny_vision(), rng, true);
    Tensor<double> pix = random_pixels(1, 16, rng);

    MaskSpec spec;
    spec.positions = {2, 7};
    spec.ratio = 0.125;
    std::vector<MaskSpec> masks{spec};

    auto masked = enc.forward(pix, &masks);
    auto clean = enc.forward(pix);
    // downstream outputs differ (attention mixes), but the masked pass must
    // not equal the clean pass at the masked positions
    bool differs = false;
    for (int64_t i = 0; i < masked.patches.val().numel(); ++i)
        if (masked.patches.val().data[size_t(i)] != clean.patches.val().data[size_t(i)])
            differs = true;
    CHECK(differs);
    CHECK(masked.masked);
    CHECK_FALSE(clean.masked);
}

TEST_CASE("gradients flow into the mask token when positions are masked") {
    Rng rng(11);
    VisionEncoder<double> enc(tiny_vision(), rng, true);
    Tensor<double> pix = random_pixels(1, 16, rng);
    MaskSpec spec;
    spec.positions = {0, 3, 5};
    std::vector<MaskSpec> masks{spec};

    Rng wrng(2);
    auto build = [&] {
        auto out = enc.forward(pix, &masks);
        Rng local(2);
        Tensor<double> w(out.patches.val().shape);
        for (auto& v : w.data) v = local.normal();
        return sum_all(mul(out.patches, Value<double>::constant(std::move(w))));
    };
    auto report = grad_check(build, {{"mask_token", enc.params().at("img.mask_token")}}, 1e-5,
                             1e-4);
    INFO("max rel err ", report.max_rel_err);
    CHECK(report.pass);
    double norm = 0;
    for (double g : enc.params().at("img.mask_token").grad().data) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("a peephole through the full vision encoder passes the gradient oracle") {
    Rng rng(13);
    VisionEncoderConfig cfg;
    cfg.patch = 4;
    cfg.side = 8;
    cfg.depth = 1;
    cfg.width = 8;
    cfg.heads = 2;
    VisionEncoder<double> enc(cfg, rng, true);
    Tensor<double> pix = random_pixels(2, 8, rng);
    MaskSpec spec;
    spec.positions = {1};
    std::vector<MaskSpec> masks{spec, spec};

    auto build = [&] {
        auto out = enc.forward(pix, &masks);
        Rng local(4);
        Tensor<double> w0(out.cls_noisy.val().shape);
        for (auto& v : w0.data) v = local.normal();
        Tensor<double> w1(out.patches.val().shape);
        for (auto& v : w1.data) v = local.normal();
        return add(sum_all(mul(out.cls_noisy, Value<double>::constant(std::move(w0)))),
                   sum_all(mul(out.patches, Value<double>::constant(std::move(w1)))));
    };
    std::vector<GradCheckParam> params;
    for (const char* name : {"img.patch.w", "img.pos", "img.cls_noisy", "img.mask_token",
                             "img.blk0.qkv.w", "img.blk0.fc1.w", "img.ln_f.g"})
        params.push_back({name, enc.params().at(name)});
    auto report = grad_check(build, params, 1e-5, 1e-4);
    INFO("max rel err ", report.max_rel_err);
    CHECK(report.pass);
}

TEST_CASE("text encoder emits unit-norm, deterministic, word-sensitive embeddings") {
    Rng rng(21);
    Vocabulary vocab = Vocabulary::build({"a red circle left of a blue square"});
    TextEncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.width = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    TextEncoder<double> enc(cfg, rng, true);

    auto e1 = enc.forward({tokenize("a red circle", vocab)});
    double norm = 0;
    for (double v : e1.val().data) norm += v * v;
    CHECK(std::fabs(std::sqrt(norm) - 1.0) <= 1e-6);

    auto e2 = enc.forward({tokenize("a red circle", vocab)});
    for (int64_t i = 0; i < e1.val().numel(); ++i)
        CHECK(e1.val().data[size_t(i)] == e2.val().data[size_t(i)]);

    auto e3 = enc.forward({tokenize("a blue circle", vocab)});
    double diff = 0;
    for (int64_t i = 0; i < e1.val().numel(); ++i)
        diff += std::fabs(e1.val().data[size_t(i)] - e3.val().data[size_t(i)]);
    CHECK(diff > 1e-6);
}

TEST_CASE("text batches with mixed lengths match per-sequence encoding") {
    Rng rng(22);
    Vocabulary vocab = Vocabulary::build({"red green blue circle square triangle above"});
    TextEncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.width = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    TextEncoder<double> enc(cfg, rng, true);

    auto short_seq = tokenize("red", vocab);
    auto long_seq = tokenize("blue square above green triangle", vocab);
    auto batched = enc.forward({short_seq, long_seq});
    auto solo_short = enc.forward({short_seq});
    auto solo_long = enc.forward({long_seq});
    for (int64_t j = 0; j < batched.cols(); ++j) {
        CHECK(batched.val().at(0, j) == doctest::Approx(solo_short.val().at(0, j)).epsilon(1e-10));
        CHECK(batched.val().at(1, j) == doctest::Approx(solo_long.val().at(0, j)).epsilon(1e-10));
    }
}

TEST_CASE("text encoder gradients pass the oracle") {
    Rng rng(23);
    Vocabulary vocab = Vocabulary::build({"red blue circle"});
    TextEncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.width = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    TextEncoder<double> enc(cfg, rng, true);
    std::vector<TokenSequence> batch{tokenize("red circle", vocab), tokenize("blue", vocab)};

    auto build = [&] {
        auto out = enc.forward(batch);
        Rng local(6);
        Tensor<double> w(out.val().shape);
        for (auto& v : w.data) v = local.normal();
        return sum_all(mul(out, Value<double>::constant(std::move(w))));
    };
    std::vector<GradCheckParam> params;
    for (const char* name : {"txt.tok_emb", "txt.pos_emb", "txt.blk0.qkv.w", "txt.proj.w"})
        params.push_back({name, enc.params().at(name)});
    auto report = grad_check(build, params, 1e-5, 1e-4);
    INFO("max rel err ", report.max_rel_err);
    CHECK(report.pass);
}
