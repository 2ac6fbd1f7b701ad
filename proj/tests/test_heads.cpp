#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/gradcheck.hpp"
#include "duet/heads.hpp"
#include "support/test_util.hpp"

using namespace duet;
using testutil::rand_tensor;

namespace {

PrototypeHeadConfig small_cfg() {
    PrototypeHeadConfig cfg;
    cfg.in_dim = 8;
    cfg.prototypes = 16;
    return cfg;
}

} // namespace

TEST_CASE("projection is deterministic and defined on the zero embedding") {
    Rng rng(1);
    PrototypeHead<double> head(small_cfg(), rng, true, "h");
    auto zero = Value<double>::constant(Tensor<double>({1, 8}));
    auto s1 = head.project(zero);
    auto s2 = head.project(zero);
    CHECK(s1.val().shape == Shape{1, 16});
    for (int64_t i = 0; i < 16; ++i) {
        CHECK(std::isfinite(s1.val().data[size_t(i)]));
        CHECK(s1.val().data[size_t(i)] == s2.val().data[size_t(i)]);
    }
}

TEST_CASE("prototype rows stay unit-norm and renormalization is idempotent") {
    Rng rng(2);
    PrototypeHead<double> head(small_cfg(), rng, true, "h");
    auto& proto = head.params().at("h.proto").val();
    for (int64_t i = 0; i < proto.rows(); ++i) {
        double sq = 0;
        for (int64_t j = 0; j < proto.cols(); ++j) sq += proto.at(i, j) * proto.at(i, j);
        CHECK(std::fabs(std::sqrt(sq) - 1.0) <= 1e-6);
    }

    auto x = Value<double>::constant(rand_tensor({3, 8}, rng));
    auto before = head.project(x).val();
    head.renormalize_prototypes(); // rows already unit norm: output unchanged
    auto after = head.project(x).val();
    for (int64_t i = 0; i < before.numel(); ++i)
        CHECK(before.data[size_t(i)] == doctest::Approx(after.data[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("renormalization restores unit rows after a simulated optimizer step") {
    Rng rng(3);
    PrototypeHead<double> head(small_cfg(), rng, true, "h");
    auto& proto = head.params().at("h.proto").val();
    Rng noise(4);
    for (auto& v : proto.data) v += noise.normal(0.0, 0.3);
    head.renormalize_prototypes();
    for (int64_t i = 0; i < proto.rows(); ++i) {
        double sq = 0;
        for (int64_t j = 0; j < proto.cols(); ++j) sq += proto.at(i, j) * proto.at(i, j);
        CHECK(std::fabs(std::sqrt(sq) - 1.0) <= 1e-6);
    }
}

TEST_CASE("global and patch heads share architecture but never parameters") {
    Rng rng(5);
    PrototypeHead<double> global(small_cfg(), rng, true, "hg");
    PrototypeHead<double> patch(small_cfg(), rng, true, "hp");
    REQUIRE(global.params().size() == patch.params().size());
    for (size_t i = 0; i < global.params().size(); ++i) {
        const auto& g = global.params().items()[i];
        const auto& p = patch.params().items()[i];
        CHECK(g.value.val().shape == p.value.val().shape);
        CHECK(g.value.val().data.data() != p.value.val().data.data());
    }
}

TEST_CASE("head dimensions follow the config including the paper-scale prototype count") {
    Rng rng(6);
    PrototypeHeadConfig cfg;
    cfg.in_dim = 4;
    cfg.prototypes = 32768; // the full-scale setting remains a plain config value
    PrototypeHead<double> head(cfg, rng, false, "h");
    auto s = head.project(Value<double>::constant(Tensor<double>({1, 4})));
    CHECK(s.val().shape == Shape{1, 32768});

    PrototypeHeadConfig desk;
    desk.in_dim = 4; // defaults: hidden 2x, bottleneck in_dim, K 1024
    CHECK(desk.resolved().hidden == 8);
    CHECK(desk.resolved().bottleneck == 4);
    CHECK(desk.resolved().prototypes == 1024);
}

TEST_CASE("projection rejects mismatched input width") {
    Rng rng(7);
    PrototypeHead<double> head(small_cfg(), rng, true, "h");
    CHECK_THROWS_AS(head.project(Value<double>::constant(Tensor<double>({1, 5}))), duet::error);
}

TEST_CASE("the head passes the gradient oracle end to end") {
    Rng rng(8);
    PrototypeHeadConfig cfg;
    cfg.in_dim = 4;
    cfg.prototypes = 6;
    PrototypeHead<double> head(cfg, rng, true, "h");
    auto x = Value<double>::param(rand_tensor({3, 4}, rng));
    auto build = [&] {
        auto s = head.project(x);
        Rng local(9);
        Tensor<double> w(s.val().shape);
        for (auto& v : w.data) v = local.normal();
        return sum_all(mul(s, Value<double>::constant(std::move(w))));
    };
    std::vector<GradCheckParam> params{{"x", x}};
    for (const char* name : {"h.l1.w", "h.l2.w", "h.l3.w", "h.proto"})
        params.push_back({name, head.params().at(name)});
    auto report = grad_check(build, params, 1e-5, 1e-4);
    INFO("max rel err ", report.max_rel_err);
    CHECK(report.pass);
}
