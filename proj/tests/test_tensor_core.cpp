#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/gradcheck.hpp"
#include "duet/ops.hpp"
#include "support/test_util.hpp"

using namespace duet;
using testutil::rand_tensor;
using testutil::scalarize;

namespace {

Value<double> P(Tensor<double> t) { return Value<double>::param(std::move(t)); }

} // namespace

TEST_CASE("softmax of (0,0) is (0.5, 0.5) and rows always sum to one") {
    auto x = Value<double>::constant(Tensor<double>({1, 2}, {0.0, 0.0}));
    auto s = softmax_rows(x);
    CHECK(s.val().data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.val().data[1] == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto t = rand_tensor({4, 7}, rng, 3.0);
        auto sm = softmax_rows(Value<double>::constant(t));
        for (int64_t r = 0; r < 4; ++r) {
            double sum = 0;
            for (int64_t c = 0; c < 7; ++c) {
                CHECK(sm.val().at(r, c) >= 0.0);
                sum += sm.val().at(r, c);
            }
            CHECK(std::fabs(sum - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("l2-normalize maps (3,4) to (0.6,0.8) and always lands on the unit sphere") {
    auto x = Value<double>::constant(Tensor<double>({1, 2}, {3.0, 4.0}));
    auto y = l2_normalize_rows(x);
    CHECK(y.val().data[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(y.val().data[1] == doctest::Approx(0.8).epsilon(1e-12));

    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto t = rand_tensor({3, 5}, rng, 2.0);
        auto n = l2_normalize_rows(Value<double>::constant(t));
        for (int64_t r = 0; r < 3; ++r) {
            double sq = 0;
            for (int64_t c = 0; c < 5; ++c) sq += n.val().at(r, c) * n.val().at(r, c);
            CHECK(std::fabs(std::sqrt(sq) - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("log-softmax of (1,0) matches the hand-computed values") {
    auto x = Value<double>::constant(Tensor<double>({1, 2}, {1.0, 0.0}));
    auto y = log_softmax_rows(x);
    CHECK(y.val().data[0] == doctest::Approx(-0.31326168751822286).epsilon(1e-10));
    CHECK(y.val().data[1] == doctest::Approx(-1.31326168751822286).epsilon(1e-10));
}

TEST_CASE("shape mismatches name both shapes") {
    auto a = Value<double>::constant(Tensor<double>({2, 3}));
    auto b = Value<double>::constant(Tensor<double>({2, 4}));
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(2, 3)"), duet::error);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(2, 4)"), duet::error);
    CHECK_THROWS_AS(matmul(a, a), duet::error);
}

TEST_CASE("grad_check on f(x)=x^2 at x=3 reports derivative 6") {
    auto x = P(Tensor<double>::scalar(3.0));
    auto report = grad_check([&] { return mul(x, x); }, {{"x", x}}, 1e-5, 1e-4);
    CHECK(report.pass);
    CHECK(x.grad().data[0] == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(report.per_param[0].max_rel_err <= 1e-4);
}

TEST_CASE("grad_check flags non-finite values") {
    auto x = P(Tensor<double>::scalar(-1.0));
    auto fn = [&] {
        auto v = x.val().data[0];
        return Value<double>::param(Tensor<double>::scalar(std::sqrt(v)));
    };
    CHECK_THROWS_AS(grad_check(fn, {{"x", x}}), duet::error);
}

TEST_CASE("stop_gradient blocks the backward pass") {
    auto x = P(Tensor<double>::scalar(2.0));
    auto y = mul(stop_gradient(x), x); // d/dx should be 2 (only the live branch)
    backward(y);
    CHECK(x.grad().data[0] == doctest::Approx(2.0));
}

TEST_CASE("every registered op passes a central-difference gradient check") {
    Rng rng(1234);

    auto run = [&](const char* name, const std::function<Value<double>()>& build,
                   std::vector<GradCheckParam> params) {
        auto report = grad_check(build, std::move(params), 1e-5, 1e-4);
        INFO(name, ": max rel err ", report.max_rel_err);
        CHECK(report.pass);
    };

    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto b = P(rand_tensor({3, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 4}, rng));
        run("add/mul/sub", [=] { return sum_all(mul(w, mul(add(a, b), sub(a, b)))); },
            {{"a", a}, {"b", b}});
    }
    {
        auto a = P(rand_tensor({2, 5}, rng));
        run("scale", [=] { return sum_all(scale(a, -1.7)); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({2, 3}, rng));
        auto s = P(Tensor<double>::scalar(1.3));
        auto w = Value<double>::constant(rand_tensor({2, 3}, rng));
        run("mul_scalar", [=] { return sum_all(mul(w, mul_scalar(a, s))); },
            {{"a", a}, {"s", s}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto v = P(rand_tensor({1, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 4}, rng));
        run("add_rowvec", [=] { return sum_all(mul(w, add_rowvec(a, v))); },
            {{"a", a}, {"v", v}});
    }
    {
        auto a = P(rand_tensor({2, 6}, rng));
        auto w = Value<double>::constant(rand_tensor({2, 6}, rng));
        run("gelu", [=] { return sum_all(mul(w, gelu(a))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto b = P(rand_tensor({4, 2}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 2}, rng));
        run("matmul", [=] { return sum_all(mul(w, matmul(a, b))); }, {{"a", a}, {"b", b}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto b = P(rand_tensor({5, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 5}, rng));
        run("matmul_nt", [=] { return sum_all(mul(w, matmul_nt(a, b))); }, {{"a", a}, {"b", b}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({4, 3}, rng));
        run("transpose", [=] { return sum_all(mul(w, transpose(a))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({2, 6}, rng));
        run("reshape", [=] { return sum_all(mul(w, reshape(a, {2, 6}))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 2}, rng));
        auto b = P(rand_tensor({3, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 6}, rng));
        run("concat_cols", [=] { return sum_all(mul(w, concat_cols(a, b))); },
            {{"a", a}, {"b", b}});
    }
    {
        auto a = P(rand_tensor({2, 3}, rng));
        auto b = P(rand_tensor({4, 3}, rng));
        auto w = Value<double>::constant(rand_tensor({6, 3}, rng));
        run("concat_rows", [=] { return sum_all(mul(w, concat_rows(a, b))); },
            {{"a", a}, {"b", b}});
    }
    {
        auto a = P(rand_tensor({5, 3}, rng));
        auto w = Value<double>::constant(rand_tensor({4, 3}, rng));
        std::vector<int64_t> idx{4, 0, 2, 0}; // repeats exercise grad accumulation
        run("gather_rows", [=] { return sum_all(mul(w, gather_rows(a, idx))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({5, 3}, rng));
        auto w = Value<double>::constant(rand_tensor({2, 3}, rng));
        run("slice_rows", [=] { return sum_all(mul(w, slice_rows(a, 1, 2))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({5, 3}, rng));
        auto v = P(rand_tensor({1, 3}, rng));
        auto w = Value<double>::constant(rand_tensor({5, 3}, rng));
        std::vector<int64_t> idx{1, 3};
        run("replace_rows_with_vector",
            [=] { return sum_all(mul(w, replace_rows_with_vector(a, idx, v))); },
            {{"a", a}, {"v", v}});
    }
    {
        auto a = P(rand_tensor({6, 3}, rng));
        auto t = P(rand_tensor({2, 3}, rng));
        auto w = Value<double>::constant(rand_tensor({6, 3}, rng));
        run("add_tiled", [=] { return sum_all(mul(w, add_tiled(a, t))); },
            {{"a", a}, {"t", t}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        run("sum_all", [=] { return sum_all(a); }, {{"a", a}});
        run("mean_all", [=] { return mean_all(a); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 1}, rng));
        run("row_sums", [=] { return sum_all(mul(w, row_sums(a))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 4}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 4}, rng));
        std::vector<double> weights{0.5, -1.0, 2.0};
        run("scale_rows", [=] { return sum_all(mul(w, scale_rows(a, weights))); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 5}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 5}, rng));
        run("softmax_rows", [=] { return sum_all(mul(w, softmax_rows(a))); }, {{"a", a}});
        run("log_softmax_rows", [=] { return sum_all(mul(w, log_softmax_rows(a))); },
            {{"a", a}});
    }
    {
        auto a = P(rand_tensor({4, 6}, rng));
        std::vector<int64_t> targets{1, 0, 5, 2};
        run("cross_entropy_rows", [=] { return cross_entropy_rows(a, targets); }, {{"a", a}});
    }
    {
        auto a = P(rand_tensor({3, 6}, rng));
        auto g = P(rand_tensor({1, 6}, rng, 0.5));
        auto b = P(rand_tensor({1, 6}, rng, 0.5));
        auto w = Value<double>::constant(rand_tensor({3, 6}, rng));
        run("layer_norm_rows", [=] { return sum_all(mul(w, layer_norm_rows(a, g, b))); },
            {{"a", a}, {"gamma", g}, {"beta", b}});
    }
    {
        auto a = P(rand_tensor({3, 5}, rng));
        auto w = Value<double>::constant(rand_tensor({3, 5}, rng));
        run("l2_normalize_rows", [=] { return sum_all(mul(w, l2_normalize_rows(a))); },
            {{"a", a}});
    }
    {
        // batch 2, seq 3, width 4, heads 2
        auto qkv = P(rand_tensor({6, 12}, rng));
        auto w = Value<double>::constant(rand_tensor({6, 4}, rng));
        run("self_attention", [=] { return sum_all(mul(w, self_attention(qkv, 2, 3, 2))); },
            {{"qkv", qkv}});
    }
    {
        // masked attention: padded keys must receive zero gradient
        auto qkv = P(rand_tensor({6, 12}, rng));
        std::vector<int> lens{2, 3};
        // weight only the valid output rows
        Tensor<double> wt({6, 4});
        Rng wrng(5);
        for (int64_t r = 0; r < 6; ++r) {
            const bool valid = (r < 2) || (r >= 3);
            for (int64_t c = 0; c < 4; ++c)
                wt.at(r, c) = valid ? wrng.normal(0.0, 1.0) : 0.0;
        }
        auto w = Value<double>::constant(wt);
        run("self_attention(valid_lens)",
            [=] { return sum_all(mul(w, self_attention(qkv, 2, 3, 2, &lens))); },
            {{"qkv", qkv}});
    }
    {
        auto pos = P(rand_tensor({16, 3}, rng)); // 4x4 grid -> 2x2
        auto w = Value<double>::constant(rand_tensor({4, 3}, rng));
        run("interp_grid", [=] { return sum_all(mul(w, interp_grid(pos, 4, 2))); },
            {{"pos", pos}});
    }
}

TEST_CASE("gradient accumulates across shared subexpressions") {
    auto x = P(Tensor<double>::scalar(1.5));
    auto y = add(mul(x, x), mul(x, x)); // d/dx = 4x = 6
    backward(y);
    CHECK(x.grad().data[0] == doctest::Approx(6.0));
}

TEST_CASE("float32 and float64 instantiations agree on small inputs") {
    Rng rng(9);
    auto t64 = rand_tensor({4, 4}, rng);
    auto t32 = t64.cast<float>();
    auto s64 = softmax_rows(Value<double>::constant(t64));
    auto s32 = softmax_rows(Value<float>::constant(t32));
    for (int64_t i = 0; i < 16; ++i)
        CHECK(double(s32.val().data[size_t(i)]) ==
              doctest::Approx(s64.val().data[size_t(i)]).epsilon(1e-5));
}
