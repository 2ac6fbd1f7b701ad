#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/gradcheck.hpp"
#include "duet/losses.hpp"
#include "support/test_util.hpp"

using namespace duet;
using testutil::rand_tensor;

namespace {

Value<double> unit_rows(Tensor<double> t) {
    return l2_normalize_rows(Value<double>::constant(std::move(t)));
}

double entropy(const std::vector<double>& p) {
    double h = 0;
    for (double x : p)
        if (x > 0) h -= x * std::log(x);
    return h;
}

std::vector<double> softmax_of(const std::vector<double>& s, double tau) {
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    std::vector<double> p(s.size());
    double sum = 0;
    for (size_t i = 0; i < s.size(); ++i) {
        p[i] = std::exp((s[i] - mx) / tau);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
Tensor<double> random_rotation(int64_t d, Rng& rng) {
    Tensor<double> q({d, d});
    for (int64_t i = 0; i < d; ++i) {
        std::vector<double> v(static_cast<size_t>(d));
        for (auto& x : v) x = rng.normal();
        for (int64_t j = 0; j < i; ++j) {
            double dot = 0;
            for (int64_t k = 0; k < d; ++k) dot += v[size_t(k)] * q.at(j, k);
            for (int64_t k = 0; k < d; ++k) v[size_t(k)] -= dot * q.at(j, k);
        }
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (int64_t k = 0; k < d; ++k) q.at(i, k) = v[size_t(k)] / norm;
    }
    return q;
}

} // namespace

TEST_CASE("clip loss is zero for a single pair") {
    Rng rng(1);
    auto img = unit_rows(rand_tensor({1, 8}, rng));
    auto txt = unit_rows(rand_tensor({1, 8}, rng));
    auto temp = Value<double>::constant(Tensor<double>::scalar(14.2857));
    CHECK(clip_loss(img, txt, temp).val().data[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("clip loss on an identity similarity matrix matches the closed form") {
    // two orthogonal pairs, unit temperature: loss = log(1 + e^-1)
    auto img = Value<double>::constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    auto txt = Value<double>::constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    auto temp = Value<double>::constant(Tensor<double>::scalar(1.0));
    const double loss = clip_loss(img, txt, temp).val().data[0];
    CHECK(loss == doctest::Approx(0.31326168751822286).epsilon(1e-9));
}

TEST_CASE("clip loss is non-negative and invariant to a common rotation") {
    Rng rng(7);
    const int64_t b = 5, d = 6;
    auto temp = Value<double>::constant(Tensor<double>::scalar(9.0));
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> img = rand_tensor({b, d}, rng);
        Tensor<double> txt = rand_tensor({b, d}, rng);
        auto base = clip_loss(unit_rows(img), unit_rows(txt), temp).val().data[0];
        CHECK(base >= 0.0);
        Tensor<double> rot = random_rotation(d, rng);
        auto rotate = [&](const Tensor<double>& m) {
            Tensor<double> out({b, d});
            gemm_nt(m.data.data(), rot.data.data(), out.data.data(), b, d, d);
            return out;
        };
        auto rotated = clip_loss(unit_rows(rotate(img)), unit_rows(rotate(txt)), temp);
        CHECK(rotated.val().data[0] == doctest::Approx(base).epsilon(1e-9));
    }
}

TEST_CASE("clip loss rejects mismatched batches") {
    Rng rng(3);
    auto img = unit_rows(rand_tensor({3, 4}, rng));
    auto txt = unit_rows(rand_tensor({2, 4}, rng));
    auto temp = Value<double>::constant(Tensor<double>::scalar(1.0));
    CHECK_THROWS_AS(clip_loss(img, txt, temp), duet::error);
}

TEST_CASE("distill loss reproduces the two-prototype hand computation") {
    // teacher (1,0) centered at zero, unit temperatures, student uniform
    auto student = Value<double>::constant(Tensor<double>({1, 2}, {0.0, 0.0}));
    auto teacher = Value<double>::constant(Tensor<double>({1, 2}, {1.0, 0.0}));
    Tensor<double> center({1, 2});
    const double loss = distill_loss(student, teacher, center, 1.0, 1.0, 1).val().data[0];
    CHECK(loss == doctest::Approx(0.69314718055994531).epsilon(1e-9));
}

TEST_CASE("distill loss equals teacher entropy when student matches teacher") {
    Rng rng(17);
    const int64_t k = 6;
    Tensor<double> scores = rand_tensor({1, k}, rng);
    Tensor<double> center({1, k});
    auto student = Value<double>::constant(scores);
    auto teacher = Value<double>::constant(scores);
    const double loss = distill_loss(student, teacher, center, 1.0, 1.0, 1).val().data[0];
    std::vector<double> p = softmax_of(scores.data, 1.0);
    CHECK(loss == doctest::Approx(entropy(p)).epsilon(1e-9));

    // uniform scores over K -> loss = log K
    auto uniform = Value<double>::constant(Tensor<double>({1, k}, 0.5));
    const double lu = distill_loss(uniform, uniform, center, 1.0, 1.0, 1).val().data[0];
    CHECK(lu == doctest::Approx(std::log(double(k))).epsilon(1e-9));
}

TEST_CASE("distill and mask losses never drop below the teacher entropy") {
    Rng rng(23);
    const int64_t k = 8;
    Tensor<double> center({1, k});
    for (int trial = 0; trial < 30; ++trial) {
        Tensor<double> ts = rand_tensor({1, k}, rng, 2.0);
        Tensor<double> ss = rand_tensor({1, k}, rng, 2.0);
        const double tau_t = 0.5 + rng.uniform() * 0.5;
        const double tau_s = tau_t; // Gibbs bound needs matched temperatures
        const double loss = distill_loss(Value<double>::constant(ss),
                                         Value<double>::constant(ts), center, tau_t, tau_s, 1)
                                .val()
                                .data[0];
        const double h = entropy(softmax_of(ts.data, tau_t));
        CHECK(loss >= h - 1e-9);

        const double ml = mask_loss(Value<double>::constant(ss), Value<double>::constant(ts),
                                    {1}, center, tau_t, tau_s)
                              .val()
                              .data[0];
        CHECK(ml >= h - 1e-9);
    }
}

TEST_CASE("teacher inputs receive zero gradient through the distillation losses") {
    Rng rng(29);
    auto student = Value<double>::param(rand_tensor({4, 4}, rng));
    auto teacher = Value<double>::param(rand_tensor({2, 4}, rng));
    Tensor<double> center({1, 4});
    auto loss = distill_loss(student, teacher, center, 0.07, 0.1, 2);
    backward(loss);
    CHECK(teacher.grad().shape == teacher.val().shape);
    for (double g : teacher.grad().data) CHECK(g == 0.0);
    double student_norm = 0;
    for (double g : student.grad().data) student_norm += g * g;
    CHECK(student_norm > 0.0);
}

TEST_CASE("mask loss reproduces the two-prototype hand computation") {
    auto student = Value<double>::constant(Tensor<double>({1, 2}, {1.0, 0.0}));
    auto teacher = Value<double>::constant(Tensor<double>({1, 2}, {0.0, 0.0}));
    Tensor<double> center({1, 2});
    const double loss = mask_loss(student, teacher, {1}, center, 1.0, 1.0).val().data[0];
    CHECK(loss == doctest::Approx(0.81326168751822286).epsilon(1e-9));
}

TEST_CASE("mask loss equals log K at matched uniform scores and errors on empty masks") {
    const int64_t k = 4;
    Tensor<double> center({1, k});
    auto u = Value<double>::constant(Tensor<double>({3, k}, 0.25));
    const double loss = mask_loss(u, u, {2, 1}, center, 1.0, 1.0).val().data[0];
    CHECK(loss == doctest::Approx(std::log(double(k))).epsilon(1e-9));
    CHECK_THROWS_AS(mask_loss(u, u, {3, 0}, center, 1.0, 1.0), duet::error);
}

TEST_CASE("mask loss normalizes per image before averaging over the batch") {
    // image 0 has two masked positions, image 1 has one; identical per-row
    // losses mean the batch value equals the per-row value.
    Tensor<double> teacher({3, 2}, {0, 0, 0, 0, 0, 0});
    Tensor<double> student({3, 2}, {1, 0, 1, 0, 1, 0});
    Tensor<double> center({1, 2});
    const double row = 0.81326168751822286;
    const double loss = mask_loss(Value<double>::constant(student),
                                  Value<double>::constant(teacher), {2, 1}, center, 1.0, 1.0)
                            .val()
                            .data[0];
    CHECK(loss == doctest::Approx(row).epsilon(1e-9));
}

TEST_CASE("sharpening: lower teacher temperature concentrates the distribution") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        // scores scaled so the 0.04 temperature does not saturate to 1.0
        Tensor<double> scores = rand_tensor({1, 6}, rng, 0.02);
        Tensor<double> center({1, 6});
        auto max_of = [&](double tau) {
            auto p = sharpened_softmax(scores, center, tau);
            double mx = 0;
            for (double v : p.data) mx = std::max(mx, v);
            return mx;
        };
        CHECK(max_of(0.04) > max_of(0.07));
        CHECK(max_of(0.07) > max_of(0.5));
        CHECK(max_of(0.5) > max_of(2.0));
    }
}

TEST_CASE("total loss combines components with the documented arithmetic") {
    LossTerms<double> terms;
    terms.clip = Value<double>::constant(Tensor<double>::scalar(0.4));
    terms.clip_hat = Value<double>::constant(Tensor<double>::scalar(0.6));
    terms.distill = Value<double>::constant(Tensor<double>::scalar(1.0));
    terms.mask = Value<double>::constant(Tensor<double>::scalar(0.5));

    auto [total, bd] = total_loss(terms, LossWeights{1.0, 2.0});
    CHECK(total.val().data[0] == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(bd.l_total == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(bd.l_total == doctest::Approx(0.5 * (bd.l_clip + bd.l_clip_hat) +
                                        1.0 * bd.l_distill + 2.0 * bd.l_mask));

    auto [clip_only, bd2] = total_loss(terms, LossWeights{0.0, 0.0});
    CHECK(bd2.l_total == doctest::Approx(0.5 * (0.4 + 0.6)).epsilon(1e-12));
    CHECK(clip_only.val().data[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("total loss rejects non-finite components") {
    LossTerms<double> terms;
    terms.clip = Value<double>::constant(
        Tensor<double>::scalar(std::numeric_limits<double>::quiet_NaN()));
    CHECK_THROWS_AS(total_loss(terms, LossWeights{}), duet::error);
}

TEST_CASE("all three losses pass the gradient oracle on small random instances") {
    Rng rng(41);

    SUBCASE("clip") {
        auto img = Value<double>::param(rand_tensor({3, 5}, rng));
        auto txt = Value<double>::param(rand_tensor({3, 5}, rng));
        auto temp = Value<double>::param(Tensor<double>::scalar(5.0));
        auto report = grad_check(
            [&] { return clip_loss(l2_normalize_rows(img), l2_normalize_rows(txt), temp); },
            {{"img", img}, {"txt", txt}, {"temp", temp}}, 1e-5, 1e-4);
        INFO("max rel err ", report.max_rel_err);
        CHECK(report.pass);
    }

    SUBCASE("distill") {
        // moderate score spread keeps the sharpened softmax away from
        // saturation, where central differences lose accuracy
        const int64_t b = 2, m = 3, k = 6;
        auto student = Value<double>::param(rand_tensor({b * m, k}, rng, 0.3));
        auto teacher = Value<double>::param(rand_tensor({b, k}, rng, 0.3));
        Tensor<double> center = rand_tensor({1, k}, rng, 0.05);
        // teacher sits under stop-gradient: the analytic grad is zero by
        // construction while the finite difference sees real dependence, so
        // only student-side parameters join the check
        auto report =
            grad_check([&] { return distill_loss(student, teacher, center, 0.07, 0.1, m); },
                       {{"student", student}}, 1e-5, 1e-4);
        INFO("max rel err ", report.max_rel_err);
        CHECK(report.pass);
    }

    SUBCASE("mask with one image, four patches, two prototypes") {
        auto student = Value<double>::param(rand_tensor({4, 2}, rng, 0.3));
        auto teacher = Value<double>::param(rand_tensor({4, 2}, rng, 0.3));
        Tensor<double> center = rand_tensor({1, 2}, rng, 0.05);
        auto report =
            grad_check([&] { return mask_loss(student, teacher, {4}, center, 0.05, 0.1); },
                       {{"student", student}}, 1e-5, 1e-4);
        INFO("max rel err ", report.max_rel_err);
        CHECK(report.pass);
    }

    SUBCASE("total") {
        auto img = Value<double>::param(rand_tensor({2, 4}, rng));
        auto txt = Value<double>::param(rand_tensor({2, 4}, rng));
        auto temp = Value<double>::param(Tensor<double>::scalar(3.0));
        auto student_g = Value<double>::param(rand_tensor({4, 5}, rng, 0.3));
        auto teacher_g = Value<double>::param(rand_tensor({2, 5}, rng, 0.3));
        auto student_m = Value<double>::param(rand_tensor({3, 5}, rng, 0.3));
        auto teacher_m = Value<double>::param(rand_tensor({3, 5}, rng, 0.3));
        Tensor<double> c = rand_tensor({1, 5}, rng, 0.05);
        Tensor<double> cp = rand_tensor({1, 5}, rng, 0.05);
        auto build = [&] {
            LossTerms<double> terms;
            terms.clip = clip_loss(l2_normalize_rows(img), l2_normalize_rows(txt), temp);
            terms.clip_hat = clip_loss(l2_normalize_rows(txt), l2_normalize_rows(img), temp);
            terms.distill = distill_loss(student_g, teacher_g, c, 0.07, 0.1, 2);
            terms.mask = mask_loss(student_m, teacher_m, {2, 1}, cp, 0.05, 0.1);
            return total_loss(terms, LossWeights{1.0, 2.0}).first;
        };
        auto report = grad_check(build,
                                 {{"img", img},
                                  {"txt", txt},
                                  {"temp", temp},
                                  {"student_g", student_g},
                                  {"student_m", student_m}},
                                 1e-5, 1e-4);
        INFO("max rel err ", report.max_rel_err);
        CHECK(report.pass);
    }
}
