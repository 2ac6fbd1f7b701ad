#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/optim.hpp"
#include "duet/teacher.hpp"
#include "support/test_util.hpp"

using namespace duet;
using testutil::rand_tensor;

namespace {

ParamSet<double> named_set(const std::string& prefix, const std::vector<double>& values,
                           bool trainable, Rng& rng) {
    ParamSet<double> ps;
    (void)rng;
    ps.add(prefix + ".w", Tensor<double>({1, int64_t(values.size())}, values), trainable);
    return ps;
}

} // namespace

TEST_CASE("ema update: identity momentum, full copy, and the first paper step") {
    Rng rng(1);
    auto teacher = named_set("t", {1.0, 2.0, 3.0}, false, rng);
    auto student = named_set("s", {4.0, -2.0, 0.5}, true, rng);

    SUBCASE("m = 1 leaves the teacher unchanged") {
        ema_update(teacher, student, 1.0);
        CHECK(teacher.at("t.w").val().data == std::vector<double>{1.0, 2.0, 3.0});
    }
    SUBCASE("m = 0 copies the student") {
        ema_update(teacher, student, 0.0);
        CHECK(teacher.at("t.w").val().data == std::vector<double>{4.0, -2.0, 0.5});
    }
    SUBCASE("scalar case at the schedule's starting momentum") {
        auto t1 = named_set("t", {1.0}, false, rng);
        auto s1 = named_set("s", {0.0}, true, rng);
        ema_update(t1, s1, 0.994);
        CHECK(t1.at("t.w").val().data[0] == doctest::Approx(0.994).epsilon(1e-12));
    }
}

TEST_CASE("ema update is a contraction toward the student") {
    Rng rng(2);
    ParamSet<double> teacher;
    ParamSet<double> student;
    teacher.add("t.w", rand_tensor({4, 5}, rng), false);
    student.add("s.w", rand_tensor({4, 5}, rng), true);
    Tensor<double> before = teacher.at("t.w").val();
    ema_update(teacher, student, 0.97);
    const auto& after = teacher.at("t.w").val();
    const auto& target = student.at("s.w").val();
    for (int64_t i = 0; i < after.numel(); ++i) {
        const double lo = std::min(before.data[size_t(i)], target.data[size_t(i)]);
        const double hi = std::max(before.data[size_t(i)], target.data[size_t(i)]);
        CHECK(after.data[size_t(i)] >= lo - 1e-12);
        CHECK(after.data[size_t(i)] <= hi + 1e-12);
    }
}

TEST_CASE("ema update rejects misaligned parameter sets") {
    Rng rng(3);
    ParamSet<double> teacher;
    teacher.add("t.a", Tensor<double>({2, 2}), false);
    ParamSet<double> student;
    student.add("s.a", Tensor<double>({2, 3}), true);
    CHECK_THROWS_AS(ema_update(teacher, student, 0.5), duet::error);

    ParamSet<double> extra;
    extra.add("s.a", Tensor<double>({2, 2}), true);
    extra.add("s.b", Tensor<double>({1, 1}), true);
    CHECK_THROWS_AS(ema_update(teacher, extra, 0.5), duet::error);
    CHECK_THROWS_AS(ema_update(teacher, student, 1.5), duet::error);
}

TEST_CASE("center update follows the documented arithmetic") {
    SUBCASE("momentum 0 replaces the center with the batch mean") {
        Tensor<double> c({1, 2});
        Tensor<double> scores({3, 2}, {1, 2, 3, 4, 5, 6});
        center_update(c, scores, 0.0);
        CHECK(c.data[0] == doctest::Approx(3.0));
        CHECK(c.data[1] == doctest::Approx(4.0));
    }
    SUBCASE("zero center, batch mean (1,2), momentum 0.9 gives (0.1, 0.2)") {
        Tensor<double> c({1, 2});
        Tensor<double> scores({2, 2}, {0.0, 1.0, 2.0, 3.0}); // means (1, 2)
        center_update(c, scores, 0.9);
        CHECK(c.data[0] == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(c.data[1] == doctest::Approx(0.2).epsilon(1e-12));
    }
}

TEST_CASE("schedules hit their endpoints exactly") {
    ScheduleConfig cfg;
    cfg.total_steps = 1000;
    cfg.warmup_frac = 0.1;
    cfg.peak_lr = 5e-4;

    CHECK(schedule_at(0, cfg).lr == doctest::Approx(0.0));
    CHECK(schedule_at(cfg.warmup_steps(), cfg).lr == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(schedule_at(1000, cfg).lr == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(schedule_at(1000, cfg).ema_momentum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(schedule_at(0, cfg).ema_momentum == doctest::Approx(0.994).epsilon(1e-12));

    CHECK_THROWS_AS(schedule_at(-1, cfg), duet::error);
    CHECK_THROWS_AS(schedule_at(1001, cfg), duet::error);
}

TEST_CASE("the learning rate is piecewise linear with its maximum at warm-up") {
    ScheduleConfig cfg;
    cfg.total_steps = 400;
    cfg.warmup_frac = 0.25;
    cfg.peak_lr = 1e-3;
    const int64_t warmup = cfg.warmup_steps();

    double prev = schedule_at(0, cfg).lr;
    double max_seen = prev;
    int64_t argmax = 0;
    for (int64_t s = 1; s <= 400; ++s) {
        const double lr = schedule_at(s, cfg).lr;
        // linearity: constant increments within each phase
        if (s > 1 && s <= warmup) {
            const double inc = lr - prev;
            CHECK(inc == doctest::Approx(cfg.peak_lr / double(warmup)).epsilon(1e-9));
        }
        if (lr > max_seen) {
            max_seen = lr;
            argmax = s;
        }
        prev = lr;
    }
    CHECK(argmax == warmup);
    CHECK(max_seen == doctest::Approx(cfg.peak_lr));
}

TEST_CASE("temperatures match the published constants at every step") {
    ScheduleConfig cfg;
    cfg.total_steps = 500;
    cfg.warmup_frac = 0.2;
    for (int64_t s = 0; s <= 500; s += 7) {
        auto st = schedule_at(s, cfg);
        CHECK(st.tau_teacher == doctest::Approx(0.07));
        CHECK(st.tau_student == doctest::Approx(0.1));
        CHECK(st.tau_student_patch == doctest::Approx(0.1));
        CHECK(st.tau_teacher_patch >= 0.04 - 1e-12);
        CHECK(st.tau_teacher_patch <= 0.07 + 1e-12);
    }
    CHECK(schedule_at(0, cfg).tau_teacher_patch == doctest::Approx(0.04));
    CHECK(schedule_at(cfg.warmup_steps(), cfg).tau_teacher_patch == doctest::Approx(0.07));
    CHECK(schedule_at(500, cfg).tau_teacher_patch == doctest::Approx(0.07));
}

TEST_CASE("ema momentum rises monotonically along the cosine schedule") {
    ScheduleConfig cfg;
    cfg.total_steps = 300;
    double prev = -1;
    for (int64_t s = 0; s <= 300; ++s) {
        const double m = schedule_at(s, cfg).ema_momentum;
        CHECK(m >= prev);
        CHECK(m >= 0.994 - 1e-12);
        CHECK(m <= 1.0 + 1e-12);
        prev = m;
    }
}

TEST_CASE("teacher tensors cannot enter the optimizer") {
    Rng rng(11);
    ParamSet<double> teacher_params;
    teacher_params.add("t.w", rand_tensor({2, 2}, rng), /*trainable=*/false);
    AdamW<double> opt;
    CHECK_THROWS_AS(opt.register_params(teacher_params), duet::error);
}

TEST_CASE("teacher state mirrors the student and copies it at initialization") {
    Rng rng(12);
    VisionEncoderConfig vcfg;
    vcfg.patch = 4;
    vcfg.side = 8;
    vcfg.depth = 1;
    vcfg.width = 8;
    vcfg.heads = 2;
    VisionEncoder<double> student(vcfg, rng, true);
    PrototypeHeadConfig hcfg;
    hcfg.in_dim = 8;
    hcfg.prototypes = 8;
    PrototypeHead<double> head_g(hcfg, rng, true, "head_g");
    PrototypeHead<double> head_p(hcfg, rng, true, "head_p");

    auto teacher = TeacherState<double>::init_from(student, head_g, head_p, rng);
    REQUIRE(teacher.encoder->params().size() == student.params().size());
    for (size_t i = 0; i < student.params().size(); ++i) {
        const auto& s = student.params().items()[i];
        const auto& t = teacher.encoder->params().items()[i];
        CHECK(t.value.val().shape == s.value.val().shape);
        CHECK(t.value.val().data == s.value.val().data);
        CHECK_FALSE(t.value->requires_grad);
    }

    // after one ema step with m=0.5 every element sits halfway
    Tensor<double> orig = student.params().items()[0].value.val();
    for (auto& v : student.params().items()[0].value.val().data) v += 1.0;
    teacher.ema_from(student, head_g, head_p, 0.5);
    const auto& tv = teacher.encoder->params().items()[0].value.val();
    for (int64_t i = 0; i < tv.numel(); ++i)
        CHECK(tv.data[size_t(i)] == doctest::Approx(orig.data[size_t(i)] + 0.5).epsilon(1e-12));
}

TEST_CASE("frozen teachers ignore ema updates") {
    Rng rng(13);
    VisionEncoderConfig vcfg;
    vcfg.patch = 4;
    vcfg.side = 8;
    vcfg.depth = 1;
    vcfg.width = 8;
    vcfg.heads = 2;
    VisionEncoder<double> student(vcfg, rng, true);
    PrototypeHeadConfig hcfg;
    hcfg.in_dim = 8;
    hcfg.prototypes = 8;
    PrototypeHead<double> head_g(hcfg, rng, true, "head_g");
    PrototypeHead<double> head_p(hcfg, rng, true, "head_p");
    auto teacher = TeacherState<double>::init_from(student, head_g, head_p, rng);
    teacher.frozen = true;

    const uint64_t before = testutil::hash_tensor(teacher.encoder->params().items()[0].value.val());
    for (auto& v : student.params().items()[0].value.val().data) v += 2.0;
    teacher.ema_from(student, head_g, head_p, 0.0);
    CHECK(testutil::hash_tensor(teacher.encoder->params().items()[0].value.val()) == before);
}
