#pragma once

#include <cmath>
#include <memory>

#include "duet/heads.hpp"
#include "duet/vision_encoder.hpp"

namespace duet {

// teacher <- m * teacher + (1 - m) * student, tensor by tensor. Sets must
// mirror each other exactly (same names, same shapes, same order).
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double momentum) {
    DUET_CHECK(momentum >= 0.0 && momentum <= 1.0, "ema_update: momentum ", momentum,
               " outside [0, 1]");
    DUET_CHECK(teacher.size() == student.size(), "ema_update: parameter sets misaligned, ",
               teacher.size(), " vs ", student.size(), " tensors");
    for (size_t i = 0; i < teacher.size(); ++i) {
        auto& t = teacher.items()[i];
        const auto& s = student.items()[i];
        DUET_CHECK(t.name.substr(t.name.find('.')) == s.name.substr(s.name.find('.')),
                   "ema_update: parameter name mismatch ", t.name, " vs ", s.name);
        check_same_shape(t.value.val(), s.value.val(), "ema_update");
        T* tp = t.value.val().data.data();
        const T* sp = s.value.val().data.data();
        const int64_t n = t.value.val().numel();
        const T m = T(momentum);
        for (int64_t j = 0; j < n; ++j) tp[j] = m * tp[j] + (T(1) - m) * sp[j];
    }
}

// center <- m * center + (1 - m) * mean over rows of the batch scores. For
// the patch center the rows span batch and all patch positions.
template <typename T>
void center_update(Tensor<T>& center, const Tensor<T>& batch_scores, double momentum) {
    DUET_CHECK(momentum >= 0.0 && momentum <= 1.0, "center_update: momentum ", momentum,
               " outside [0, 1]");
    DUET_CHECK(center.numel() == batch_scores.cols(), "center_update: center length ",
               center.numel(), " vs ", batch_scores.cols(), " prototypes");
    const int64_t r = batch_scores.rows(), c = batch_scores.cols();
    DUET_CHECK(r >= 1, "center_update: empty score batch");
    std::vector<double> mean(size_t(c), 0.0);
    for (int64_t i = 0; i < r; ++i) {
        const T* row = batch_scores.row(i);
        for (int64_t j = 0; j < c; ++j) mean[size_t(j)] += double(row[j]);
    }
    for (int64_t j = 0; j < c; ++j)
        center.data[size_t(j)] = T(momentum * double(center.data[size_t(j)]) +
                                   (1.0 - momentum) * mean[size_t(j)] / double(r));
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

struct ScheduleConfig {
    int64_t total_steps = 0;
    double warmup_frac = 0.05;       // shared by lr and the patch-teacher temperature
    double peak_lr = 1e-3;
    double ema_momentum_start = 0.994; // cosine to 1.0 over the run
    double tau_teacher = 0.07;
    double tau_student = 0.1;
    double tau_teacher_patch_start = 0.04;
    double tau_teacher_patch_end = 0.07;
    double tau_student_patch = 0.1;
    double center_momentum = 0.9; // constant

    int64_t warmup_steps() const {
        return int64_t(std::llround(warmup_frac * double(total_steps)));
    }
};

struct ScheduleState {
    int64_t step = 0;
    int64_t total_steps = 0;
    double lr = 0.0;
    double ema_momentum = 0.0;
    double tau_teacher = 0.0;
    double tau_student = 0.0;
    double tau_teacher_patch = 0.0;
    double tau_student_patch = 0.0;
};

// lr: linear 0 -> peak over the warm-up span, then linear decay to 0 at the
// end. EMA momentum: cosine from the start value to 1. Patch-teacher
// temperature: linear warm-up then constant. Other temperatures constant.
inline ScheduleState schedule_at(int64_t step, const ScheduleConfig& cfg) {
    DUET_CHECK(step >= 0 && step <= cfg.total_steps, "schedule: step ", step,
               " outside [0, ", cfg.total_steps, "]");
    ScheduleState s;
    s.step = step;
    s.total_steps = cfg.total_steps;
    const int64_t warmup = cfg.warmup_steps();
    if (cfg.total_steps == 0) {
        s.lr = 0.0;
    } else if (step <= warmup && warmup > 0) {
        s.lr = cfg.peak_lr * double(step) / double(warmup);
    } else if (cfg.total_steps == warmup) {
        s.lr = cfg.peak_lr;
    } else {
        s.lr = cfg.peak_lr * double(cfg.total_steps - step) / double(cfg.total_steps - warmup);
    }
    const double progress =
        cfg.total_steps == 0 ? 1.0 : double(step) / double(cfg.total_steps);
    s.ema_momentum =
        1.0 - (1.0 - cfg.ema_momentum_start) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    s.tau_teacher = cfg.tau_teacher;
    s.tau_student = cfg.tau_student;
    s.tau_student_patch = cfg.tau_student_patch;
    if (warmup > 0 && step < warmup) {
        s.tau_teacher_patch = cfg.tau_teacher_patch_start +
                              (cfg.tau_teacher_patch_end - cfg.tau_teacher_patch_start) *
                                  double(step) / double(warmup);
    } else {
        s.tau_teacher_patch = cfg.tau_teacher_patch_end;
    }
    return s;
}

// ---------------------------------------------------------------------------
// teacher state
// ---------------------------------------------------------------------------

// EMA-tracked twin of the student: image encoder plus the two projection
// heads, with the centering vectors for the global and patch losses.
template <typename T>
struct TeacherState {
    std::unique_ptr<VisionEncoder<T>> encoder;
    std::unique_ptr<PrototypeHead<T>> head_global;
    std::unique_ptr<PrototypeHead<T>> head_patch;
    Tensor<T> center_global; // 1 x K
    Tensor<T> center_patch;  // 1 x K
    bool frozen = false;     // frozen teachers skip EMA updates entirely

    static TeacherState init_from(const VisionEncoder<T>& student_encoder,
                                  const PrototypeHead<T>& student_head_global,
                                  const PrototypeHead<T>& student_head_patch, Rng& rng) {
        TeacherState t;
        t.encoder = std::make_unique<VisionEncoder<T>>(student_encoder.config(), rng,
                                                       /*trainable=*/false, "t_img");
        t.head_global = std::make_unique<PrototypeHead<T>>(student_head_global.config(), rng,
                                                           /*trainable=*/false, "t_head_g");
        t.head_patch = std::make_unique<PrototypeHead<T>>(student_head_patch.config(), rng,
                                                          /*trainable=*/false, "t_head_p");
        t.encoder->params().copy_from(student_encoder.params());
        t.head_global->params().copy_from(student_head_global.params());
        t.head_patch->params().copy_from(student_head_patch.params());
        t.center_global = Tensor<T>({1, student_head_global.config().prototypes});
        t.center_patch = Tensor<T>({1, student_head_patch.config().prototypes});
        return t;
    }

    void ema_from(const VisionEncoder<T>& student_encoder,
                  const PrototypeHead<T>& student_head_global,
                  const PrototypeHead<T>& student_head_patch, double momentum) {
        if (frozen) return;
        ema_update(encoder->params(), student_encoder.params(), momentum);
        ema_update(head_global->params(), student_head_global.params(), momentum);
        ema_update(head_patch->params(), student_head_patch.params(), momentum);
    }
};

} // namespace duet
