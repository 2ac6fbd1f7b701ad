#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "duet/ops.hpp"

namespace duet {

struct LossWeights {
    double alpha = 1.0; // distillation weight
    double beta = 2.0;  // masking weight

    void validate() const {
        DUET_CHECK(alpha >= 0.0 && beta >= 0.0, "losses: weights must be non-negative, got ",
                   alpha, ", ", beta);
    }
};

struct LossBreakdown {
    double l_clip = 0.0;
    double l_clip_hat = 0.0;
    double l_distill = 0.0;
    double l_mask = 0.0;
    double l_total = 0.0;
};

// Teacher-side distribution: softmax((scores - center) / tau) per row, in
// plain tensor math (no gradient path by construction).
template <typename T>
Tensor<T> sharpened_softmax(const Tensor<T>& scores, const Tensor<T>& center, double tau) {
    DUET_CHECK(tau > 0.0, "losses: temperature ", tau, " must be positive");
    DUET_CHECK(center.numel() == scores.cols(), "losses: center length ", center.numel(),
               " vs ", scores.cols(), " prototypes");
    const int64_t r = scores.rows(), c = scores.cols();
    Tensor<T> out({r, c});
    parallel_rows(r, [&](int64_t i) {
        const T* s = scores.row(i);
        T* o = out.row(i);
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < c; ++j) {
            o[j] = (s[j] - center.data[size_t(j)]) / T(tau);
            mx = std::max(mx, o[j]);
        }
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) {
            o[j] = std::exp(o[j] - mx);
            sum += o[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < c; ++j) o[j] *= inv;
    });
    return out;
}

// Symmetric InfoNCE over scaled cosine similarities. Rows of both inputs must
// be unit-norm; diagonal entries are the positives.
template <typename T>
Value<T> clip_loss(const Value<T>& image_emb, const Value<T>& text_emb,
                   const Value<T>& inv_temperature) {
    DUET_CHECK(image_emb.rows() == text_emb.rows(), "clip_loss: batch mismatch, ",
               image_emb.rows(), " image rows vs ", text_emb.rows(), " text rows");
    DUET_CHECK(image_emb.cols() == text_emb.cols(), "clip_loss: embedding width mismatch ",
               image_emb.cols(), " vs ", text_emb.cols());
    const int64_t b = image_emb.rows();
    DUET_CHECK(b >= 1, "clip_loss: empty batch");
    Value<T> logits = mul_scalar(matmul_nt(image_emb, text_emb), inv_temperature);
    std::vector<int64_t> diag(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) diag[size_t(i)] = i;
    Value<T> img_to_txt = cross_entropy_rows(logits, diag);
    Value<T> txt_to_img = cross_entropy_rows(transpose(logits), diag);
    return scale(add(img_to_txt, txt_to_img), 0.5);
}

// Self-distillation: local-crop student distributions match the teacher's
// centered, sharpened global distribution. student_scores holds crops_per_image
// rows per image, grouped by image; teacher_scores one row per image.
template <typename T>
Value<T> distill_loss(const Value<T>& student_scores, const Value<T>& teacher_scores,
                      const Tensor<T>& center, double tau_teacher, double tau_student,
                      int64_t crops_per_image) {
    DUET_CHECK(tau_teacher > 0.0 && tau_student > 0.0,
               "distill_loss: temperatures must be positive, got ", tau_teacher, ", ",
               tau_student);
    DUET_CHECK(crops_per_image >= 1, "distill_loss: need at least one crop per image");
    const int64_t batch = teacher_scores.rows();
    const int64_t k = teacher_scores.cols();
    DUET_CHECK(student_scores.rows() == batch * crops_per_image,
               "distill_loss: ", student_scores.rows(), " student rows vs ", batch, " images x ",
               crops_per_image, " crops");
    DUET_CHECK(student_scores.cols() == k, "distill_loss: prototype count mismatch ",
               student_scores.cols(), " vs ", k);

    const Tensor<T> teacher_probs =
        sharpened_softmax(stop_gradient(teacher_scores).val(), center, tau_teacher);
    Tensor<T> expanded({batch * crops_per_image, k});
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t m = 0; m < crops_per_image; ++m)
            std::memcpy(expanded.row(b * crops_per_image + m), teacher_probs.row(b),
                        size_t(k) * sizeof(T));

    Value<T> log_student = log_softmax_rows(scale(student_scores, 1.0 / tau_student));
    Value<T> weighted = mul(Value<T>::constant(std::move(expanded)), log_student);
    return scale(sum_all(weighted), -1.0 / double(batch * crops_per_image));
}

// Masked image modeling: student distributions at masked positions match the
// teacher's distribution for the unmasked patches. Rows of the two score
// matrices index the same (image, position) pairs; counts_per_image gives the
// per-image masked counts for normalization.
template <typename T>
Value<T> mask_loss(const Value<T>& student_scores, const Value<T>& teacher_scores,
                   const std::vector<int64_t>& counts_per_image, const Tensor<T>& center,
                   double tau_teacher, double tau_student) {
    DUET_CHECK(tau_teacher > 0.0 && tau_student > 0.0,
               "mask_loss: temperatures must be positive, got ", tau_teacher, ", ",
               tau_student);
    int64_t total = 0;
    for (int64_t c : counts_per_image) {
        DUET_CHECK(c > 0, "mask_loss: empty mask set for an image; skip the term when the "
                          "mask ratio is zero");
        total += c;
    }
    DUET_CHECK(total > 0, "mask_loss: empty mask set");
    DUET_CHECK(student_scores.rows() == total && teacher_scores.rows() == total,
               "mask_loss: row counts ", student_scores.rows(), "/", teacher_scores.rows(),
               " vs ", total, " masked positions");
    DUET_CHECK(student_scores.cols() == teacher_scores.cols(),
               "mask_loss: prototype count mismatch ", student_scores.cols(), " vs ",
               teacher_scores.cols());

    const Tensor<T> teacher_probs =
        sharpened_softmax(stop_gradient(teacher_scores).val(), center, tau_teacher);
    Value<T> log_student = log_softmax_rows(scale(student_scores, 1.0 / tau_student));
    Value<T> per_row = mul(Value<T>::constant(teacher_probs), log_student);

    const int64_t batch = int64_t(counts_per_image.size());
    std::vector<T> weights(static_cast<size_t>(total));
    int64_t row = 0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < counts_per_image[size_t(b)]; ++i)
            weights[size_t(row++)] = T(-1.0 / (double(batch) * double(counts_per_image[size_t(b)])));
    return sum_all(scale_rows(per_row, std::move(weights)));
}

// Weighted combination. Undefined terms count as zero (disabled losses).
template <typename T>
struct LossTerms {
    Value<T> clip;
    Value<T> clip_hat;
    Value<T> distill;
    Value<T> mask;
};

template <typename T>
std::pair<Value<T>, LossBreakdown> total_loss(const LossTerms<T>& terms,
                                              const LossWeights& weights) {
    weights.validate();
    auto component = [](const Value<T>& v, const char* name) {
        if (!v.defined()) return 0.0;
        const double x = double(v.val().data[0]);
        DUET_CHECK(std::isfinite(x), "total_loss: non-finite component ", name, " = ", x);
        return x;
    };
    LossBreakdown bd;
    bd.l_clip = component(terms.clip, "clip");
    bd.l_clip_hat = component(terms.clip_hat, "clip_hat");
    bd.l_distill = component(terms.distill, "distill");
    bd.l_mask = component(terms.mask, "mask");

    Value<T> total;
    auto accumulate = [&total](Value<T> v) {
        if (!v.defined()) return;
        total = total.defined() ? add(total, v) : v;
    };
    if (terms.clip.defined()) accumulate(scale(terms.clip, 0.5));
    if (terms.clip_hat.defined()) accumulate(scale(terms.clip_hat, 0.5));
    if (terms.distill.defined() && weights.alpha != 0.0)
        accumulate(scale(terms.distill, weights.alpha));
    if (terms.mask.defined() && weights.beta != 0.0) accumulate(scale(terms.mask, weights.beta));
    if (!total.defined()) total = Value<T>::constant(Tensor<T>::scalar(T(0)));

    bd.l_total = 0.5 * (bd.l_clip + bd.l_clip_hat) + weights.alpha * bd.l_distill +
                 weights.beta * bd.l_mask;
    return {total, bd};
}

} // namespace duet
