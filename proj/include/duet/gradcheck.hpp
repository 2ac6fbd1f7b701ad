#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "duet/ops.hpp"

namespace duet {

// Result of comparing reverse-mode gradients against central differences.
struct GradReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
        int64_t worst_index = -1;
        double analytic = 0.0;
        double numeric = 0.0;
    };
    std::vector<Entry> per_param;
    double max_rel_err = 0.0;
    bool pass = false;
    double step = 0.0;
    double tolerance = 0.0;
};

struct GradCheckParam {
    std::string name;
    Value<double> value;
};

// Validates reverse-mode gradients of a deterministic scalar function with
// the central difference (f(x+h) - f(x-h)) / 2h per coordinate. Runs in
// 64-bit precision only; finite differences are unreliable in 32-bit.
inline GradReport grad_check(const std::function<Value<double>()>& fn,
                             std::vector<GradCheckParam> params, double h = 1e-5,
                             double tolerance = 1e-4, double denom_eps = 1e-8) {
    for (auto& p : params) p.value->zero_grad();
    Value<double> loss = fn();
    DUET_CHECK(loss.val().numel() == 1, "grad_check: function output must be scalar");
    DUET_CHECK(std::isfinite(loss.val().data[0]),
               "grad_check: non-finite function value ", loss.val().data[0]);
    backward(loss);

    GradReport report;
    report.step = h;
    report.tolerance = tolerance;
    for (auto& p : params) {
        GradReport::Entry entry;
        entry.name = p.name;
        Tensor<double>& x = p.value.val();
        const Tensor<double>& g = p.value.grad();
        DUET_CHECK(g.shape == x.shape, "grad_check: missing gradient for ", p.name);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double saved = x.data[size_t(i)];
            x.data[size_t(i)] = saved + h;
            const double fp = fn().val().data[0];
            x.data[size_t(i)] = saved - h;
            const double fm = fn().val().data[0];
            x.data[size_t(i)] = saved;
            DUET_CHECK(std::isfinite(fp) && std::isfinite(fm),
                       "grad_check: non-finite probe value for ", p.name, "[", i, "]");
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = g.data[size_t(i)];
            DUET_CHECK(std::isfinite(analytic), "grad_check: non-finite gradient for ", p.name,
                       "[", i, "]");
            const double denom =
                std::max({std::fabs(analytic), std::fabs(numeric), denom_eps});
            const double rel = std::fabs(analytic - numeric) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

} // namespace duet
