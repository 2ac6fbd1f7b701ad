#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "duet/ops.hpp"
#include "duet/rng.hpp"

namespace testutil {

inline duet::Tensor<double> rand_tensor(duet::Shape shape, duet::Rng& rng, double scale = 1.0) {
    duet::Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

// Project a tensor-valued op output to a scalar with a fixed random weighting
// so the gradient check exercises every output element.
inline duet::Value<double> scalarize(const duet::Value<double>& v, duet::Rng& rng) {
    duet::Tensor<double> w(v.val().shape);
    for (auto& x : w.data) x = rng.normal(0.0, 1.0);
    return duet::sum_all(duet::mul(v, duet::Value<double>::constant(std::move(w))));
}

// Regularized upper incomplete gamma Q(a, x), for chi-square p-values.
inline double gammaq(double a, double x) {
    if (x < 0.0 || a <= 0.0) return std::nan("");
    auto gln = std::lgamma(a);
    if (x < a + 1.0) {
        // series for P(a,x)
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
        }
        const double p = sum * std::exp(-x + a * std::log(x) - gln);
        return 1.0 - p;
    }
    // continued fraction for Q(a,x) (modified Lentz)
    const double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        const double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - gln) * h;
}

inline double chi2_pvalue(double stat, int dof) { return gammaq(double(dof) / 2.0, stat / 2.0); }

// Scratch directory unique to a test, cleaned up on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("duet_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
};

inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
uint64_t hash_tensor(const duet::Tensor<T>& t, uint64_t h = 1469598103934665603ull) {
    h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
    return fnv1a(t.data.data(), t.data.size() * sizeof(T), h);
}

} // namespace testutil
