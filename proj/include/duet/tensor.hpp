#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "duet/common.hpp"
#include "duet/rng.hpp"

namespace duet {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        DUET_CHECK(d > 0, "tensor: non-positive dimension in shape ", shape_str(s));
        n *= d;
    }
    return n;
}

// Dense row-major array. Most operations treat it as a 2-D matrix whose
// column count is the last shape entry; higher dimensions are bookkeeping.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(size_t(shape_numel(shape)), fill);
    }

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        DUET_CHECK(int64_t(data.size()) == shape_numel(shape),
                   "tensor: ", data.size(), " values do not fill shape ", shape_str(shape));
    }

    int64_t numel() const { return int64_t(data.size()); }
    int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
    int64_t rows() const { return shape.empty() ? 1 : numel() / cols(); }

    T* row(int64_t r) { return data.data() + r * cols(); }
    const T* row(int64_t r) const { return data.data() + r * cols(); }

    T& at(int64_t r, int64_t c) { return data[size_t(r * cols() + c)]; }
    const T& at(int64_t r, int64_t c) const { return data[size_t(r * cols() + c)]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    Tensor reshaped(Shape s) const {
        DUET_CHECK(shape_numel(s) == numel(), "tensor: cannot reshape ", shape_str(shape),
                   " with ", numel(), " elements to ", shape_str(s));
        Tensor out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
        Tensor out(std::move(s));
        for (auto& x : out.data) x = T(rng.normal(0.0, stddev));
        return out;
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(double(v))) return false;
    return true;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    DUET_CHECK(a.shape == b.shape, op, ": shape mismatch ", shape_str(a.shape), " vs ",
               shape_str(b.shape));
}

} // namespace duet
