#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "duet/autodiff.hpp"
#include "duet/kernels.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
    check_same_shape(a.val(), b.val(), "add");
    Tensor<T> out = a.val();
    const T* bp = b.val().data.data();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[size_t(i)] += bp[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        accumulate_grad(a.ptr(), n.grad);
        accumulate_grad(b.ptr(), n.grad);
    });
}

template <typename T>
Value<T> sub(const Value<T>& a, const Value<T>& b) {
    check_same_shape(a.val(), b.val(), "sub");
    Tensor<T> out = a.val();
    const T* bp = b.val().data.data();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[size_t(i)] -= bp[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        accumulate_grad(a.ptr(), n.grad);
        if (b.defined() && b->requires_grad) {
            Tensor<T> g = n.grad;
            for (auto& v : g.data) v = -v;
            accumulate_grad(b.ptr(), g);
        }
    });
}

template <typename T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
    check_same_shape(a.val(), b.val(), "mul");
    Tensor<T> out = a.val();
    const T* bp = b.val().data.data();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[size_t(i)] *= bp[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a.defined() && a->requires_grad) {
            Tensor<T> g = n.grad;
            const T* other = b.val().data.data();
            for (int64_t i = 0; i < g.numel(); ++i) g.data[size_t(i)] *= other[i];
            accumulate_grad(a.ptr(), g);
        }
        if (b.defined() && b->requires_grad) {
            Tensor<T> g = n.grad;
            const T* other = a.val().data.data();
            for (int64_t i = 0; i < g.numel(); ++i) g.data[size_t(i)] *= other[i];
            accumulate_grad(b.ptr(), g);
        }
    });
}

template <typename T>
Value<T> scale(const Value<T>& a, double c) {
    Tensor<T> out = a.val();
    for (auto& v : out.data) v = T(double(v) * c);
    return make_op<T>(std::move(out), {a}, [a, c](Node<T>& n) {
        Tensor<T> g = n.grad;
        for (auto& v : g.data) v = T(double(v) * c);
        accumulate_grad(a.ptr(), g);
    });
}

// Multiply every element by a learnable 1-element value.
template <typename T>
Value<T> mul_scalar(const Value<T>& a, const Value<T>& s) {
    DUET_CHECK(s.val().numel() == 1, "mul_scalar: scale must be a single element, got ",
               shape_str(s.val().shape));
    const T sv = s.val().data[0];
    Tensor<T> out = a.val();
    for (auto& v : out.data) v *= sv;
    return make_op<T>(std::move(out), {a, s}, [a, s, sv](Node<T>& n) {
        if (a.defined() && a->requires_grad) {
            Tensor<T> g = n.grad;
            for (auto& v : g.data) v *= sv;
            accumulate_grad(a.ptr(), g);
        }
        if (s.defined() && s->requires_grad) {
            T acc = 0;
            const T* ap = a.val().data.data();
            const T* gp = n.grad.data.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) acc += ap[i] * gp[i];
            accumulate_grad(s.ptr(), Tensor<T>::scalar(acc));
        }
    });
}

// out[r, c] = a[r, c] + v[c]
template <typename T>
Value<T> add_rowvec(const Value<T>& a, const Value<T>& v) {
    DUET_CHECK(v.val().numel() == a.val().cols(), "add_rowvec: vector length ",
               v.val().numel(), " vs matrix ", shape_str(a.val().shape));
    Tensor<T> out = a.val();
    const int64_t rows = out.rows(), cols = out.cols();
    const T* vp = v.val().data.data();
    parallel_rows(rows, [&](int64_t r) {
        T* o = out.row(r);
        for (int64_t c = 0; c < cols; ++c) o[c] += vp[c];
    });
    return make_op<T>(std::move(out), {a, v}, [a, v](Node<T>& n) {
        accumulate_grad(a.ptr(), n.grad);
        if (v.defined() && v->requires_grad) {
            Tensor<T> g(v.val().shape);
            const int64_t rows = n.grad.rows(), cols = n.grad.cols();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = n.grad.row(r);
                for (int64_t c = 0; c < cols; ++c) g.data[size_t(c)] += gr[c];
            }
            accumulate_grad(v.ptr(), g);
        }
    });
}

template <typename T>
Value<T> gelu(const Value<T>& a) {
    Tensor<T> out = a.val();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (auto& v : out.data) v = T(0.5 * double(v) * (1.0 + std::erf(double(v) * inv_sqrt2)));
    return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        Tensor<T> g = n.grad;
        const T* xp = a.val().data.data();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double x = double(xp[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            g.data[size_t(i)] = T(double(g.data[size_t(i)]) * (cdf + x * pdf));
        }
        accumulate_grad(a.ptr(), g);
    });
}

// ---------------------------------------------------------------------------
// matrix products and layout
// ---------------------------------------------------------------------------

template <typename T>
Value<T> matmul(const Value<T>& a, const Value<T>& b) {
    DUET_CHECK(a.cols() == b.rows(), "matmul: inner dimensions disagree ",
               shape_str(a.val().shape), " vs ", shape_str(b.val().shape));
    Tensor<T> out({a.rows(), b.cols()});
    gemm_nn(a.val().data.data(), b.val().data.data(), out.data.data(), a.rows(), a.cols(),
            b.cols());
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        const int64_t m = a.rows(), k = a.cols(), c = b.cols();
        if (a.defined() && a->requires_grad) {
            Tensor<T> ga({m, k});
            gemm_nt(n.grad.data.data(), b.val().data.data(), ga.data.data(), m, c, k);
            accumulate_grad(a.ptr(), ga);
        }
        if (b.defined() && b->requires_grad) {
            Tensor<T> gb({k, c});
            gemm_tn(a.val().data.data(), n.grad.data.data(), gb.data.data(), m, k, c);
            accumulate_grad(b.ptr(), gb);
        }
    });
}

// out = a * b^T, with a (M x K) and b (N x K).
template <typename T>
Value<T> matmul_nt(const Value<T>& a, const Value<T>& b) {
    DUET_CHECK(a.cols() == b.cols(), "matmul_nt: inner dimensions disagree ",
               shape_str(a.val().shape), " vs ", shape_str(b.val().shape));
    Tensor<T> out({a.rows(), b.rows()});
    gemm_nt(a.val().data.data(), b.val().data.data(), out.data.data(), a.rows(), a.cols(),
            b.rows());
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        const int64_t m = a.rows(), k = a.cols(), c = b.rows();
        if (a.defined() && a->requires_grad) {
            Tensor<T> ga({m, k});
            gemm_nn(n.grad.data.data(), b.val().data.data(), ga.data.data(), m, c, k);
            accumulate_grad(a.ptr(), ga);
        }
        if (b.defined() && b->requires_grad) {
            Tensor<T> gb({c, k});
            gemm_tn(n.grad.data.data(), a.val().data.data(), gb.data.data(), m, c, k);
            accumulate_grad(b.ptr(), gb);
        }
    });
}

template <typename T>
Value<T> transpose(const Value<T>& a) {
    const int64_t r = a.rows(), c = a.cols();
    Tensor<T> out({c, r});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out.at(j, i) = a.val().at(i, j);
    return make_op<T>(std::move(out), {a}, [a, r, c](Node<T>& n) {
        Tensor<T> g({r, c});
        for (int64_t j = 0; j < c; ++j)
            for (int64_t i = 0; i < r; ++i) g.at(i, j) = n.grad.at(j, i);
        accumulate_grad(a.ptr(), g);
    });
}

template <typename T>
Value<T> reshape(const Value<T>& a, Shape shape) {
    Tensor<T> out = a.val().reshaped(std::move(shape));
    return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        accumulate_grad(a.ptr(), n.grad.reshaped(a.val().shape));
    });
}

template <typename T>
Value<T> concat_cols(const Value<T>& a, const Value<T>& b) {
    DUET_CHECK(a.rows() == b.rows(), "concat_cols: row counts disagree ",
               shape_str(a.val().shape), " vs ", shape_str(b.val().shape));
    const int64_t r = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor<T> out({r, ca + cb});
    for (int64_t i = 0; i < r; ++i) {
        std::memcpy(out.row(i), a.val().row(i), size_t(ca) * sizeof(T));
        std::memcpy(out.row(i) + ca, b.val().row(i), size_t(cb) * sizeof(T));
    }
    return make_op<T>(std::move(out), {a, b}, [a, b, r, ca, cb](Node<T>& n) {
        if (a.defined() && a->requires_grad) {
            Tensor<T> g({r, ca});
            for (int64_t i = 0; i < r; ++i)
                std::memcpy(g.row(i), n.grad.row(i), size_t(ca) * sizeof(T));
            accumulate_grad(a.ptr(), g);
        }
        if (b.defined() && b->requires_grad) {
            Tensor<T> g({r, cb});
            for (int64_t i = 0; i < r; ++i)
                std::memcpy(g.row(i), n.grad.row(i) + ca, size_t(cb) * sizeof(T));
            accumulate_grad(b.ptr(), g);
        }
    });
}

template <typename T>
Value<T> concat_rows(const Value<T>& a, const Value<T>& b) {
    DUET_CHECK(a.cols() == b.cols(), "concat_rows: column counts disagree ",
               shape_str(a.val().shape), " vs ", shape_str(b.val().shape));
    const int64_t ra = a.rows(), rb = b.rows(), c = a.cols();
    Tensor<T> out({ra + rb, c});
    std::memcpy(out.data.data(), a.val().data.data(), size_t(ra * c) * sizeof(T));
    std::memcpy(out.data.data() + ra * c, b.val().data.data(), size_t(rb * c) * sizeof(T));
    return make_op<T>(std::move(out), {a, b}, [a, b, ra, rb, c](Node<T>& n) {
        if (a.defined() && a->requires_grad) {
            Tensor<T> g({ra, c});
            std::memcpy(g.data.data(), n.grad.data.data(), size_t(ra * c) * sizeof(T));
            accumulate_grad(a.ptr(), g);
        }
        if (b.defined() && b->requires_grad) {
            Tensor<T> g({rb, c});
            std::memcpy(g.data.data(), n.grad.data.data() + ra * c, size_t(rb * c) * sizeof(T));
            accumulate_grad(b.ptr(), g);
        }
    });
}

// ---------------------------------------------------------------------------
// indexed access
// ---------------------------------------------------------------------------

template <typename T>
Value<T> gather_rows(const Value<T>& a, std::vector<int64_t> idx) {
    const int64_t c = a.cols(), r = a.rows();
    for (int64_t i : idx)
        DUET_CHECK(i >= 0 && i < r, "gather_rows: index ", i, " out of range [0, ", r, ")");
    Tensor<T> out({int64_t(idx.size()), c});
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(out.row(int64_t(i)), a.val().row(idx[i]), size_t(c) * sizeof(T));
    return make_op<T>(std::move(out), {a}, [a, idx = std::move(idx), c](Node<T>& n) {
        Tensor<T> g(a.val().shape);
        for (size_t i = 0; i < idx.size(); ++i) {
            const T* src = n.grad.row(int64_t(i));
            T* dst = g.row(idx[i]);
            for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        accumulate_grad(a.ptr(), g);
    });
}

template <typename T>
Value<T> slice_rows(const Value<T>& a, int64_t start, int64_t count) {
    DUET_CHECK(start >= 0 && start + count <= a.rows(), "slice_rows: range [", start, ", ",
               start + count, ") exceeds ", a.rows(), " rows");
    const int64_t c = a.cols();
    Tensor<T> out({count, c});
    std::memcpy(out.data.data(), a.val().row(start), size_t(count * c) * sizeof(T));
    return make_op<T>(std::move(out), {a}, [a, start, count, c](Node<T>& n) {
        Tensor<T> g(a.val().shape);
        std::memcpy(g.row(start), n.grad.data.data(), size_t(count * c) * sizeof(T));
        accumulate_grad(a.ptr(), g);
    });
}

// Scatter: rows listed in idx are replaced by copies of a single learned row
// vector; all other rows pass through. Backward routes the grads of replaced
// rows to the vector and the rest to the base matrix.
template <typename T>
Value<T> replace_rows_with_vector(const Value<T>& a, std::vector<int64_t> idx,
                                  const Value<T>& vec) {
    DUET_CHECK(vec.val().numel() == a.cols(), "replace_rows: vector length ", vec.val().numel(),
               " vs matrix ", shape_str(a.val().shape));
    const int64_t c = a.cols(), r = a.rows();
    std::vector<char> hit(size_t(r), 0);
    for (int64_t i : idx) {
        DUET_CHECK(i >= 0 && i < r, "replace_rows: index ", i, " out of range [0, ", r, ")");
        DUET_CHECK(!hit[size_t(i)], "replace_rows: duplicate index ", i);
        hit[size_t(i)] = 1;
    }
    Tensor<T> out = a.val();
    for (int64_t i : idx) std::memcpy(out.row(i), vec.val().data.data(), size_t(c) * sizeof(T));
    return make_op<T>(std::move(out), {a, vec},
                      [a, vec, idx = std::move(idx), hit = std::move(hit), c](Node<T>& n) {
        if (a.defined() && a->requires_grad) {
            Tensor<T> g = n.grad;
            for (int64_t i : idx) std::memset(g.row(i), 0, size_t(c) * sizeof(T));
            accumulate_grad(a.ptr(), g);
        }
        if (vec.defined() && vec->requires_grad) {
            Tensor<T> g(vec.val().shape);
            for (int64_t i : idx) {
                const T* src = n.grad.row(i);
                for (int64_t j = 0; j < c; ++j) g.data[size_t(j)] += src[j];
            }
            accumulate_grad(vec.ptr(), g);
        }
    });
}

// Per-image layout change: prepend two class-token rows to each image's
// patch rows. patches is (B*N) x C; output is (B*(N+2)) x C.
template <typename T>
Value<T> prepend_tokens(const Value<T>& patches, const Value<T>& cls0, const Value<T>& cls1,
                        int64_t batch) {
    const int64_t c = patches.cols();
    DUET_CHECK(cls0.val().numel() == c && cls1.val().numel() == c,
               "prepend_tokens: class token length vs ", c, " columns");
    DUET_CHECK(patches.rows() % batch == 0, "prepend_tokens: ", patches.rows(),
               " rows not divisible by batch ", batch);
    const int64_t n = patches.rows() / batch;
    const int64_t t = n + 2;
    Tensor<T> out({batch * t, c});
    for (int64_t b = 0; b < batch; ++b) {
        std::memcpy(out.row(b * t), cls0.val().data.data(), size_t(c) * sizeof(T));
        std::memcpy(out.row(b * t + 1), cls1.val().data.data(), size_t(c) * sizeof(T));
        std::memcpy(out.row(b * t + 2), patches.val().row(b * n), size_t(n * c) * sizeof(T));
    }
    return make_op<T>(std::move(out), {patches, cls0, cls1},
                      [patches, cls0, cls1, batch, n, t, c](Node<T>& nd) {
        if (patches.defined() && patches->requires_grad) {
            Tensor<T> g({batch * n, c});
            for (int64_t b = 0; b < batch; ++b)
                std::memcpy(g.row(b * n), nd.grad.row(b * t + 2), size_t(n * c) * sizeof(T));
            accumulate_grad(patches.ptr(), g);
        }
        for (int64_t which = 0; which < 2; ++which) {
            const auto& tok = which == 0 ? cls0 : cls1;
            if (!tok.defined() || !tok->requires_grad) continue;
            Tensor<T> g(tok.val().shape);
            for (int64_t b = 0; b < batch; ++b) {
                const T* src = nd.grad.row(b * t + which);
                for (int64_t j = 0; j < c; ++j) g.data[size_t(j)] += src[j];
            }
            accumulate_grad(tok.ptr(), g);
        }
    });
}

// out[b*n + i, :] = a[b*n + i, :] + tile[i, :] for every block b.
template <typename T>
Value<T> add_tiled(const Value<T>& a, const Value<T>& tile) {
    const int64_t n = tile.rows(), c = tile.cols();
    DUET_CHECK(a.cols() == c && a.rows() % n == 0, "add_tiled: ", shape_str(a.val().shape),
               " is not a row-tiling of ", shape_str(tile.val().shape));
    const int64_t blocks = a.rows() / n;
    Tensor<T> out = a.val();
    parallel_rows(a.rows(), [&](int64_t r) {
        const T* t = tile.val().row(r % n);
        T* o = out.row(r);
        for (int64_t j = 0; j < c; ++j) o[j] += t[j];
    });
    return make_op<T>(std::move(out), {a, tile}, [a, tile, blocks, n, c](Node<T>& nd) {
        accumulate_grad(a.ptr(), nd.grad);
        if (tile.defined() && tile->requires_grad) {
            Tensor<T> g(tile.val().shape);
            for (int64_t b = 0; b < blocks; ++b)
                for (int64_t i = 0; i < n; ++i) {
                    const T* src = nd.grad.row(b * n + i);
                    T* dst = g.row(i);
                    for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
            accumulate_grad(tile.ptr(), g);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

template <typename T>
Value<T> sum_all(const Value<T>& a) {
    T acc = 0;
    for (T v : a.val().data) acc += v;
    return make_op<T>(Tensor<T>::scalar(acc), {a}, [a](Node<T>& n) {
        const T g = n.grad.data[0];
        Tensor<T> ga(a.val().shape, g);
        accumulate_grad(a.ptr(), ga);
    });
}

template <typename T>
Value<T> mean_all(const Value<T>& a) {
    const int64_t n = a.val().numel();
    T acc = 0;
    for (T v : a.val().data) acc += v;
    acc = T(double(acc) / double(n));
    return make_op<T>(Tensor<T>::scalar(acc), {a}, [a, n](Node<T>& nd) {
        const T g = T(double(nd.grad.data[0]) / double(n));
        Tensor<T> ga(a.val().shape, g);
        accumulate_grad(a.ptr(), ga);
    });
}

template <typename T>
Value<T> row_sums(const Value<T>& a) {
    const int64_t r = a.rows(), c = a.cols();
    Tensor<T> out({r, 1});
    for (int64_t i = 0; i < r; ++i) {
        const T* ai = a.val().row(i);
        T acc = 0;
        for (int64_t j = 0; j < c; ++j) acc += ai[j];
        out.data[size_t(i)] = acc;
    }
    return make_op<T>(std::move(out), {a}, [a, r, c](Node<T>& n) {
        Tensor<T> g(a.val().shape);
        for (int64_t i = 0; i < r; ++i) {
            const T gi = n.grad.data[size_t(i)];
            T* gr = g.row(i);
            for (int64_t j = 0; j < c; ++j) gr[j] = gi;
        }
        accumulate_grad(a.ptr(), g);
    });
}

// Row r multiplied by the fixed weight w[r]; used for per-row loss weighting.
template <typename T>
Value<T> scale_rows(const Value<T>& a, std::vector<T> w) {
    DUET_CHECK(int64_t(w.size()) == a.rows(), "scale_rows: ", w.size(), " weights vs ",
               a.rows(), " rows");
    const int64_t c = a.cols();
    Tensor<T> out = a.val();
    for (int64_t i = 0; i < a.rows(); ++i) {
        T* o = out.row(i);
        for (int64_t j = 0; j < c; ++j) o[j] *= w[size_t(i)];
    }
    return make_op<T>(std::move(out), {a}, [a, w = std::move(w), c](Node<T>& n) {
        Tensor<T> g = n.grad;
        for (int64_t i = 0; i < g.rows(); ++i) {
            T* gr = g.row(i);
            for (int64_t j = 0; j < c; ++j) gr[j] *= w[size_t(i)];
        }
        accumulate_grad(a.ptr(), g);
    });
}

template <typename T>
Value<T> softmax_rows(const Value<T>& a) {
    const int64_t r = a.rows(), c = a.cols();
    Tensor<T> out = a.val();
    parallel_rows(r, [&](int64_t i) {
        T* o = out.row(i);
        T mx = o[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, o[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) {
            o[j] = std::exp(o[j] - mx);
            sum += o[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < c; ++j) o[j] *= inv;
    });
    return make_op<T>(std::move(out), {a}, [a, r, c](Node<T>& n) {
        Tensor<T> g = n.grad;
        parallel_rows(r, [&](int64_t i) {
            const T* p = n.value.row(i);
            T* gr = g.row(i);
            T dot = 0;
            for (int64_t j = 0; j < c; ++j) dot += gr[j] * p[j];
            for (int64_t j = 0; j < c; ++j) gr[j] = p[j] * (gr[j] - dot);
        });
        accumulate_grad(a.ptr(), g);
    });
}

template <typename T>
Value<T> log_softmax_rows(const Value<T>& a) {
    const int64_t r = a.rows(), c = a.cols();
    Tensor<T> out = a.val();
    parallel_rows(r, [&](int64_t i) {
        T* o = out.row(i);
        T mx = o[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, o[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(o[j] - mx);
        const T lse = mx + std::log(sum);
        for (int64_t j = 0; j < c; ++j) o[j] -= lse;
    });
    return make_op<T>(std::move(out), {a}, [a, r, c](Node<T>& n) {
        Tensor<T> g = n.grad;
        parallel_rows(r, [&](int64_t i) {
            const T* lp = n.value.row(i);
            T* gr = g.row(i);
            T gsum = 0;
            for (int64_t j = 0; j < c; ++j) gsum += gr[j];
            for (int64_t j = 0; j < c; ++j) gr[j] -= std::exp(lp[j]) * gsum;
        });
        accumulate_grad(a.ptr(), g);
    });
}

// Mean over rows of -log softmax(row)[target[row]].
template <typename T>
Value<T> cross_entropy_rows(const Value<T>& logits, std::vector<int64_t> targets) {
    const int64_t r = logits.rows(), c = logits.cols();
    DUET_CHECK(int64_t(targets.size()) == r, "cross_entropy: ", targets.size(),
               " targets vs ", r, " rows");
    for (int64_t t : targets)
        DUET_CHECK(t >= 0 && t < c, "cross_entropy: target ", t, " out of range [0, ", c, ")");
    Tensor<T> probs = logits.val();
    T loss = 0;
    for (int64_t i = 0; i < r; ++i) {
        T* p = probs.row(i);
        T mx = p[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < c; ++j) p[j] *= inv;
        loss -= std::log(p[targets[size_t(i)]]);
    }
    loss = T(double(loss) / double(r));
    return make_op<T>(Tensor<T>::scalar(loss), {logits},
                      [logits, targets = std::move(targets), probs = std::move(probs), r,
                       c](Node<T>& n) {
        const T g = n.grad.data[0];
        Tensor<T> gl = probs;
        const T invr = T(1.0 / double(r));
        for (int64_t i = 0; i < r; ++i) {
            T* row = gl.row(i);
            row[targets[size_t(i)]] -= T(1);
            for (int64_t j = 0; j < c; ++j) row[j] *= g * invr;
        }
        accumulate_grad(logits.ptr(), gl);
    });
}

template <typename T>
Value<T> layer_norm_rows(const Value<T>& a, const Value<T>& gamma, const Value<T>& beta,
                         double eps = 1e-5) {
    const int64_t r = a.rows(), c = a.cols();
    DUET_CHECK(gamma.val().numel() == c && beta.val().numel() == c,
               "layer_norm: scale/shift length vs ", c, " columns");
    Tensor<T> out({r, c});
    Tensor<T> xhat({r, c});
    Tensor<T> inv_std({r, 1});
    const T* gm = gamma.val().data.data();
    const T* bt = beta.val().data.data();
    parallel_rows(r, [&](int64_t i) {
        const T* x = a.val().row(i);
        T mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += x[j];
        mean /= T(c);
        T var = 0;
        for (int64_t j = 0; j < c; ++j) {
            const T d = x[j] - mean;
            var += d * d;
        }
        var /= T(c);
        const T is = T(1) / std::sqrt(var + T(eps));
        inv_std.data[size_t(i)] = is;
        T* xh = xhat.row(i);
        T* o = out.row(i);
        for (int64_t j = 0; j < c; ++j) {
            xh[j] = (x[j] - mean) * is;
            o[j] = xh[j] * gm[j] + bt[j];
        }
    });
    return make_op<T>(std::move(out), {a, gamma, beta},
                      [a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
                       c](Node<T>& n) {
        if (gamma.defined() && gamma->requires_grad) {
            Tensor<T> gg(gamma.val().shape);
            for (int64_t i = 0; i < r; ++i) {
                const T* gr = n.grad.row(i);
                const T* xh = xhat.row(i);
                for (int64_t j = 0; j < c; ++j) gg.data[size_t(j)] += gr[j] * xh[j];
            }
            accumulate_grad(gamma.ptr(), gg);
        }
        if (beta.defined() && beta->requires_grad) {
            Tensor<T> gb(beta.val().shape);
            for (int64_t i = 0; i < r; ++i) {
                const T* gr = n.grad.row(i);
                for (int64_t j = 0; j < c; ++j) gb.data[size_t(j)] += gr[j];
            }
            accumulate_grad(beta.ptr(), gb);
        }
        if (a.defined() && a->requires_grad) {
            Tensor<T> ga({r, c});
            const T* gm = gamma.val().data.data();
            parallel_rows(r, [&](int64_t i) {
                const T* gr = n.grad.row(i);
                const T* xh = xhat.row(i);
                const T is = inv_std.data[size_t(i)];
                T mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (int64_t j = 0; j < c; ++j) {
                    const T dxh = gr[j] * gm[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh[j];
                }
                mean_dxhat /= T(c);
                mean_dxhat_xhat /= T(c);
                T* g = ga.row(i);
                for (int64_t j = 0; j < c; ++j) {
                    const T dxh = gr[j] * gm[j];
                    g[j] = is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                }
            });
            accumulate_grad(a.ptr(), ga);
        }
    });
}

template <typename T>
Value<T> l2_normalize_rows(const Value<T>& a, double eps = 1e-12) {
    const int64_t r = a.rows(), c = a.cols();
    Tensor<T> out = a.val();
    Tensor<T> inv_norm({r, 1});
    parallel_rows(r, [&](int64_t i) {
        T* o = out.row(i);
        T sq = 0;
        for (int64_t j = 0; j < c; ++j) sq += o[j] * o[j];
        const T norm = std::max(std::sqrt(sq), T(eps));
        const T inv = T(1) / norm;
        inv_norm.data[size_t(i)] = inv;
        for (int64_t j = 0; j < c; ++j) o[j] *= inv;
    });
    return make_op<T>(std::move(out), {a},
                      [a, inv_norm = std::move(inv_norm), r, c](Node<T>& n) {
        Tensor<T> g({r, c});
        parallel_rows(r, [&](int64_t i) {
            const T* y = n.value.row(i);
            const T* gr = n.grad.row(i);
            const T inv = inv_norm.data[size_t(i)];
            T dot = 0;
            for (int64_t j = 0; j < c; ++j) dot += gr[j] * y[j];
            T* go = g.row(i);
            for (int64_t j = 0; j < c; ++j) go[j] = (gr[j] - y[j] * dot) * inv;
        });
        accumulate_grad(a.ptr(), g);
    });
}

// Identity forward, zero backward.
template <typename T>
Value<T> stop_gradient(const Value<T>& a) {
    return Value<T>::constant(a.val());
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// Optional capture of final-layer attention rows for the first two query
// positions (the class tokens), averaged over heads. Rows span all keys.
template <typename T>
struct AttentionCapture {
    Tensor<T> rows; // (batch * 2) x seq
};

// Fused multi-head self-attention over a (batch*seq) x 3*width qkv matrix.
// When valid_lens is given, keys at positions >= valid_lens[b] are excluded
// from every softmax (queries at padded positions produce unused rows).
template <typename T>
Value<T> self_attention(const Value<T>& qkv, int64_t batch, int64_t seq, int64_t heads,
                        const std::vector<int>* valid_lens = nullptr,
                        AttentionCapture<T>* capture = nullptr) {
    const int64_t w3 = qkv.cols();
    DUET_CHECK(w3 % 3 == 0, "attention: qkv width ", w3, " not divisible by 3");
    const int64_t width = w3 / 3;
    DUET_CHECK(width % heads == 0, "attention: width ", width, " vs ", heads, " heads");
    DUET_CHECK(qkv.rows() == batch * seq, "attention: ", qkv.rows(), " rows vs batch ", batch,
               " x seq ", seq);
    if (valid_lens)
        DUET_CHECK(int64_t(valid_lens->size()) == batch, "attention: ", valid_lens->size(),
                   " lengths vs batch ", batch);
    const int64_t dh = width / heads;
    const T scale = T(1.0 / std::sqrt(double(dh)));

    Tensor<T> out({batch * seq, width});
    // Softmax rows kept for backward: (batch*heads*seq) x seq.
    auto probs = std::make_shared<Tensor<T>>(Shape{batch * heads * seq, seq});
    const T* q_base = qkv.val().data.data();

    parallel_rows(batch * heads, [&](int64_t bh) {
        const int64_t b = bh / heads, h = bh % heads;
        const int64_t len = valid_lens ? (*valid_lens)[size_t(b)] : seq;
        const int64_t row0 = b * seq;
        for (int64_t t = 0; t < seq; ++t) {
            const T* qrow = q_base + (row0 + t) * w3 + h * dh;
            T* prow = probs->row((bh)*seq + t);
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t u = 0; u < len; ++u) {
                const T* krow = q_base + (row0 + u) * w3 + width + h * dh;
                T dot = 0;
                for (int64_t d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
                prow[u] = dot * scale;
                mx = std::max(mx, prow[u]);
            }
            T sum = 0;
            for (int64_t u = 0; u < len; ++u) {
                prow[u] = std::exp(prow[u] - mx);
                sum += prow[u];
            }
            const T inv = T(1) / sum;
            for (int64_t u = 0; u < len; ++u) prow[u] *= inv;
            for (int64_t u = len; u < seq; ++u) prow[u] = 0;
            T* orow = out.row(row0 + t) + h * dh;
            for (int64_t d = 0; d < dh; ++d) orow[d] = 0;
            for (int64_t u = 0; u < len; ++u) {
                const T p = prow[u];
                const T* vrow = q_base + (row0 + u) * w3 + 2 * width + h * dh;
                for (int64_t d = 0; d < dh; ++d) orow[d] += p * vrow[d];
            }
        }
    });

    if (capture) {
        capture->rows = Tensor<T>({batch * 2, seq});
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t t = 0; t < 2 && t < seq; ++t) {
                T* dst = capture->rows.row(b * 2 + t);
                for (int64_t h = 0; h < heads; ++h) {
                    const T* prow = probs->row((b * heads + h) * seq + t);
                    for (int64_t u = 0; u < seq; ++u) dst[u] += prow[u];
                }
                const T inv = T(1) / T(heads);
                for (int64_t u = 0; u < seq; ++u) dst[u] *= inv;
            }
    }

    std::vector<int> lens_copy;
    if (valid_lens) lens_copy = *valid_lens;
    return make_op<T>(std::move(out), {qkv},
                      [qkv, probs, batch, seq, heads, dh, width, w3, scale,
                       lens_copy = std::move(lens_copy)](Node<T>& n) {
        Tensor<T> gqkv({batch * seq, w3});
        const T* q_base = qkv.val().data.data();
        const bool has_lens = !lens_copy.empty();
        parallel_rows(batch * heads, [&](int64_t bh) {
            const int64_t b = bh / heads, h = bh % heads;
            const int64_t len = has_lens ? lens_copy[size_t(b)] : seq;
            const int64_t row0 = b * seq;
            std::vector<T> dp(static_cast<size_t>(len));
            for (int64_t t = 0; t < seq; ++t) {
                const T* go = n.grad.row(row0 + t) + h * dh;
                const T* prow = probs->row(bh * seq + t);
                // dV[u] += p[u] * go ; dp[u] = go . V[u]
                T pdot = 0;
                for (int64_t u = 0; u < len; ++u) {
                    const T* vrow = q_base + (row0 + u) * w3 + 2 * width + h * dh;
                    T dot = 0;
                    for (int64_t d = 0; d < dh; ++d) dot += go[d] * vrow[d];
                    dp[size_t(u)] = dot;
                    pdot += dot * prow[u];
                    T* gv = gqkv.row(row0 + u) + 2 * width + h * dh;
                    const T p = prow[u];
                    for (int64_t d = 0; d < dh; ++d) gv[d] += p * go[d];
                }
                // dS[u] = p[u] * (dp[u] - sum_u' dp p) ; dQ += dS[u] K[u] ; dK[u] += dS[u] Q
                const T* qrow = q_base + (row0 + t) * w3 + h * dh;
                T* gq = gqkv.row(row0 + t) + h * dh;
                for (int64_t u = 0; u < len; ++u) {
                    const T ds = prow[u] * (dp[size_t(u)] - pdot) * scale;
                    const T* krow = q_base + (row0 + u) * w3 + width + h * dh;
                    T* gk = gqkv.row(row0 + u) + width + h * dh;
                    for (int64_t d = 0; d < dh; ++d) {
                        gq[d] += ds * krow[d];
                        gk[d] += ds * qrow[d];
                    }
                }
            }
        });
        accumulate_grad(qkv.ptr(), gqkv);
    });
}

// ---------------------------------------------------------------------------
// grid interpolation (positional embeddings for smaller crops)
// ---------------------------------------------------------------------------

// Treat rows of `pos` as a g_from x g_from grid of vectors and bilinearly
// resample to g_to x g_to. Linear in pos, so backward applies the transpose.
template <typename T>
Value<T> interp_grid(const Value<T>& pos, int64_t g_from, int64_t g_to) {
    DUET_CHECK(pos.rows() == g_from * g_from, "interp_grid: ", pos.rows(),
               " rows vs grid side ", g_from);
    if (g_from == g_to) return pos;
    const int64_t c = pos.cols();
    struct Tap {
        int64_t src;
        T w;
    };
    std::vector<std::array<Tap, 4>> taps(size_t(g_to * g_to));
    for (int64_t y = 0; y < g_to; ++y) {
        for (int64_t x = 0; x < g_to; ++x) {
            // Align patch centers between the two grids.
            const double fy = (double(y) + 0.5) * double(g_from) / double(g_to) - 0.5;
            const double fx = (double(x) + 0.5) * double(g_from) / double(g_to) - 0.5;
            const int64_t y0 = std::clamp<int64_t>(int64_t(std::floor(fy)), 0, g_from - 1);
            const int64_t x0 = std::clamp<int64_t>(int64_t(std::floor(fx)), 0, g_from - 1);
            const int64_t y1 = std::min(y0 + 1, g_from - 1);
            const int64_t x1 = std::min(x0 + 1, g_from - 1);
            const double wy = std::clamp(fy - double(y0), 0.0, 1.0);
            const double wx = std::clamp(fx - double(x0), 0.0, 1.0);
            taps[size_t(y * g_to + x)] = {
                Tap{y0 * g_from + x0, T((1 - wy) * (1 - wx))},
                Tap{y0 * g_from + x1, T((1 - wy) * wx)},
                Tap{y1 * g_from + x0, T(wy * (1 - wx))},
                Tap{y1 * g_from + x1, T(wy * wx)},
            };
        }
    }
    Tensor<T> out({g_to * g_to, c});
    for (int64_t i = 0; i < g_to * g_to; ++i) {
        T* o = out.row(i);
        for (const auto& tap : taps[size_t(i)]) {
            const T* src = pos.val().row(tap.src);
            for (int64_t j = 0; j < c; ++j) o[j] += tap.w * src[j];
        }
    }
    return make_op<T>(std::move(out), {pos}, [pos, taps = std::move(taps), c](Node<T>& n) {
        Tensor<T> g(pos.val().shape);
        for (int64_t i = 0; i < n.grad.rows(); ++i) {
            const T* gr = n.grad.row(i);
            for (const auto& tap : taps[size_t(i)]) {
                T* dst = g.row(tap.src);
                for (int64_t j = 0; j < c; ++j) dst[j] += tap.w * gr[j];
            }
        }
        accumulate_grad(pos.ptr(), g);
    });
}

} // namespace duet
