#pragma once

#include <cstring>

#include "duet/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace duet {

// Every kernel here accumulates each output element in a fixed (k-ascending)
// order, so results are bit-identical run to run regardless of thread count.

template <typename F>
void parallel_rows(int64_t n, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) body(i);
#else
    for (int64_t i = 0; i < n; ++i) body(i);
#endif
}

// C(M x N) = A(M x K) * B(K x N), optionally accumulating into C.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
    constexpr int64_t JB = 64;
    parallel_rows((m + 3) / 4, [&](int64_t blk) {
        const int64_t i0 = blk * 4;
        const int64_t ib = std::min<int64_t>(4, m - i0);
        for (int64_t j0 = 0; j0 < n; j0 += JB) {
            const int64_t jb = std::min(JB, n - j0);
            T acc[4][JB];
            for (int64_t r = 0; r < ib; ++r) {
                if (accumulate)
                    std::memcpy(acc[r], c + (i0 + r) * n + j0, size_t(jb) * sizeof(T));
                else
                    std::memset(acc[r], 0, size_t(jb) * sizeof(T));
            }
            for (int64_t kk = 0; kk < k; ++kk) {
                const T* bk = b + kk * n + j0;
                for (int64_t r = 0; r < ib; ++r) {
                    const T av = a[(i0 + r) * k + kk];
                    T* ar = acc[r];
                    for (int64_t j = 0; j < jb; ++j) ar[j] += av * bk[j];
                }
            }
            for (int64_t r = 0; r < ib; ++r)
                std::memcpy(c + (i0 + r) * n + j0, acc[r], size_t(jb) * sizeof(T));
        }
    });
}

// C(M x N) = A^T * B with A(K x M), B(K x N).
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t k, int64_t m, int64_t n, bool accumulate = false) {
    constexpr int64_t JB = 64;
    parallel_rows((m + 3) / 4, [&](int64_t blk) {
        const int64_t i0 = blk * 4;
        const int64_t ib = std::min<int64_t>(4, m - i0);
        for (int64_t j0 = 0; j0 < n; j0 += JB) {
            const int64_t jb = std::min(JB, n - j0);
            T acc[4][JB];
            for (int64_t r = 0; r < ib; ++r) {
                if (accumulate)
                    std::memcpy(acc[r], c + (i0 + r) * n + j0, size_t(jb) * sizeof(T));
                else
                    std::memset(acc[r], 0, size_t(jb) * sizeof(T));
            }
            for (int64_t kk = 0; kk < k; ++kk) {
                const T* bk = b + kk * n + j0;
                const T* ak = a + kk * m + i0;
                for (int64_t r = 0; r < ib; ++r) {
                    const T av = ak[r];
                    T* ar = acc[r];
                    for (int64_t j = 0; j < jb; ++j) ar[j] += av * bk[j];
                }
            }
            for (int64_t r = 0; r < ib; ++r)
                std::memcpy(c + (i0 + r) * n + j0, acc[r], size_t(jb) * sizeof(T));
        }
    });
}

// C(M x N) = A * B^T with A(M x K), B(N x K). Dot-product formulation.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
    parallel_rows(m, [&](int64_t i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T sum = 0;
            for (int64_t kk = 0; kk < k; ++kk) sum += ai[kk] * bj[kk];
            ci[j] = accumulate ? ci[j] + sum : sum;
        }
    });
}

template <typename T>
Tensor<T> matmul_nn(const Tensor<T>& a, const Tensor<T>& b) {
    DUET_CHECK(a.cols() == b.rows(), "matmul: inner dimensions disagree ", shape_str(a.shape),
               " vs ", shape_str(b.shape));
    Tensor<T> c({a.rows(), b.cols()});
    gemm_nn(a.data.data(), b.data.data(), c.data.data(), a.rows(), a.cols(), b.cols());
    return c;
}

} // namespace duet
