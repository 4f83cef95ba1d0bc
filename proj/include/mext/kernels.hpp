#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace mext::kernels {

// Raw loops behind the tape ops. Loop orders are chosen so gcc/clang
// auto-vectorize at -O3; the dot uses split accumulators because a single
// FP accumulator blocks vectorization under strict IEEE ordering.

template <typename T>
inline T dot(const T* __restrict__ a, const T* __restrict__ b, int64_t n) {
    T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
    T acc4 = 0, acc5 = 0, acc6 = 0, acc7 = 0;
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 += a[i + 0] * b[i + 0];
        acc1 += a[i + 1] * b[i + 1];
        acc2 += a[i + 2] * b[i + 2];
        acc3 += a[i + 3] * b[i + 3];
        acc4 += a[i + 4] * b[i + 4];
        acc5 += a[i + 5] * b[i + 5];
        acc6 += a[i + 6] * b[i + 6];
        acc7 += a[i + 7] * b[i + 7];
    }
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc0 + acc1) + (acc2 + acc3)) + ((acc4 + acc5) + (acc6 + acc7)) + tail;
}

// C[m,n] = A[m,k] * B[k,n]
template <typename T>
inline void matmul_nn(T* __restrict__ c, const T* __restrict__ a, const T* __restrict__ b,
                      int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        T* __restrict__ ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) ci[j] = 0;
        const T* __restrict__ ai = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const T al = ai[l];
            const T* __restrict__ bl = b + l * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += al * bl[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T   (rows of both operands are contiguous)
template <typename T>
inline void matmul_nt_acc(T* __restrict__ c, const T* __restrict__ a, const T* __restrict__ b,
                          int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* __restrict__ ai = a + i * n;
        T* __restrict__ ci = c + i * k;
        for (int64_t l = 0; l < k; ++l) ci[l] += dot(ai, b + l * n, n);
    }
}

// C[k,n] += A[m,k]^T * B[m,n]   (rank-1 accumulation per input row)
template <typename T>
inline void matmul_tn_acc(T* __restrict__ c, const T* __restrict__ a, const T* __restrict__ b,
                          int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* __restrict__ ai = a + i * k;
        const T* __restrict__ bi = b + i * n;
        for (int64_t l = 0; l < k; ++l) {
            const T al = ai[l];
            if (al == T(0)) continue;
            T* __restrict__ cl = c + l * n;
            for (int64_t j = 0; j < n; ++j) cl[j] += al * bi[j];
        }
    }
}

// in-place row softmax with max shift; rows that contain the mask value
// stay well-defined because the max is always >= any unmasked entry
template <typename T>
inline void softmax_row(T* __restrict__ x, int64_t n) {
    T m = x[0];
    for (int64_t j = 1; j < n; ++j) m = std::max(m, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < n; ++j) {
        x[j] = std::exp(x[j] - m);
        sum += x[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < n; ++j) x[j] *= inv;
}

template <typename T>
inline void softmax_rows(T* __restrict__ x, int64_t rows, int64_t n) {
    for (int64_t i = 0; i < rows; ++i) softmax_row(x + i * n, n);
}

// y = gelu(x), exact erf form
template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

// d gelu / dx = Phi(x) + x * phi(x)
template <typename T>
inline T gelu_grad(T x) {
    const T phi = T(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
    const T Phi = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    return Phi + x * phi;
}

}  // namespace mext::kernels
