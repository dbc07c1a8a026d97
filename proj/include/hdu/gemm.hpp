#pragma once

// Row-major GEMM kernels used by convolution, all accumulating into C. With
// HDU_HAVE_CBLAS they forward to a CBLAS library; the portable loops below are
// used otherwise. Both paths are deterministic for a fixed build.

#include <algorithm>
#include <cstddef>
#include <type_traits>
#include <vector>

#ifdef HDU_HAVE_CBLAS
#include <cblas.h>
#endif

namespace hdu::gemm {

namespace portable {

/// C[M x N] += A[M x K] * B[K x N]
template <class T>
void nn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
        std::size_t ldc) {
    constexpr std::size_t kBlockN = 512;
    constexpr std::size_t kBlockK = 128;
    for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
        const std::size_t jn = std::min(kBlockN, N - j0);
        for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
            const std::size_t kn = std::min(kBlockK, K - k0);
            for (std::size_t i = 0; i < M; ++i) {
                T* __restrict c = C + i * ldc + j0;
                const T* a = A + i * lda + k0;
                for (std::size_t k = 0; k < kn; ++k) {
                    const T av = a[k];
                    if (av == T(0)) continue;
                    const T* __restrict b = B + (k0 + k) * ldb + j0;
                    for (std::size_t j = 0; j < jn; ++j) c[j] += av * b[j];
                }
            }
        }
    }
}

/// C[K x N] (+)= A^T * B where A is [M x K] and B is [M x N].
template <class T>
void tn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
        std::size_t ldc, bool accumulate = true) {
    if (!accumulate)
        for (std::size_t k = 0; k < K; ++k) std::fill_n(C + k * ldc, N, T(0));
    for (std::size_t m = 0; m < M; ++m) {
        const T* a = A + m * lda;
        const T* __restrict b = B + m * ldb;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = a[k];
            if (av == T(0)) continue;
            T* __restrict c = C + k * ldc;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

/// C[M x K] += A[M x N] * B^T where B is [K x N]. Transposes B into scratch.
template <class T>
void nt(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
        std::size_t ldc, std::vector<T>& scratch) {
    scratch.resize(N * K);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < N; ++j) scratch[j * K + k] = B[k * ldb + j];
    nn(M, K, N, A, lda, scratch.data(), K, C, ldc);
}

}  // namespace portable

#ifdef HDU_HAVE_CBLAS

namespace detail {

template <class T>
void call(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t M, std::size_t N, std::size_t K, const T* A,
          std::size_t lda, const T* B, std::size_t ldb, T* C, std::size_t ldc, bool accumulate = true) {
    if (M == 0 || N == 0) return;
    if (K == 0) {
        if (!accumulate)
            for (std::size_t i = 0; i < M; ++i) std::fill_n(C + i * ldc, N, T(0));
        return;
    }
    const T beta = accumulate ? T(1) : T(0);
    if constexpr (std::is_same_v<T, float>)
        cblas_sgemm(CblasRowMajor, ta, tb, int(M), int(N), int(K), 1.0f, A, int(lda), B, int(ldb), beta, C, int(ldc));
    else
        cblas_dgemm(CblasRowMajor, ta, tb, int(M), int(N), int(K), 1.0, A, int(lda), B, int(ldb), beta, C, int(ldc));
}

}  // namespace detail

/// C[M x N] += A[M x K] * B[K x N]
template <class T>
void nn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
        std::size_t ldc) {
    detail::call(CblasNoTrans, CblasNoTrans, M, N, K, A, lda, B, ldb, C, ldc);
}

/// C[K x N] (+)= A^T * B where A is [M x K] and B is [M x N].
template <class T>
void tn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
        std::size_t ldc, bool accumulate = true) {
    detail::call(CblasTrans, CblasNoTrans, K, N, M, A, lda, B, ldb, C, ldc, accumulate);
}

/// C[M x K] += A[M x N] * B^T where B is [K x N].
template <class T>
void nt(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
        std::size_t ldc, std::vector<T>&) {
    detail::call(CblasNoTrans, CblasTrans, M, K, N, A, lda, B, ldb, C, ldc);
}

#else

using portable::nn;
using portable::nt;
using portable::tn;

#endif

}  // namespace hdu::gemm
