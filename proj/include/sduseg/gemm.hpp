#pragma once

#include <algorithm>
#include <cstdlib>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#define SDUSEG_SIMD _Pragma("omp simd")
#else
#define SDUSEG_SIMD
#endif

namespace sduseg {

// Kernel-internal parallelism cap. Kernels partition output disjointly and
// keep every reduction in a fixed order, so results are bit-identical for any
// thread count.
inline int kernel_threads() {
  static const int cap = [] {
    int hw = 1;
#ifdef _OPENMP
    hw = omp_get_max_threads();
#endif
    if (const char* env = std::getenv("SDU_SEG_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return std::min(v, hw);
    }
    return hw;
  }();
  return cap;
}

namespace detail {

// Register-tiled panel: C[mr x NR] += A[mr x K] * B[K x NR].
template <typename T, int MR, int NR>
inline void gemm_micro(int K, const T* a, int lda, const T* b, int ldb, T* c, int ldc, int mr) {
  T acc[MR][NR] = {};
  for (int k = 0; k < K; ++k) {
    const T* brow = b + static_cast<std::size_t>(k) * ldb;
    for (int r = 0; r < mr; ++r) {
      const T av = a[static_cast<std::size_t>(r) * lda + k];
      SDUSEG_SIMD
      for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < mr; ++r) {
    T* crow = c + static_cast<std::size_t>(r) * ldc;
    SDUSEG_SIMD
    for (int j = 0; j < NR; ++j) crow[j] += acc[r][j];
  }
}

// Remainder columns, any width < NR.
template <typename T, int MR>
inline void gemm_edge(int K, int nw, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                      int mr) {
  for (int r = 0; r < mr; ++r) {
    T* crow = c + static_cast<std::size_t>(r) * ldc;
    const T* arow = a + static_cast<std::size_t>(r) * lda;
    for (int k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + static_cast<std::size_t>(k) * ldb;
      SDUSEG_SIMD
      for (int j = 0; j < nw; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// C[M,N] += A[M,K] * B[K,N], all row-major.
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
  constexpr int MR = 8;
  constexpr int NR = 32;
  const int mtiles = (M + MR - 1) / MR;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) \
    if (kernel_threads() > 1 && mtiles > 1)
#endif
  for (int t = 0; t < mtiles; ++t) {
    const int i0 = t * MR;
    const int mr = std::min(MR, M - i0);
    const T* apanel = A + static_cast<std::size_t>(i0) * K;
    T* cpanel = C + static_cast<std::size_t>(i0) * N;
    int j0 = 0;
    for (; j0 + NR <= N; j0 += NR) {
      detail::gemm_micro<T, MR, NR>(K, apanel, K, B + j0, N, cpanel + j0, N, mr);
    }
    if (j0 < N) detail::gemm_edge<T, MR>(K, N - j0, apanel, K, B + j0, N, cpanel + j0, N, mr);
  }
}

// Cache-blocked out-of-place transpose: dst[(cols x rows)] = src[(rows x cols)]^T.
template <typename T>
void transpose(int rows, int cols, const T* src, T* dst) {
  constexpr int BS = 32;
  for (int r0 = 0; r0 < rows; r0 += BS) {
    const int r1 = std::min(r0 + BS, rows);
    for (int c0 = 0; c0 < cols; c0 += BS) {
      const int c1 = std::min(c0 + BS, cols);
      for (int r = r0; r < r1; ++r) {
        const T* s = src + static_cast<std::size_t>(r) * cols;
        for (int c = c0; c < c1; ++c) {
          dst[static_cast<std::size_t>(c) * rows + r] = s[c];
        }
      }
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]; A is transposed into scratch once (A is the
// small weight matrix in every caller) and the nn kernel does the work.
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C,
             std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(K) * M);
  for (int m = 0; m < M; ++m) {
    for (int k = 0; k < K; ++k) {
      scratch[static_cast<std::size_t>(k) * M + m] = A[static_cast<std::size_t>(m) * K + k];
    }
  }
  gemm_nn(K, N, M, scratch.data(), B, C);
}

}  // namespace sduseg
