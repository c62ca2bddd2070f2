#include "resfcn/gemm.hpp"

#include <algorithm>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace resfcn {

namespace {

// Kernel over a block of up to 4 rows: the B row is streamed once per k
// while four accumulator rows stay hot, which the compiler vectorizes
// over j with FMA. K stays the innermost sequential loop per element.
template <typename T, int ROWS>
void gemm_rows(int n, int k, const T* __restrict a, int lda, const T* __restrict b,
               int ldb, T* __restrict c, int ldc) {
  for (int kk = 0; kk < k; ++kk) {
    const T* __restrict brow = b + static_cast<std::size_t>(kk) * ldb;
    T a0 = a[0 * lda + kk];
    T a1 = ROWS > 1 ? a[1 * lda + kk] : T(0);
    T a2 = ROWS > 2 ? a[2 * lda + kk] : T(0);
    T a3 = ROWS > 3 ? a[3 * lda + kk] : T(0);
    T* __restrict c0 = c;
    T* __restrict c1 = c + 1 * ldc;
    T* __restrict c2 = c + 2 * ldc;
    T* __restrict c3 = c + 3 * ldc;
    for (int j = 0; j < n; ++j) {
      const T bv = brow[j];
      c0[j] += a0 * bv;
      if constexpr (ROWS > 1) c1[j] += a1 * bv;
      if constexpr (ROWS > 2) c2[j] += a2 * bv;
      if constexpr (ROWS > 3) c3[j] += a3 * bv;
    }
  }
}

template <typename T>
void gemm_range(int row_begin, int row_end, int n, int k, const T* a, int lda,
                const T* b, int ldb, T* c, int ldc, bool accumulate) {
  if (!accumulate) {
    for (int i = row_begin; i < row_end; ++i)
      std::fill(c + static_cast<std::size_t>(i) * ldc,
                c + static_cast<std::size_t>(i) * ldc + n, T(0));
  }
  int i = row_begin;
  for (; i + 4 <= row_end; i += 4)
    gemm_rows<T, 4>(n, k, a + static_cast<std::size_t>(i) * lda, lda, b, ldb,
                    c + static_cast<std::size_t>(i) * ldc, ldc);
  for (; i < row_end; ++i)
    gemm_rows<T, 1>(n, k, a + static_cast<std::size_t>(i) * lda, lda, b, ldb,
                    c + static_cast<std::size_t>(i) * ldc, ldc);
}

}  // namespace

template <typename T>
void gemm(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c,
          int ldc, bool accumulate) {
  gemm_range(0, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
void gemm_parallel(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
                   T* c, int ldc, bool accumulate) {
#ifdef _OPENMP
  if (static_cast<long long>(m) * n * k >= (1 << 18)) {
    const int rows_per_chunk = std::max(4, ((m / (2 * omp_get_max_threads())) + 3) & ~3);
    const int chunks = (m + rows_per_chunk - 1) / rows_per_chunk;
#pragma omp parallel for schedule(static)
    for (int chunk = 0; chunk < chunks; ++chunk) {
      const int begin = chunk * rows_per_chunk;
      const int end = std::min(m, begin + rows_per_chunk);
      gemm_range(begin, end, n, k, a, lda, b, ldb, c, ldc, accumulate);
    }
    return;
  }
#endif
  gemm_range(0, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template void gemm(int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm(int, int, int, const double*, int, const double*, int, double*, int, bool);
template void gemm_parallel(int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm_parallel(int, int, int, const double*, int, const double*, int, double*, int, bool);

}  // namespace resfcn
