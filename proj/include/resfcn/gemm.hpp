#pragma once

#include <cstddef>

namespace resfcn {

// Row-major matrix multiply: C[M,N] = A[M,K] * B[K,N] (+= C when
// accumulate). Accumulation over K runs in ascending order for every
// output element, so results do not depend on how callers parallelize
// over rows or columns.
template <typename T>
void gemm(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c,
          int ldc, bool accumulate);

// Same contract, parallelized over row blocks.
template <typename T>
void gemm_parallel(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
                   T* c, int ldc, bool accumulate);

}  // namespace resfcn
