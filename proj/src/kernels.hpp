#pragma once

// Untracked numeric kernels shared by the op implementations and backward rules.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "ivcl/tensor.hpp"

namespace ivcl::kernels {

template <class T>
Tensor make(Shape shape, std::vector<T> data) {
  return Tensor(std::move(shape), std::move(data));
}

/// C[m×n] = A[m×k]·B[k×n], all row-major with explicit leading dimensions.
/// Every output element is accumulated in ascending k order starting from
/// zero, so results match a naive triple loop bit for bit.
template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda, const T* b,
             std::int64_t ldb, T* c, std::int64_t ldc) {
  constexpr std::int64_t kRows = 4;
  constexpr std::int64_t kCols = sizeof(T) == 4 ? 64 : 32;
  for (std::int64_t i0 = 0; i0 < m; i0 += kRows) {
    const std::int64_t mr = std::min(kRows, m - i0);
    for (std::int64_t j0 = 0; j0 < n; j0 += kCols) {
      const std::int64_t nr = std::min(kCols, n - j0);
      alignas(64) T acc[kRows][kCols] = {};
      if (mr == kRows && nr == kCols) {
        const T* a0 = a + (i0 + 0) * lda;
        const T* a1 = a + (i0 + 1) * lda;
        const T* a2 = a + (i0 + 2) * lda;
        const T* a3 = a + (i0 + 3) * lda;
        for (std::int64_t p = 0; p < k; ++p) {
          const T* brow = b + p * ldb + j0;
          const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
#pragma GCC ivdep
          for (std::int64_t j = 0; j < kCols; ++j) {
            const T bj = brow[j];
            acc[0][j] += v0 * bj;
            acc[1][j] += v1 * bj;
            acc[2][j] += v2 * bj;
            acc[3][j] += v3 * bj;
          }
        }
      } else {
        for (std::int64_t p = 0; p < k; ++p) {
          const T* brow = b + p * ldb + j0;
          for (std::int64_t r = 0; r < mr; ++r) {
            const T v = a[(i0 + r) * lda + p];
            for (std::int64_t j = 0; j < nr; ++j) acc[r][j] += v * brow[j];
          }
        }
      }
      for (std::int64_t r = 0; r < mr; ++r)
        std::copy(acc[r], acc[r] + nr, c + (i0 + r) * ldc + j0);
    }
  }
}

template <class T>
void transpose(std::int64_t rows, std::int64_t cols, const T* src, T* dst) {
  constexpr std::int64_t kBlock = 32;
  for (std::int64_t i0 = 0; i0 < rows; i0 += kBlock)
    for (std::int64_t j0 = 0; j0 < cols; j0 += kBlock)
      for (std::int64_t i = i0; i < std::min(rows, i0 + kBlock); ++i)
        for (std::int64_t j = j0; j < std::min(cols, j0 + kBlock); ++j) dst[j * rows + i] = src[i * cols + j];
}

/// a[m×k]·b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// aᵀ·b for a[k×m], b[k×n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a·bᵀ for a[m×k], b[n×k]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
/// Sum over all leading axes, leaving the last axis.
Tensor sum_to_last(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);
void require_same_dtype(const Tensor& a, const Tensor& b, const char* op);
void require_rank(const Tensor& a, std::int64_t rank, const char* op);

}  // namespace ivcl::kernels
