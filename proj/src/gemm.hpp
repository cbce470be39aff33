#pragma once

// Internal Eigen-backed matrix kernels. Each output element is accumulated
// sequentially over k by a single thread, so results are bitwise identical
// for any thread count.

#include <Eigen/Dense>
#include <cstdint>
#include <omp.h>

namespace hatkit::detail {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C (m x n) = op(A) * op(B), optionally accumulating into C.
template <class T>
void gemm_block(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool trans_a,
                bool trans_b, bool accumulate) {
  ConstMatMap<T> A(a, trans_a ? k : m, trans_a ? m : k);
  ConstMatMap<T> B(b, trans_b ? n : k, trans_b ? k : n);
  MatMap<T> C(c, m, n);
  if (!trans_a && !trans_b) {
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (!trans_a && trans_b) {
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else if (trans_a && !trans_b) {
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else {
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

// Single product with the output rows split across threads.
template <class T>
void gemm_parallel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool trans_a,
                   bool trans_b, bool accumulate) {
  const int64_t work = m * k * n;
  if (work < (1 << 18) || m < 4) {
    gemm_block(a, b, c, m, k, n, trans_a, trans_b, accumulate);
    return;
  }
#pragma omp parallel
  {
    int nt = omp_get_num_threads();
    int t = omp_get_thread_num();
    int64_t rows = (m + nt - 1) / nt;
    int64_t r0 = t * rows;
    int64_t r1 = std::min<int64_t>(m, r0 + rows);
    if (r0 < r1) {
      // Row r of op(A) starts at a + r*k when A is untransposed, a + r when
      // transposed (stride k handled through a strided map).
      if (!trans_a) {
        gemm_block(a + r0 * k, b, c + r0 * n, r1 - r0, k, n, false, trans_b, accumulate);
      } else {
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                   Eigen::Unaligned, Eigen::OuterStride<>>
            A(a + r0, k, r1 - r0, Eigen::OuterStride<>(m));
        ConstMatMap<T> B(b, trans_b ? n : k, trans_b ? k : n);
        MatMap<T> C(c + r0 * n, r1 - r0, n);
        if (!trans_b) {
          if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
        } else {
          if (accumulate) C.noalias() += A.transpose() * B.transpose();
          else C.noalias() = A.transpose() * B.transpose();
        }
      }
    }
  }
}

}  // namespace hatkit::detail
