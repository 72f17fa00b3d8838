#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace handqa {

// Dense row-major matrix of doubles. Deliberately minimal: the scorer needs
// products, transposed products and elementwise work on shapes no larger
// than 64x64, and keeping the type dumb keeps the backward pass auditable.
struct Mat {
  std::size_t rows{0}, cols{0};
  std::vector<double> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const {
    return a[i * cols + j];
  }

  double* row(std::size_t i) { return a.data() + i * cols; }
  const double* row(std::size_t i) const { return a.data() + i * cols; }

  void fill(double v) { std::fill(a.begin(), a.end(), v); }

  // Reshape and zero, reusing capacity. Hot paths call this instead of
  // constructing fresh matrices so steady-state training does not allocate.
  void resize_zero(std::size_t r, std::size_t c) {
    rows = r;
    cols = c;
    a.assign(r * c, 0.0);
  }

  bool same_shape(const Mat& o) const {
    return rows == o.rows && cols == o.cols;
  }

  bool finite() const {
    for (double v : a) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

// C = A * B
inline void matmul_into(Mat& C, const Mat& A, const Mat& B) {
  assert(A.cols == B.rows);
  C.resize_zero(A.rows, B.cols);
  const std::size_t n = B.cols;
  for (std::size_t i = 0; i < A.rows; ++i) {
    const double* __restrict ai = A.row(i);
    double* __restrict ci = C.row(i);
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = ai[k];
      const double* __restrict bk = B.row(k);
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

inline Mat matmul(const Mat& A, const Mat& B) {
  Mat C;
  matmul_into(C, A, B);
  return C;
}

// C += A^T * B
inline void add_matmul_at_b(Mat& C, const Mat& A, const Mat& B) {
  assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
  const std::size_t n = B.cols;
  for (std::size_t k = 0; k < A.rows; ++k) {
    const double* __restrict ak = A.row(k);
    const double* __restrict bk = B.row(k);
    for (std::size_t i = 0; i < A.cols; ++i) {
      const double aki = ak[i];
      double* __restrict ci = C.row(i);
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

// C = A * B^T; rows of both operands stream contiguously. Four independent
// accumulators keep the reduction pipelined without reassociating under
// -ffast-math.
inline void matmul_a_bt_into(Mat& C, const Mat& A, const Mat& B) {
  assert(A.cols == B.cols);
  C.resize_zero(A.rows, B.rows);
  const std::size_t kdim = A.cols;
  for (std::size_t i = 0; i < A.rows; ++i) {
    const double* __restrict ai = A.row(i);
    double* __restrict ci = C.row(i);
    for (std::size_t j = 0; j < B.rows; ++j) {
      const double* __restrict bj = B.row(j);
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      std::size_t k = 0;
      for (; k + 4 <= kdim; k += 4) {
        a0 += ai[k] * bj[k];
        a1 += ai[k + 1] * bj[k + 1];
        a2 += ai[k + 2] * bj[k + 2];
        a3 += ai[k + 3] * bj[k + 3];
      }
      double acc = (a0 + a1) + (a2 + a3);
      for (; k < kdim; ++k) acc += ai[k] * bj[k];
      ci[j] = acc;
    }
  }
}

inline Mat matmul_a_bt(const Mat& A, const Mat& B) {
  Mat C;
  matmul_a_bt_into(C, A, B);
  return C;
}

inline Mat transpose(const Mat& A) {
  Mat T(A.cols, A.rows);
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t j = 0; j < A.cols; ++j) T(j, i) = A(i, j);
  }
  return T;
}

// dst = relu(src), shapes copied from src.
inline void relu_into(Mat& dst, const Mat& src) {
  dst.rows = src.rows;
  dst.cols = src.cols;
  dst.a.assign(src.a.begin(), src.a.end());
  for (double& v : dst.a) v = std::max(0.0, v);
}

inline void copy_into(Mat& dst, const Mat& src) {
  dst.rows = src.rows;
  dst.cols = src.cols;
  dst.a.assign(src.a.begin(), src.a.end());
}

inline void axpy(Mat& Y, double alpha, const Mat& X) {
  assert(Y.same_shape(X));
  for (std::size_t i = 0; i < Y.a.size(); ++i) Y.a[i] += alpha * X.a[i];
}

}  // namespace handqa
