#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "gateon/common.hpp"
#include "gateon/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gateon {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, real fill = real(0)) : rows(r), cols(c), data(r * c, fill) {}

  real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  real* row(std::size_t r) { return data.data() + r * cols; }
  const real* row(std::size_t r) const { return data.data() + r * cols; }

  std::size_t size() const { return data.size(); }

  bool all_finite() const {
    for (real x : data)
      if (!is_finite(x)) return false;
    return true;
  }

  static Matrix randn(std::size_t r, std::size_t c, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Matrix m(r, c);
    for (auto& x : m.data) x = static_cast<real>(rng.normal(mean, stddev));
    return m;
  }
};

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  check(a.rows == b.rows && a.cols == b.cols, what);
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

namespace detail {

// C[i,:] accumulated over p in fixed order, so the result is bit-identical
// for any thread count: each output element is owned by exactly one thread
// and summed sequentially.
inline void matmul_ikj(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    real* crow = c + static_cast<std::size_t>(i) * n;
    std::fill(crow, crow + n, real(0));
    const real* arow = a + static_cast<std::size_t>(i) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = arow[p];
      const real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// a[m x k] * b[k x n].
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  check(a.cols == b.rows, "matmul: inner dimensions must agree");
  Matrix c(a.rows, b.cols);
  detail::matmul_ikj(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

/// a[m x k] * b^T, b[n x k]. The transpose is materialized so the kernel
/// keeps unit-stride access.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check(a.cols == b.cols, "matmul_nt: inner dimensions must agree");
  const Matrix bt = transpose(b);
  Matrix c(a.rows, b.rows);
  detail::matmul_ikj(a.data.data(), bt.data.data(), c.data.data(), a.rows, a.cols, b.rows);
  return c;
}

/// a^T * b, a[k x m], b[k x n].
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check(a.rows == b.rows, "matmul_tn: inner dimensions must agree");
  const Matrix at = transpose(a);
  Matrix c(a.cols, b.cols);
  detail::matmul_ikj(at.data.data(), b.data.data(), c.data.data(), a.cols, a.rows, b.cols);
  return c;
}

inline void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace gateon
