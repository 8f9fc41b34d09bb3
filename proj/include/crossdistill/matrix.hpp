#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crossdistill/errors.hpp"

namespace crossdistill {

// Dense row-major matrix of doubles. Desk-scale sizes only; everything is
// double precision so gradient checks have headroom.
struct Matrix2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix2D() = default;
  Matrix2D(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::size_t size() const { return data.size(); }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }

  bool operator==(const Matrix2D& other) const = default;
};

inline void check_same_shape(const Matrix2D& a, const Matrix2D& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

// C = A * B, ikj loop order for cache locality.
inline Matrix2D matmul(const Matrix2D& a, const Matrix2D& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() +
                     " times " + b.shape_str());
  }
  Matrix2D c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double* crow = c.data.data() + i * c.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline Matrix2D transpose(const Matrix2D& m) {
  Matrix2D t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
  }
  return t;
}

inline Matrix2D identity(std::size_t n) {
  Matrix2D m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

}  // namespace crossdistill
