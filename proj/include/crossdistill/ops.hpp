#pragma once

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "crossdistill/errors.hpp"
#include "crossdistill/matrix.hpp"

// Layer and loss primitives with analytic gradients. Every gradient here is
// covered by a central finite-difference test.

namespace crossdistill {

// out = x * w + bias, bias broadcast over rows.
inline Matrix2D affine_forward(const Matrix2D& x, const Matrix2D& w,
                               const std::vector<double>& bias) {
  if (x.cols != w.rows) {
    throw ShapeError("affine_forward: input cols " + std::to_string(x.cols) +
                     " vs weight rows " + std::to_string(w.rows));
  }
  if (bias.size() != w.cols) {
    throw ShapeError("affine_forward: bias length " + std::to_string(bias.size()) +
                     " vs weight cols " + std::to_string(w.cols));
  }
  Matrix2D out = matmul(x, w);
  for (std::size_t i = 0; i < out.rows; ++i) {
    double* row = out.data.data() + i * out.cols;
    for (std::size_t j = 0; j < out.cols; ++j) row[j] += bias[j];
  }
  return out;
}

struct AffineGrads {
  Matrix2D grad_x;
  Matrix2D grad_w;
  std::vector<double> grad_bias;
};

// grad_w = x^T * grad_out; grad_x = grad_out * w^T; grad_bias = column sums.
inline AffineGrads affine_backward(const Matrix2D& x, const Matrix2D& w,
                                   const Matrix2D& grad_out) {
  if (grad_out.rows != x.rows || grad_out.cols != w.cols || x.cols != w.rows) {
    throw ShapeError("affine_backward: inconsistent shapes x=" + x.shape_str() +
                     " w=" + w.shape_str() + " grad_out=" + grad_out.shape_str());
  }
  AffineGrads g;
  g.grad_w = matmul(transpose(x), grad_out);
  g.grad_x = matmul(grad_out, transpose(w));
  g.grad_bias.assign(w.cols, 0.0);
  for (std::size_t i = 0; i < grad_out.rows; ++i) {
    for (std::size_t j = 0; j < grad_out.cols; ++j) {
      g.grad_bias[j] += grad_out.at(i, j);
    }
  }
  return g;
}

inline Matrix2D relu(const Matrix2D& x) {
  Matrix2D y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

// Subgradient at exactly 0 is 0.
inline Matrix2D relu_backward(const Matrix2D& x, const Matrix2D& grad_out) {
  check_same_shape(x, grad_out, "relu_backward");
  Matrix2D grad_x = grad_out;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    if (x.data[i] <= 0.0) grad_x.data[i] = 0.0;
  }
  return grad_x;
}

// Numerically stable logistic, branch form: never exponentiates a large
// positive argument.
inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + e^x) without overflow; linear for large x.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

struct LossValue {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d input (logit or prediction)
};

// Binary cross-entropy on a logit against a soft target in [0, 1].
// loss = max(z, 0) - z*t + log(1 + e^-|z|), gradient = sigmoid(z) - t.
inline LossValue bce_with_logits(double logit, double target) {
  if (!(target >= 0.0 && target <= 1.0)) {
    throw ArgumentError("bce_with_logits: target " + std::to_string(target) +
                        " outside [0, 1]");
  }
  LossValue out;
  out.loss = std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
  out.grad = sigmoid(logit) - target;
  return out;
}

inline LossValue mse(double pred, double target) {
  const double diff = pred - target;
  return LossValue{diff * diff, 2.0 * diff};
}

}  // namespace crossdistill
