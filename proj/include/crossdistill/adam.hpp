#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crossdistill/errors.hpp"

namespace crossdistill {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter moments; owned by exactly one trainer at a time.
struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t n = 0)
      : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

// Standard bias-corrected Adam update, in place.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      AdamState& state, const AdamOptions& opts = {}) {
  if (state.step == 0 && state.first_moment.empty()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw ShapeError("adam_step: length mismatch params=" + std::to_string(params.size()) +
                     " grads=" + std::to_string(grads.size()) +
                     " state=" + std::to_string(state.first_moment.size()));
  }
  if (!(opts.beta1 >= 0.0 && opts.beta1 < 1.0) || !(opts.beta2 >= 0.0 && opts.beta2 < 1.0)) {
    throw ArgumentError("adam_step: betas must lie in [0, 1)");
  }
  if (!(opts.lr > 0.0) || !(opts.eps > 0.0)) {
    throw ArgumentError("adam_step: lr and eps must be positive");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = opts.beta1 * m + (1.0 - opts.beta1) * g;
    v = opts.beta2 * v + (1.0 - opts.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    params[i] -= opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps);
  }
}

}  // namespace crossdistill
