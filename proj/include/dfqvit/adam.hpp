#pragma once

#include <cmath>
#include <cstdint>

#include "dfqvit/tensor.hpp"

namespace dfqvit {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers for one parameter tensor.
struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(const Shape& shape) : m(shape), v(shape) {}
};

// One bias-corrected Adam update, in place.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamOptions& opt) {
  require_same_shape(param, grad, "adam_step");
  if (state.step == 0 && state.m.shape() != param.shape()) state = AdamState(param.shape());
  require_same_shape(param, state.m, "adam_step(state)");
  require_same_shape(param, state.v, "adam_step(state)");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
    const double v = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
    state.m[i] = m;
    state.v[i] = v;
    param[i] -= opt.lr * (m / c1) / (std::sqrt(v / c2) + opt.eps);
  }
}

}  // namespace dfqvit
