#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include "dfqvit/autodiff.hpp"
#include "dfqvit/vit.hpp"

namespace testutil {

using namespace dfqvit;

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline Tensor normal_tensor(const Shape& shape, std::uint64_t seed, double mean = 0.0, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(mean, sd);
  Tensor t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Builds a scalar loss from one input variable.
using ScalarFn = std::function<Var(Var)>;

inline double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  return f(tape.constant(x)).value().item();
}

inline Tensor autodiff_grad(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var v = tape.variable(x);
  tape.backward(f(v));
  return tape.grad(v);
}

// Central differences.
inline Tensor numeric_grad(const ScalarFn& f, const Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double up = eval_scalar(f, xp);
    xp[i] = x[i] - h;
    const double down = eval_scalar(f, xp);
    xp[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-7) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

// Reduces a tensor-valued op to a scalar with fixed random weights so every output element is probed.
inline ScalarFn probe(const std::function<Var(Var)>& op, const Shape& out_shape, std::uint64_t seed = 99) {
  Tensor w = random_tensor(out_shape, seed);
  return [op, w](Var x) {
    Var y = op(x);
    return sum(mul(y, x.tape()->constant(w)));
  };
}

inline ViTConfig tiny_config() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  return c;
}

// Random model with larger-than-default weights so signals are not vanishingly small.
inline ViTModel random_model(const ViTConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  ViTModel m = ViTModel::init(cfg, seed);
  std::mt19937_64 rng(seed ^ 0xABCDEF);
  std::normal_distribution<double> n(0.0, scale);
  visit_params(m.params(), [&](const std::string& name, Tensor& t) {
    if (name.find("gain") != std::string::npos) {
      for (double& v : t.data()) v = 1.0 + 0.1 * n(rng);
    } else {
      for (double& v : t.data()) v = n(rng);
    }
  });
  return m;
}

}  // namespace testutil
