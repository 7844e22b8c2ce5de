#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "dfqvit/autodiff.hpp"

namespace dfqvit {

struct KdeOptions {
  std::size_t grid_points = 512;
  double min_bandwidth = 1e-3;
  double pad_bandwidths = 4.0;  // grid spans [min - pad*h, max + pad*h]
  double kernel_cutoff = 10.0;  // kernel treated as 0 beyond |z| > cutoff
  // Also differentiate through the bandwidth and grid endpoints, which depend on the
  // sample. Without this the gradient treats them as constants.
  bool differentiate_domain = true;
};

// Silverman's rule with the sample standard deviation, floored at `floor`.
inline double silverman_bandwidth(std::span<const double> x, double floor = 1e-3) {
  if (x.size() < 2) throw std::invalid_argument("silverman_bandwidth: need at least 2 values");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(x.size() - 1));
  return std::max(1.06 * sd * std::pow(static_cast<double>(x.size()), -0.2), floor);
}

// Gaussian KDE evaluated directly at each point of `at`.
inline std::vector<double> kde_density(std::span<const double> x, double h, std::span<const double> at) {
  if (x.empty()) throw std::invalid_argument("kde_density: empty sample");
  if (!(h > 0.0)) throw std::invalid_argument("kde_density: bandwidth must be positive");
  const double norm = 1.0 / (static_cast<double>(x.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> f(at.size(), 0.0);
  for (std::size_t j = 0; j < at.size(); ++j) {
    double s = 0.0;
    for (double v : x) {
      const double z = (at[j] - v) / h;
      s += std::exp(-0.5 * z * z);
    }
    f[j] = s * norm;
  }
  return f;
}

namespace detail {

// Kernel values exp(-z_j^2 / 2) at the grid points j in [lo, lo + size) with
// |z_j| <= cutoff, where z_j = z_a + j*s, z_a = (a - x) / h and s = step / h.
struct KernelWindow {
  static constexpr std::size_t L = 8;
  std::size_t lo = 0, size = 0;
  double z_a = 0.0, s = 0.0;
  std::vector<double> e;
  // exp(-s^2), exp(-(L^2 - L) s^2 / 2) and exp(-L^2 s^2) for the cached s.
  double cached_s = -1.0, c1 = 0.0, cl = 0.0, cll = 0.0;

  double z(std::size_t i) const { return z_a + static_cast<double>(lo + i) * s; }
};

// With rho_j = exp(-z_j s - s^2/2), e_{j+1} = e_j rho_j and rho_{j+1} = rho_j exp(-s^2).
// The first L values use that step; after that, L interleaved recurrences
// e_{j+L} = e_j r_j with r_j = exp(-L z_j s - L^2 s^2 / 2) and r_{j+L} = r_j exp(-L^2 s^2).
inline void kernel_window(double x, double a, double step, double h, std::size_t n, double cutoff,
                          KernelWindow& w) {
  constexpr std::size_t L = KernelWindow::L;
  const double s = step / h;
  w.s = s;
  w.z_a = (a - x) / h;
  const double first = std::ceil((-cutoff - w.z_a) / s);
  const double last = std::floor((cutoff - w.z_a) / s);
  const double top = static_cast<double>(n - 1);
  if (last < 0.0 || first > top || first > last) {
    w.size = 0;
    return;
  }
  if (s != w.cached_s) {
    w.cached_s = s;
    w.c1 = std::exp(-s * s);
    w.cl = std::exp(-0.5 * static_cast<double>(L * L - L) * s * s);
    w.cll = std::exp(-static_cast<double>(L * L) * s * s);
  }
  w.lo = static_cast<std::size_t>(std::max(first, 0.0));
  w.size = static_cast<std::size_t>(std::min(last, top)) + 1 - w.lo;
  const std::size_t padded = (w.size + L - 1) / L * L;
  if (w.e.size() < padded) w.e.resize(padded);
  double* e = w.e.data();
  const double z0 = w.z(0);
  double rho = std::exp(-z0 * s - 0.5 * s * s);
  e[0] = std::exp(-0.5 * z0 * z0);
  static_assert(L == 8, "r_q below is rho_q^8");
  double r[L];
  for (std::size_t q = 0; q < L; ++q) {
    double p = rho * rho;
    p *= p;
    p *= p;
    r[q] = p * w.cl;
    if (q + 1 < L) e[q + 1] = e[q] * rho;
    rho *= w.c1;
  }
  for (std::size_t i = L; i < padded; i += L) {
    for (std::size_t q = 0; q < L; ++q) {
      e[i + q] = e[i + q - L] * r[q];
      r[q] *= w.cll;
    }
  }
}

struct EntropyEval {
  double value = 0.0;
  double h = 0.0, a = 0.0, step = 0.0, mean = 0.0, sd = 0.0;
  bool floored = false;
  std::size_t argmin = 0, argmax = 0;
  std::vector<double> u;       // dD/df_j
  std::vector<double> dfdt;    // density slope at grid point j
  std::vector<double> dfdh;    // density derivative w.r.t. bandwidth at fixed grid point
};

inline EntropyEval entropy_eval(std::span<const double> x, const KdeOptions& opt, bool want_grad) {
  const std::size_t m = x.size();
  const std::size_t n = opt.grid_points;
  if (m < 2) throw std::invalid_argument("differential_entropy: need at least 2 values");
  if (n < 2) throw std::invalid_argument("differential_entropy: grid needs at least 2 points");
  EntropyEval ev;
  double lo = x[0], hi = x[0];
  for (std::size_t i = 0; i < m; ++i) {
    if (!std::isfinite(x[i])) throw std::domain_error("differential_entropy: non-finite input");
    ev.mean += x[i];
    if (x[i] < lo) lo = x[i], ev.argmin = i;
    if (x[i] > hi) hi = x[i], ev.argmax = i;
  }
  ev.mean /= static_cast<double>(m);
  double ss = 0.0;
  for (double v : x) ss += (v - ev.mean) * (v - ev.mean);
  ev.sd = std::sqrt(ss / static_cast<double>(m - 1));
  const double rule = 1.06 * ev.sd * std::pow(static_cast<double>(m), -0.2);
  ev.floored = !(rule > opt.min_bandwidth);
  ev.h = ev.floored ? opt.min_bandwidth : rule;
  ev.a = lo - opt.pad_bandwidths * ev.h;
  const double b = hi + opt.pad_bandwidths * ev.h;
  ev.step = (b - ev.a) / static_cast<double>(n - 1);

  std::vector<double> s0(n, 0.0), s1, s2;
  if (want_grad) s1.assign(n, 0.0), s2.assign(n, 0.0);
  KernelWindow w;
  for (double v : x) {
    kernel_window(v, ev.a, ev.step, ev.h, n, opt.kernel_cutoff, w);
    const double* e = w.e.data();
    double* p0 = s0.data() + w.lo;
    for (std::size_t i = 0; i < w.size; ++i) p0[i] += e[i];
    if (!want_grad) continue;
    double* p1 = s1.data() + w.lo;
    double* p2 = s2.data() + w.lo;
    for (std::size_t i = 0; i < w.size; ++i) {
      const double z = w.z(i);
      p1[i] += z * e[i];
      p2[i] += z * z * e[i];
    }
  }
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  const double k0 = inv_sqrt2pi / (static_cast<double>(m) * ev.h);
  const double k1 = k0 / ev.h;
  if (want_grad) ev.u.assign(n, 0.0), ev.dfdt.assign(n, 0.0), ev.dfdh.assign(n, 0.0);
  double acc = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double f = s0[j] * k0;
    const double c = (j == 0 || j == n - 1) ? 0.5 : 1.0;
    if (f > 0.0) {
      acc -= c * f * std::log(f);
      if (want_grad) ev.u[j] = -c * ev.step * (std::log(f) + 1.0);
    }
    if (want_grad) {
      ev.dfdt[j] = -s1[j] * k1;
      ev.dfdh[j] = (s2[j] - s0[j]) * k1;
    }
  }
  ev.value = acc * ev.step;
  return ev;
}

}  // namespace detail

// Differential entropy -integral f log f of the Gaussian KDE of `x`, by trapezoid
// quadrature on a uniform grid.
inline double differential_entropy(std::span<const double> x, const KdeOptions& opt = {}) {
  return detail::entropy_eval(x, opt, false).value;
}

// Differentiable entropy of all elements of `x`. The gradient includes the
// dependence of the bandwidth and the grid endpoints on the sample.
inline Var differential_entropy(Var x, const KdeOptions& opt = {}) {
  auto ev = std::make_shared<detail::EntropyEval>(detail::entropy_eval(x.value().data(), opt, true));
  return detail::tape_of(x).record(Tensor::scalar(ev->value), {x}, [x, ev, opt](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(x);
    if (!gx) return;
    const auto& xv = x.value().data();
    const std::size_t m = xv.size(), n = opt.grid_points;
    const double gs = g.item();
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const double k1 = inv_sqrt2pi / (static_cast<double>(m) * ev->h * ev->h);
    // Direct term: df_j/dx_m = z * phi(z) / (M h^2).
    detail::KernelWindow w;
    for (std::size_t i = 0; i < m; ++i) {
      detail::kernel_window(xv[i], ev->a, ev->step, ev->h, n, opt.kernel_cutoff, w);
      const double* u = ev->u.data() + w.lo;
      double acc[4] = {0.0, 0.0, 0.0, 0.0};
      std::size_t k = 0;
      for (; k + 4 <= w.size; k += 4)
        for (std::size_t q = 0; q < 4; ++q) acc[q] += u[k + q] * w.z(k + q) * w.e[k + q];
      for (; k < w.size; ++k) acc[0] += u[k] * w.z(k) * w.e[k];
      (*gx)[i] += gs * ((acc[0] + acc[1]) + (acc[2] + acc[3])) * k1;
    }
    if (!opt.differentiate_domain) return;
    // Grid endpoints a = min - pad*h, b = max + pad*h, and step = (b - a)/(n - 1).
    double ga = 0.0, gb = 0.0, gh = 0.0;
    const double last = static_cast<double>(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = static_cast<double>(j) / last;
      ga += ev->u[j] * ev->dfdt[j] * (1.0 - w);
      gb += ev->u[j] * ev->dfdt[j] * w;
      gh += ev->u[j] * ev->dfdh[j];
    }
    const double d_step = ev->value / ev->step / last;
    ga -= d_step;
    gb += d_step;
    gh += opt.pad_bandwidths * (gb - ga);
    (*gx)[ev->argmin] += gs * ga;
    (*gx)[ev->argmax] += gs * gb;
    if (!ev->floored && ev->sd > 0.0) {
      const double dh_dsd = 1.06 * std::pow(static_cast<double>(m), -0.2);
      const double inv = 1.0 / (static_cast<double>(m - 1) * ev->sd);
      for (std::size_t i = 0; i < m; ++i) (*gx)[i] += gs * gh * dh_dsd * (xv[i] - ev->mean) * inv;
    }
  });
}

}  // namespace dfqvit
