#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/tensor.hpp"

namespace dfqvit {

class Tape;

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Handle to a tensor recorded on a Tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Append-only record of a forward computation. Nodes are stored in recording
// order, which is a topological order, so backward is a single reverse sweep.
// A tape supports exactly one backward pass.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }
  Var variable(Tensor value) { return push(std::move(value), true, {}, nullptr); }

  // Records an op output. The backward rule is kept only when some input needs a gradient.
  Var record(Tensor value, std::span<const Var> inputs, Backward backward) {
    bool needs_grad = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      check_owned(v);
      ids.push_back(v.id());
      needs_grad = needs_grad || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs_grad, std::move(ids),
                needs_grad ? std::move(backward) : Backward{});
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].requires_grad;
  }

  // Gradient accumulator for v, zero-initialised on first use; nullptr if v needs no gradient.
  Tensor* grad_sink(Var v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return &n.grad;
  }

  // dLoss/dv after backward(); zeros if v did not influence the loss. Only leaf
  // gradients are retained.
  const Tensor& grad(Var v) {
    check_owned(v);
    Node& n = nodes_[v.id()];
    if (!consumed_) throw AutodiffError("grad() requested before backward()");
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.tape() != this) throw AutodiffError("backward: loss was not recorded on this tape");
    if (consumed_) throw AutodiffError("backward: tape already replayed; record a new forward pass");
    Node& root = nodes_[loss.id()];
    if (root.value.size() != 1) {
      throw AutodiffError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
    }
    consumed_ = true;
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    root.has_grad = true;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
      // Interior gradients are not needed once propagated.
      if (!n.inputs.empty()) {
        n.grad = Tensor();
        n.has_grad = false;
        n.backward = nullptr;
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    bool has_grad = false;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs, Backward backward) {
    if (consumed_) throw AutodiffError("cannot record on a tape that has been replayed");
    nodes_.push_back(Node{std::move(value), requires_grad, false, Tensor(), std::move(inputs),
                          std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw AutodiffError("variable does not belong to this tape");
    }
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw AutodiffError("operation on an unbound variable");
  return tape_->value(*this);
}
inline bool Var::requires_grad() const {
  if (!tape_) throw AutodiffError("operation on an unbound variable");
  return tape_->requires_grad(*this);
}

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw AutodiffError("operation on an unbound variable");
  return *a.tape();
}

template <class F>
Var unary(Var a, F&& fwd_and_deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  Tensor dydx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [v, d] = fwd_and_deriv(x[i]);
    y[i] = v;
    dydx[i] = d;
  }
  return tape_of(a).record(std::move(y), {a}, [a, dydx = std::move(dydx)](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dydx[i];
    }
  });
}

inline void axis_extents(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& len,
                         std::size_t& inner) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  }
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  len = shape[axis];
}

}  // namespace detail

inline Var add(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape(x, y, "add");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.grad_sink(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape(x, y, "sub");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.grad_sink(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (Tensor* ga = t.grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
    }
    if (Tensor* gb = t.grad_sink(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return std::pair{s * x, s}; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(a, [s](double x) { return std::pair{x + s, 1.0}; });
}

inline Var abs(Var a) {
  return detail::unary(a, [](double x) {
    return std::pair{std::fabs(x), x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0)};
  });
}

inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) {
    double r = std::sqrt(x);
    return std::pair{r, 0.5 / r};
  });
}

inline Var exp(Var a) {
  return detail::unary(a, [](double x) {
    double e = std::exp(x);
    return std::pair{e, e};
  });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::pair{std::log(x), 1.0 / x}; });
}

namespace detail {
// libm tanh is several times slower than exp here.
inline double tanh_via_exp(double u) { return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0); }
}  // namespace detail

// Tanh approximation of GELU.
inline double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + detail::tanh_via_exp(c * (x + 0.044715 * x * x * x)));
}

inline Var gelu(Var a) {
  return detail::unary(a, [](double x) {
    constexpr double c = 0.7978845608028654;
    const double inner = c * (x + 0.044715 * x * x * x);
    const double th = detail::tanh_via_exp(inner);
    const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
    return std::pair{0.5 * x * (1.0 + th), d};
  });
}

// x + t where t is repeated over x; t's element count must divide x's and the last axes agree.
inline Var add_tiled(Var x, Var t) {
  const Tensor& xv = x.value();
  const Tensor& tv = t.value();
  if (xv.size() % tv.size() != 0 || xv.cols() != tv.cols()) {
    throw ShapeError("add_tiled: cannot tile " + shape_str(tv.shape()) + " over " +
                     shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  const std::size_t n = tv.size();
  for (std::size_t i = 0; i < xv.size(); i += n) {
    for (std::size_t j = 0; j < n; ++j) out[i + j] = xv[i + j] + tv[j];
  }
  return detail::tape_of(x).record(std::move(out), {x, t}, [x, t, n](Tape& tp, const Tensor& g) {
    if (Tensor* gx = tp.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
    if (Tensor* gt = tp.grad_sink(t)) {
      for (std::size_t i = 0; i < g.size(); i += n) {
        for (std::size_t j = 0; j < n; ++j) (*gt)[j] += g[i + j];
      }
    }
  });
}

inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::tape_of(a).record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) {
      const double gv = g[0];
      for (double& v : ga->data()) v += gv;
    }
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

inline Var transpose(Var a) {
  Tensor out = transpose(a.value());
  return detail::tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_sink(a)) {
      const std::size_t r = g.dim(0), c = g.dim(1);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) ga->at(j, i) += g.at(i, j);
      }
    }
  });
}

inline Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out = matmul(x, y);
  return detail::tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
    if (Tensor* ga = t.grad_sink(a)) {
      kernels::gemm_nt(m, n, k, g.data().data(), y.data().data(), ga->data().data(), true);
    }
    if (Tensor* gb = t.grad_sink(b)) {
      kernels::gemm_tn(k, m, n, x.data().data(), g.data().data(), gb->data().data(), true);
    }
  });
}

inline Var linear(Var x, Var weight, Var bias) { return add_tiled(matmul(x, weight), bias); }

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer, len, inner;
  detail::axis_extents(out_shape, axis, outer, len, inner);
  Tensor out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t plen = v.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().data() + o * plen * inner, plen * inner,
                  out.data().data() + (o * len + offset) * inner);
    }
    offsets.push_back(offset);
    offset += plen;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return detail::tape_of(parts[0]).record(
      std::move(out), std::span<const Var>(inputs),
      [inputs, offsets, outer, len, inner, axis](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          Tensor* gp = t.grad_sink(inputs[k]);
          if (!gp) continue;
          const std::size_t plen = gp->dim(axis);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data().data() + (o * len + offsets[k]) * inner;
            double* dst = gp->data().data() + o * plen * inner;
            for (std::size_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// Elements [begin, end) along axis.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  std::size_t outer, len, inner;
  detail::axis_extents(x.shape(), axis, outer, len, inner);
  if (begin >= end || end > len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis of length " + std::to_string(len));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t w = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + (o * len + begin) * inner, w, out.data().data() + o * w);
  }
  return detail::tape_of(a).record(std::move(out), {a},
                                   [a, outer, len, inner, begin, w](Tape& t, const Tensor& g) {
                                     if (Tensor* ga = t.grad_sink(a)) {
                                       for (std::size_t o = 0; o < outer; ++o) {
                                         double* dst = ga->data().data() + (o * len + begin) * inner;
                                         const double* src = g.data().data() + o * w;
                                         for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                                       }
                                     }
                                   });
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::axis_extents(x.shape(), axis, outer, len, inner);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] *= inv;
    }
  }
  return y;
}

inline Var softmax(Var a, std::size_t axis) {
  Tensor y = softmax(a.value(), axis);
  std::size_t outer, len, inner;
  detail::axis_extents(y.shape(), axis, outer, len, inner);
  auto yv = std::make_shared<Tensor>(y);
  return detail::tape_of(a).record(std::move(y), {a}, [a, yv, outer, len, inner](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_sink(a);
    if (!ga) return;
    const Tensor& y = *yv;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          (*ga)[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

// Normalises over the last axis, then applies per-feature gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: feature size " + std::to_string(d) + " vs gain " +
                     shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = xv.rows();
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat->at(r, j) = h;
      out.at(r, j) = h * gv[j] + bv[j];
    }
  }
  return detail::tape_of(x).record(
      std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std, d, rows](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gain);
        Tensor* gx = t.grad_sink(x);
        Tensor* gg = t.grad_sink(gain);
        Tensor* gb = t.grad_sink(bias);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          auto grow = g.row(r);
          auto hrow = xhat->row(r);
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += grow[j] * hrow[j];
          }
          if (gb) {
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += grow[j];
          }
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = grow[j] * gv[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * hrow[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            auto xrow = gx->row(r);
            const double is = (*inv_std)[r];
            for (std::size_t j = 0; j < d; ++j) xrow[j] += is * (dxhat[j] - m1 - hrow[j] * m2);
          }
        }
      });
}

// Mean over consecutive groups of `group` rows: [G*group x C] -> [G x C].
inline Var mean_row_groups(Var x, std::size_t group) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  if (group == 0 || rows % group != 0) {
    throw ShapeError("mean_row_groups: " + std::to_string(rows) + " rows not divisible by " +
                     std::to_string(group));
  }
  const std::size_t groups = rows / group;
  const double inv = 1.0 / static_cast<double>(group);
  Tensor out({groups, c});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t r = 0; r < group; ++r) {
      auto src = xv.row(gi * group + r);
      for (std::size_t j = 0; j < c; ++j) out.at(gi, j) += src[j];
    }
    for (std::size_t j = 0; j < c; ++j) out.at(gi, j) *= inv;
  }
  return detail::tape_of(x).record(std::move(out), {x}, [x, group, groups, c, inv](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t r = 0; r < group; ++r) {
          auto dst = gx->row(gi * group + r);
          for (std::size_t j = 0; j < c; ++j) dst[j] += g.at(gi, j) * inv;
        }
      }
    }
  });
}

// Mean cross-entropy of softmax(logits[B x C]) against integer labels.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require_rank(z, 2, "cross_entropy");
  const std::size_t b = z.dim(0), c = z.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(c) + ")");
    }
  }
  Tensor p = softmax(z, 1);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    // log-sum-exp form keeps saturated logits finite.
    auto row = z.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss += mx + std::log(s) - row[static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::tape_of(logits).record(
      Tensor::scalar(loss), {logits}, [logits, p = std::move(p), lab, b, c](Tape& t, const Tensor& g) {
        if (Tensor* gz = t.grad_sink(logits)) {
          const double s = g[0] / static_cast<double>(b);
          for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              const double target = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
              gz->at(i, j) += s * (p.at(i, j) - target);
            }
          }
        }
      });
}

// Per-row cross-entropy [B] of logits [B x C] against integer labels.
inline Var cross_entropy_rows(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require_rank(z, 2, "cross_entropy_rows");
  const std::size_t b = z.dim(0), c = z.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw std::out_of_range("cross_entropy_rows: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(c) + ")");
    }
  }
  Tensor p = softmax(z, 1);
  Tensor loss({b});
  for (std::size_t i = 0; i < b; ++i) {
    auto row = z.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss[i] = mx + std::log(s) - row[static_cast<std::size_t>(labels[i])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::tape_of(logits).record(
      std::move(loss), {logits}, [logits, p = std::move(p), lab, b, c](Tape& t, const Tensor& g) {
        if (Tensor* gz = t.grad_sink(logits)) {
          for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              const double target = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
              gz->at(i, j) += g[i] * (p.at(i, j) - target);
            }
          }
        }
      });
}

}  // namespace dfqvit
