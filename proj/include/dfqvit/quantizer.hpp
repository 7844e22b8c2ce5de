#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/autodiff.hpp"
#include "dfqvit/vit.hpp"

namespace dfqvit {

enum class QuantMode { symmetric, asymmetric };

inline const char* mode_name(QuantMode m) { return m == QuantMode::symmetric ? "symmetric" : "asymmetric"; }

inline QuantMode parse_mode(const std::string& s) {
  if (s == "symmetric") return QuantMode::symmetric;
  if (s == "asymmetric") return QuantMode::asymmetric;
  throw std::invalid_argument("unknown quantization mode '" + s + "'");
}

// Uniform quantizer: code = clip(round(x / scale) + zero_point, qmin, qmax).
struct QuantParams {
  int bits = 8;
  double scale = 1.0;
  std::int64_t zero_point = 0;
  QuantMode mode = QuantMode::symmetric;

  std::int64_t qmin() const {
    return mode == QuantMode::symmetric ? -(std::int64_t{1} << (bits - 1)) : 0;
  }
  std::int64_t qmax() const {
    return mode == QuantMode::symmetric ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
  }

  void validate() const {
    if (bits < 2 || bits > 32) throw std::invalid_argument("QuantParams: bits " + std::to_string(bits) + " outside [2, 32]");
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw std::invalid_argument("QuantParams: scale must be positive and finite");
    }
    if (mode == QuantMode::symmetric && zero_point != 0) {
      throw std::invalid_argument("QuantParams: symmetric mode requires zero_point 0");
    }
    if (zero_point < qmin() || zero_point > qmax()) {
      throw std::invalid_argument("QuantParams: zero_point outside code range");
    }
  }

  bool operator==(const QuantParams&) const = default;
};

// Rounds half away from zero (std::round semantics), then clips to the code range.
inline std::int64_t quantize(double x, const QuantParams& p) {
  const double r = std::round(x / p.scale) + static_cast<double>(p.zero_point);
  const double lo = static_cast<double>(p.qmin()), hi = static_cast<double>(p.qmax());
  if (!(r >= lo)) return p.qmin();  // also maps NaN to the lowest code
  if (r > hi) return p.qmax();
  return static_cast<std::int64_t>(r);
}

inline double dequantize(std::int64_t q, const QuantParams& p) {
  if (q < p.qmin() || q > p.qmax()) {
    throw std::out_of_range("dequantize: code " + std::to_string(q) + " outside [" + std::to_string(p.qmin()) +
                            ", " + std::to_string(p.qmax()) + "]");
  }
  return static_cast<double>(q - p.zero_point) * p.scale;
}

inline double fake_quantize(double x, const QuantParams& p) { return dequantize(quantize(x, p), p); }

inline Tensor fake_quantize(const Tensor& t, const QuantParams& p) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = fake_quantize(t[i], p);
  return out;
}

// Symmetric per-tensor weight quantizer: scale = max|w| / (2^(k-1) - 1), or 1 for an all-zero tensor.
inline QuantParams fit_weight_params(const Tensor& w, int bits) {
  if (w.size() == 0) throw std::invalid_argument("fit_weight_params: empty tensor");
  double amax = 0.0;
  for (double v : w.data()) amax = std::max(amax, std::fabs(v));
  QuantParams p{bits, 1.0, 0, QuantMode::symmetric};
  if (amax > 0.0) p.scale = amax / static_cast<double>((std::int64_t{1} << (bits - 1)) - 1);
  p.validate();
  return p;
}

// Asymmetric activation quantizer spanning [lo, hi].
inline QuantParams fit_activation_params(double lo, double hi, int bits) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    throw std::invalid_argument("fit_activation_params: non-finite statistics");
  }
  if (lo > hi) throw std::invalid_argument("fit_activation_params: min > max");
  QuantParams p{bits, 1.0, 0, QuantMode::asymmetric};
  const double levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  if (hi > lo) p.scale = (hi - lo) / levels;
  const double z = std::round(-lo / p.scale);
  p.zero_point = static_cast<std::int64_t>(std::clamp(z, 0.0, levels));
  p.validate();
  return p;
}

struct QuantConfig {
  int bits_w = 4;
  int bits_a = 8;
  bool quantize_patch_embed = true;
  // Activation range from the given percentile of observed values (100 = plain min/max).
  double act_percentile = 100.0;
};

// Fake-quantized view of a model: quantized weights baked into a parameter copy,
// plus per-site activation quantizers applied at linear-layer inputs.
struct QuantizedModel {
  ViTConfig config;
  QuantConfig qconfig;
  ModelParams<Tensor> weights;
  std::vector<std::pair<std::string, QuantParams>> weight_params;
  std::vector<std::optional<QuantParams>> activation_params;  // per activation site
  std::vector<bool> site_quantized;                           // per activation site

  const QuantParams* weight_param(const std::string& name) const {
    for (const auto& [n, p] : weight_params) {
      if (n == name) return &p;
    }
    return nullptr;
  }
};

// Straight-through fake quantization of an activation.
inline Var fake_quantize(Var x, const QuantParams& p) {
  Tensor y = fake_quantize(x.value(), p);
  return detail::tape_of(x).record(std::move(y), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

class QuantHooks : public ForwardHooks {
 public:
  explicit QuantHooks(const QuantizedModel& qm) : qm_(qm) {}

  Var linear_input(std::size_t site, Var x) override {
    if (!qm_.site_quantized.at(site)) return x;
    const auto& p = qm_.activation_params.at(site);
    if (!p) {
      throw std::logic_error("quantized forward: activation site '" + activation_site_names(qm_.config).at(site) +
                             "' is not calibrated");
    }
    return fake_quantize(x, *p);
  }

 private:
  const QuantizedModel& qm_;
};

// Records per-site min/max (and optionally every value) while passing activations through.
class ActivationObserver : public ForwardHooks {
 public:
  ActivationObserver(std::size_t sites, bool keep_values)
      : min_(sites, std::numeric_limits<double>::infinity()),
        max_(sites, -std::numeric_limits<double>::infinity()),
        values_(keep_values ? sites : 0) {}

  Var linear_input(std::size_t site, Var x) override {
    for (double v : x.value().data()) {
      min_[site] = std::min(min_[site], v);
      max_[site] = std::max(max_[site], v);
    }
    if (!values_.empty()) {
      values_[site].insert(values_[site].end(), x.value().data().begin(), x.value().data().end());
    }
    return x;
  }

  double min(std::size_t site) const { return min_[site]; }
  double max(std::size_t site) const { return max_[site]; }

  // Symmetric percentile range [p_low, p_high] with p_high = pct.
  std::pair<double, double> percentile_range(std::size_t site, double pct) {
    auto& v = values_.at(site);
    if (v.empty()) return {min_[site], max_[site]};
    std::sort(v.begin(), v.end());
    const double f = pct / 100.0;
    const auto hi = static_cast<std::size_t>(std::floor(f * static_cast<double>(v.size() - 1)));
    const auto lo = static_cast<std::size_t>(std::ceil((1.0 - f) * static_cast<double>(v.size() - 1)));
    return {v[std::min(lo, hi)], v[hi]};
  }

 private:
  std::vector<double> min_, max_;
  std::vector<std::vector<double>> values_;
};

// Bakes fake-quantized weights for the given per-weight parameters.
inline void apply_weight_quantization(QuantizedModel& qm, const ModelParams<Tensor>& fp) {
  qm.weights = fp;
  visit_linear_weights(qm.weights, [&](const std::string& name, Tensor& w) {
    if (const QuantParams* p = qm.weight_param(name)) w = fake_quantize(w, *p);
  });
}

inline QuantizedModel make_weight_quantized(const ViTModel& model, const QuantConfig& qc) {
  QuantizedModel qm;
  qm.config = model.config();
  qm.qconfig = qc;
  visit_linear_weights(model.params(), [&](const std::string& name, const Tensor& w) {
    if (name == "patch_embed.weight" && !qc.quantize_patch_embed) return;
    qm.weight_params.emplace_back(name, fit_weight_params(w, qc.bits_w));
  });
  apply_weight_quantization(qm, model.params());
  const std::size_t sites = site::count(qm.config);
  qm.site_quantized.assign(sites, true);
  if (!qc.quantize_patch_embed) qm.site_quantized[site::patch_embed()] = false;
  qm.activation_params.assign(sites, std::nullopt);
  return qm;
}

// Weight quantizers from the weights alone; activation quantizers from the
// range of each linear-layer input over full-precision forwards of `samples`,
// widened to include zero.
inline QuantizedModel calibrate(const ViTModel& model, const std::vector<Tensor>& samples, const QuantConfig& qc) {
  if (samples.empty()) throw std::invalid_argument("calibrate: empty sample set");
  QuantizedModel qm = make_weight_quantized(model, qc);
  const bool percentile = qc.act_percentile < 100.0;
  ActivationObserver obs(site::count(qm.config), percentile);
  forward(model, stack_images(samples), false, &obs);
  for (std::size_t s = 0; s < qm.site_quantized.size(); ++s) {
    if (!qm.site_quantized[s]) continue;
    auto [lo, hi] = percentile ? obs.percentile_range(s, qc.act_percentile) : std::pair{obs.min(s), obs.max(s)};
    // Zero must be representable, otherwise a one-signed range loses its far end to the clipped zero point.
    qm.activation_params[s] = fit_activation_params(std::min(lo, 0.0), std::max(hi, 0.0), qc.bits_a);
  }
  return qm;
}

inline ForwardTrace quantized_forward(const QuantizedModel& qm, const Tensor& images, bool trace_requested = false) {
  QuantHooks hooks(qm);
  return forward(qm.weights, qm.config, images, trace_requested, &hooks);
}

// Text form: one record per line, "weight|activation <site> <mode> <bits> <scale> <zero_point>".
inline std::string format_quant_params(const QuantizedModel& qm) {
  std::ostringstream out;
  char buf[256];
  out << "# dfqvit quant params v1\n";
  out << "config bits_w " << qm.qconfig.bits_w << " bits_a " << qm.qconfig.bits_a << " quantize_patch_embed "
      << (qm.qconfig.quantize_patch_embed ? 1 : 0) << "\n";
  auto line = [&](const char* kind, const std::string& name, const QuantParams& p) {
    std::snprintf(buf, sizeof buf, "%s %s %s %d %.17g %" PRId64 "\n", kind, name.c_str(), mode_name(p.mode), p.bits,
                  p.scale, p.zero_point);
    out << buf;
  };
  for (const auto& [name, p] : qm.weight_params) line("weight", name, p);
  const auto names = activation_site_names(qm.config);
  for (std::size_t s = 0; s < names.size(); ++s) {
    if (qm.activation_params[s]) line("activation", names[s], *qm.activation_params[s]);
  }
  return out.str();
}

// Rebuilds a quantized model from its text form and the full-precision weights.
inline QuantizedModel parse_quant_params(const ViTModel& model, const std::string& text) {
  QuantizedModel qm;
  qm.config = model.config();
  const auto names = activation_site_names(qm.config);
  qm.activation_params.assign(names.size(), std::nullopt);
  qm.site_quantized.assign(names.size(), true);
  std::istringstream in(text);
  std::string line;
  bool saw_config = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config") {
      std::string k1, k2, k3;
      int pe = 1;
      ls >> k1 >> qm.qconfig.bits_w >> k2 >> qm.qconfig.bits_a >> k3 >> pe;
      if (!ls) throw std::runtime_error("quant params: malformed config line '" + line + "'");
      qm.qconfig.quantize_patch_embed = pe != 0;
      saw_config = true;
      continue;
    }
    std::string name, mode, scale_str;
    QuantParams p;
    ls >> name >> mode >> p.bits >> scale_str >> p.zero_point;
    if (!ls) throw std::runtime_error("quant params: malformed line '" + line + "'");
    p.mode = parse_mode(mode);
    p.scale = std::strtod(scale_str.c_str(), nullptr);
    p.validate();
    if (kind == "weight") {
      qm.weight_params.emplace_back(name, p);
    } else if (kind == "activation") {
      auto it = std::find(names.begin(), names.end(), name);
      if (it == names.end()) throw std::runtime_error("quant params: unknown activation site '" + name + "'");
      qm.activation_params[static_cast<std::size_t>(it - names.begin())] = p;
    } else {
      throw std::runtime_error("quant params: unknown record kind '" + kind + "'");
    }
  }
  if (!saw_config) throw std::runtime_error("quant params: missing config line");
  if (!qm.qconfig.quantize_patch_embed) qm.site_quantized[site::patch_embed()] = false;
  apply_weight_quantization(qm, model.params());
  return qm;
}

inline void save_quant_params(const QuantizedModel& qm, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << format_quant_params(qm);
}

inline QuantizedModel load_quant_params(const ViTModel& model, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_quant_params(model, ss.str());
}

}  // namespace dfqvit
