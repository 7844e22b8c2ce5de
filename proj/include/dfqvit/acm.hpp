#pragma once

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/checkpoint.hpp"
#include "dfqvit/quantizer.hpp"
#include "dfqvit/vit.hpp"

namespace dfqvit {

// Where corrections go: after every `gamma`-th block (0 = none), and optionally
// at the final-norm output and the logits.
struct HookSpec {
  std::size_t gamma = 0;
  bool final_norm = true;
  bool logits = true;
};

inline std::vector<std::size_t> hook_points(const ViTConfig& cfg, const HookSpec& spec) {
  std::vector<std::size_t> ids;
  if (spec.gamma > 0) {
    for (std::size_t i = spec.gamma - 1; i < cfg.num_layers; i += spec.gamma) ids.push_back(hook::block_out(i));
  }
  if (spec.final_norm) ids.push_back(hook::final_norm(cfg));
  if (spec.logits) ids.push_back(hook::logits(cfg));
  return ids;
}

struct AcmCorrection {
  std::size_t hook = 0;
  Tensor offset;  // [channels], broadcast over tokens
};

struct AcmSet {
  std::size_t gamma = 0;
  std::size_t sample_count = 0;
  std::vector<AcmCorrection> corrections;  // increasing hook ids

  const AcmCorrection* find(std::size_t hook) const {
    for (const auto& c : corrections) {
      if (c.hook == hook) return &c;
    }
    return nullptr;
  }

  void validate(const ViTConfig& cfg) const {
    for (std::size_t i = 0; i < corrections.size(); ++i) {
      const auto& c = corrections[i];
      if (c.hook >= hook::count(cfg)) {
        throw std::invalid_argument("ACM: hook id " + std::to_string(c.hook) + " does not exist in a " +
                                    std::to_string(cfg.num_layers) + "-layer model");
      }
      if (i > 0 && c.hook <= corrections[i - 1].hook) throw std::invalid_argument("ACM: hook ids must increase");
      if (c.offset.rank() != 1 || c.offset.size() != hook_channels(cfg, c.hook)) {
        throw ShapeError("ACM: correction at " + hook_name(cfg, c.hook) + " has shape " +
                         shape_str(c.offset.shape()) + ", expected [" +
                         std::to_string(hook_channels(cfg, c.hook)) + "]");
      }
    }
    if (!corrections.empty() && sample_count == 0) throw std::invalid_argument("ACM: sample count must be >= 1");
  }
};

inline std::size_t acm_param_count(const AcmSet& acm) {
  std::size_t n = 0;
  for (const auto& c : acm.corrections) n += c.offset.size();
  return n;
}

// x + offset on every row; zero entries are skipped so an all-zero offset is an exact identity.
inline Var add_row_offset(Var x, const Tensor& offset) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != offset.size()) {
    throw ShapeError("add_row_offset: " + shape_str(xv.shape()) + " vs offset " + shape_str(offset.shape()));
  }
  Tensor y = xv;
  const std::size_t cols = xv.cols();
  for (std::size_t c = 0; c < cols; ++c) {
    const double o = offset[c];
    if (o == 0.0) continue;
    for (std::size_t r = 0; r < xv.rows(); ++r) y.at(r, c) += o;
  }
  return detail::tape_of(x).record(std::move(y), {x}, [x](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

// Quantized inference with per-channel offsets added at hook points.
class CorrectedHooks : public QuantHooks {
 public:
  CorrectedHooks(const QuantizedModel& qm, const AcmSet& acm) : QuantHooks(qm), acm_(acm) {}

  Var hook_point(std::size_t id, Var x) override {
    const AcmCorrection* c = acm_.find(id);
    return c ? add_row_offset(x, c->offset) : x;
  }

 private:
  const AcmSet& acm_;
};

inline ForwardTrace corrected_forward(const QuantizedModel& qm, const AcmSet& acm, const Tensor& images,
                                      bool trace_requested = false) {
  acm.validate(qm.config);
  CorrectedHooks hooks(qm, acm);
  return forward(qm.weights, qm.config, images, trace_requested, &hooks);
}

// Mean over rows (all tokens of all images) of an activation [R x C].
inline Tensor column_means(const Tensor& x) {
  require_rank(x, 2, "column_means");
  Tensor m({x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) m[c] += x.at(r, c);
  }
  for (double& v : m.data()) v /= static_cast<double>(x.rows());
  return m;
}

// Per-channel mean of (full precision - quantized) activations at each hook point.
// Hooks are handled in order; the quantized pass for hook i already applies the
// corrections of earlier hooks, matching corrected_forward.
inline AcmSet compute_acm(const ViTModel& fp, const QuantizedModel& qm, const std::vector<Tensor>& samples,
                          const HookSpec& spec = {}) {
  if (samples.empty()) throw std::invalid_argument("compute_acm: empty sample set");
  if (fp.config().hidden_dim != qm.config.hidden_dim || fp.config().num_layers != qm.config.num_layers ||
      fp.config().num_classes != qm.config.num_classes) {
    throw std::invalid_argument("compute_acm: quantized model does not match the full-precision model");
  }
  const ViTConfig& cfg = qm.config;
  const Tensor images = stack_images(samples);
  const ForwardTrace ref = forward(fp, images, true);
  AcmSet acm;
  acm.gamma = spec.gamma;
  acm.sample_count = samples.size();
  for (std::size_t id : hook_points(cfg, spec)) {
    const ForwardTrace q = corrected_forward(qm, acm, images, true);
    Tensor diff = column_means(ref.hooks.at(id));
    const Tensor qmean = column_means(q.hooks.at(id));
    if (diff.size() != hook_channels(cfg, id)) throw ShapeError("compute_acm: hook dimension mismatch");
    for (std::size_t c = 0; c < diff.size(); ++c) diff[c] -= qmean[c];
    acm.corrections.push_back({id, std::move(diff)});
  }
  return acm;
}

inline void save_acm(const AcmSet& acm, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors{
      {"acm.meta", Tensor::vector({static_cast<double>(acm.gamma), static_cast<double>(acm.sample_count)})}};
  for (const auto& c : acm.corrections) tensors.push_back({"acm.hook" + std::to_string(c.hook), c.offset});
  write_tensor_file(path, tensors);
}

inline AcmSet load_acm(const std::filesystem::path& path, const ViTConfig& cfg) {
  const auto tensors = read_tensor_file(path);
  const Tensor& meta = find_tensor(tensors, "acm.meta");
  if (meta.size() != 2) throw CheckpointShapeError("acm.meta must hold 2 values");
  AcmSet acm;
  acm.gamma = static_cast<std::size_t>(meta[0]);
  acm.sample_count = static_cast<std::size_t>(meta[1]);
  const std::string prefix = "acm.hook";
  for (const auto& nt : tensors) {
    if (nt.name.rfind(prefix, 0) != 0) continue;
    acm.corrections.push_back({std::stoul(nt.name.substr(prefix.size())), nt.tensor});
  }
  std::sort(acm.corrections.begin(), acm.corrections.end(),
            [](const AcmCorrection& a, const AcmCorrection& b) { return a.hook < b.hook; });
  acm.validate(cfg);
  return acm;
}

}  // namespace dfqvit
