#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/adam.hpp"
#include "dfqvit/autodiff.hpp"
#include "dfqvit/checkpoint.hpp"
#include "dfqvit/dataset.hpp"
#include "dfqvit/kde.hpp"
#include "dfqvit/random.hpp"
#include "dfqvit/vit.hpp"

namespace dfqvit {

class SynthesisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- losses ---------------------------------------------------------------

// Rows scaled to unit length; the norm is sqrt(|u|^2 + eps^2) so zero rows stay finite.
inline Var normalize_rows(Var x, double eps = 1e-12) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "normalize_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor y(xv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = eps * eps;
    for (double v : xv.row(r)) ss += v * v;
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c) y.at(r, c) = xv.at(r, c) / norms[r];
  }
  Tensor yc = y;
  return detail::tape_of(x).record(std::move(y), {x},
                                   [x, yv = std::move(yc), norms, rows, cols](Tape& t, const Tensor& g) {
                                     Tensor* gx = t.grad_sink(x);
                                     if (!gx) return;
                                     for (std::size_t r = 0; r < rows; ++r) {
                                       double dot = 0.0;
                                       for (std::size_t c = 0; c < cols; ++c) dot += yv.at(r, c) * g.at(r, c);
                                       for (std::size_t c = 0; c < cols; ++c) {
                                         gx->at(r, c) += (g.at(r, c) - yv.at(r, c) * dot) / norms[r];
                                       }
                                     }
                                   });
}

// Cosine similarity between every pair of rows of tokens [N x D].
inline Var patch_similarity(Var tokens) {
  Var u = normalize_rows(tokens);
  return matmul(u, transpose(u));
}

// Entries above the diagonal of a square matrix, row by row: N(N-1)/2 values.
inline Var upper_triangle(Var m) {
  const Tensor& mv = m.value();
  require_rank(mv, 2, "upper_triangle");
  const std::size_t n = mv.rows();
  if (mv.cols() != n) throw ShapeError("upper_triangle: matrix " + shape_str(mv.shape()) + " is not square");
  if (n < 2) throw ShapeError("upper_triangle: need at least 2 rows");
  Tensor out({n * (n - 1) / 2});
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) out[k++] = mv.at(i, j);
  }
  return detail::tape_of(m).record(std::move(out), {m}, [m, n](Tape& t, const Tensor& g) {
    Tensor* gm = t.grad_sink(m);
    if (!gm) return;
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) gm->at(i, j) += g[k++];
    }
  });
}

// Stacks scalar variables into a vector.
inline Var stack_scalars(const std::vector<Var>& parts) {
  std::vector<Var> rows;
  rows.reserve(parts.size());
  for (const Var& p : parts) rows.push_back(reshape(p, {1}));
  return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

// Negated sum over layers of the entropy of each layer's patch-similarity values,
// one entry per image. `msa_outputs` hold [B*N x D] per layer; a class token, if
// present, is left out of the similarity matrix.
inline Var pse_loss(std::span<const Var> msa_outputs, const ViTConfig& cfg, const KdeOptions& kde = {}) {
  if (msa_outputs.size() != cfg.num_layers) {
    throw std::invalid_argument("pse_loss: " + std::to_string(msa_outputs.size()) + " MSA outputs for " +
                                std::to_string(cfg.num_layers) + " layers");
  }
  const std::size_t n = cfg.num_tokens();
  const std::size_t skip = cfg.use_cls_token ? 1 : 0;
  const std::size_t batch = msa_outputs[0].value().rows() / n;
  std::vector<Var> per_image;
  for (std::size_t b = 0; b < batch; ++b) {
    Var acc;
    for (const Var& out : msa_outputs) {
      Var tokens = slice(out, 0, b * n + skip, (b + 1) * n);
      Var d = differential_entropy(upper_triangle(patch_similarity(tokens)), kde);
      acc = acc.valid() ? add(acc, d) : d;
    }
    per_image.push_back(scale(acc, -1.0));
  }
  return stack_scalars(per_image);
}

// Cross-entropy of each image's logits against its target class, [B].
inline Var one_hot_loss(Var logits, std::span<const int> classes) { return cross_entropy_rows(logits, classes); }

// Anisotropic total variation per image of [B x C x H x W] (or one [C x H x W]),
// summed over channels and divided by H*W.
inline Var tv_loss(Var images) {
  const Tensor& x = images.value();
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("tv_loss: expected image(s), got " + shape_str(x.shape()));
  const std::size_t batch = x.rank() == 4 ? x.dim(0) : 1;
  const std::size_t ch = x.dim(x.rank() - 3), h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h < 2 || w < 2) throw ShapeError("tv_loss: image must be at least 2x2, got " + shape_str(x.shape()));
  const double inv = 1.0 / static_cast<double>(h * w);
  Tensor out({batch});
  const std::size_t per = ch * h * w;
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < ch; ++c) {
      const double* p = x.data().data() + b * per + c * h * w;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          if (i + 1 < h) s += std::fabs(p[(i + 1) * w + j] - p[i * w + j]);
          if (j + 1 < w) s += std::fabs(p[i * w + j + 1] - p[i * w + j]);
        }
      }
    }
    out[b] = s * inv;
  }
  return detail::tape_of(images).record(std::move(out), {images}, [images, batch, ch, h, w, per, inv](Tape& t,
                                                                                                    const Tensor& g) {
    Tensor* gx = t.grad_sink(images);
    if (!gx) return;
    const Tensor& x = t.value(images);
    auto sgn = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    for (std::size_t b = 0; b < batch; ++b) {
      const double gb = g[b] * inv;
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t base = b * per + c * h * w;
        const double* p = x.data().data() + base;
        double* q = gx->data().data() + base;
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            if (i + 1 < h) {
              const double s = gb * sgn(p[(i + 1) * w + j] - p[i * w + j]);
              q[(i + 1) * w + j] += s;
              q[i * w + j] -= s;
            }
            if (j + 1 < w) {
              const double s = gb * sgn(p[i * w + j + 1] - p[i * w + j]);
              q[i * w + j + 1] += s;
              q[i * w + j] -= s;
            }
          }
        }
      }
    }
  });
}

struct LossWeights {
  double alpha = 1.0;  // one-hot
  double beta = 0.05;  // total variation
};

struct LossTerms {
  Var pse, one_hot, tv, total;  // each [B]
};

// L_PSE + alpha * L_OH + beta * L_TV per image. `fv` must carry MSA outputs.
inline LossTerms total_loss(const ForwardVars& fv, Var images, std::span<const int> classes, const ViTConfig& cfg,
                            const LossWeights& w = {}, const KdeOptions& kde = {}) {
  LossTerms lt;
  lt.pse = pse_loss(fv.msa_outputs, cfg, kde);
  lt.one_hot = one_hot_loss(fv.logits, classes);
  lt.tv = tv_loss(images);
  lt.total = add(add(lt.pse, scale(lt.one_hot, w.alpha)), scale(lt.tv, w.beta));
  return lt;
}

// ---- crop schedule --------------------------------------------------------

// Cosine decay of the crop scale from hi (t = 0) to lo (t = T).
inline double e2h_schedule(std::size_t t, std::size_t total, double lo, double hi) {
  if (total == 0) throw std::invalid_argument("e2h_schedule: T must be >= 1");
  if (t > total) {
    throw std::out_of_range("e2h_schedule: t=" + std::to_string(t) + " exceeds T=" + std::to_string(total));
  }
  if (t == total) return lo;
  return lo + (hi - lo) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total))) /
                  2.0;
}

struct CropRecord {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  double area_fraction = 1.0;
  double aspect = 1.0;  // width / height before rounding
};

struct CropOptions {
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
};

// Crop geometry on an h x w canvas. Always consumes four uniform draws.
inline CropRecord sample_crop(std::size_t h, std::size_t w, double min_scale, double max_scale, Rng& rng,
                              const CropOptions& opt = {}) {
  if (!(min_scale > 0.0) || min_scale > max_scale || max_scale > 1.0) {
    throw std::invalid_argument("sample_crop: need 0 < min_scale <= max_scale <= 1");
  }
  const double u_area = uniform01(rng), u_aspect = uniform01(rng), u_top = uniform01(rng), u_left = uniform01(rng);
  CropRecord c;
  c.area_fraction = min_scale + (max_scale - min_scale) * u_area;
  const double area = c.area_fraction * static_cast<double>(h * w);
  const double lo = std::log(opt.min_aspect), hi = std::log(opt.max_aspect);
  double aspect = std::exp(lo + (hi - lo) * u_aspect);
  // Keep the crop inside the canvas: width <= w and height <= h.
  const double fit_lo = area / static_cast<double>(h * h), fit_hi = static_cast<double>(w * w) / area;
  aspect = std::clamp(aspect, std::max(opt.min_aspect, fit_lo), std::max(std::min(opt.max_aspect, fit_hi), fit_lo));
  c.aspect = aspect;
  c.width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area * aspect))), 1, w);
  c.height = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area / aspect))), 1, h);
  c.top = std::min(static_cast<std::size_t>(u_top * static_cast<double>(h - c.height + 1)), h - c.height);
  c.left = std::min(static_cast<std::size_t>(u_left * static_cast<double>(w - c.width + 1)), w - c.width);
  return c;
}

namespace detail {

// Bilinear sampling positions (half-pixel centres) for one axis.
struct ResampleAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};

inline ResampleAxis resample_axis(std::size_t offset, std::size_t in, std::size_t out) {
  ResampleAxis ax;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    ax.i0.push_back(offset + lo);
    ax.i1.push_back(offset + std::min(lo + 1, in - 1));
    ax.w1.push_back(src - static_cast<double>(lo));
  }
  return ax;
}

}  // namespace detail

// Crops each image of [B x C x H x W] by its own record and resizes bilinearly to out_h x out_w.
inline Var crop_resize(Var images, std::span<const CropRecord> crops, std::size_t out_h, std::size_t out_w) {
  const Tensor& x = images.value();
  if (x.rank() != 4) throw ShapeError("crop_resize: expected [B x C x H x W], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (crops.size() != batch) throw ShapeError("crop_resize: one crop record per image required");
  std::vector<detail::ResampleAxis> rows, cols;
  for (const CropRecord& c : crops) {
    if (c.height == 0 || c.width == 0 || c.top + c.height > h || c.left + c.width > w) {
      throw std::out_of_range("crop_resize: crop outside the image");
    }
    rows.push_back(detail::resample_axis(c.top, c.height, out_h));
    cols.push_back(detail::resample_axis(c.left, c.width, out_w));
  }
  Tensor out({batch, ch, out_h, out_w});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& ry = rows[b];
    const auto& cx = cols[b];
    for (std::size_t c = 0; c < ch; ++c) {
      const double* src = x.data().data() + (b * ch + c) * h * w;
      double* dst = out.data().data() + (b * ch + c) * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const double wy = ry.w1[i];
        const double* r0 = src + ry.i0[i] * w;
        const double* r1 = src + ry.i1[i] * w;
        for (std::size_t j = 0; j < out_w; ++j) {
          const double wx = cx.w1[j];
          const double top = (1.0 - wx) * r0[cx.i0[j]] + wx * r0[cx.i1[j]];
          const double bot = (1.0 - wx) * r1[cx.i0[j]] + wx * r1[cx.i1[j]];
          dst[i * out_w + j] = (1.0 - wy) * top + wy * bot;
        }
      }
    }
  }
  return detail::tape_of(images).record(
      std::move(out), {images}, [images, rows, cols, batch, ch, h, w, out_h, out_w](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_sink(images);
        if (!gx) return;
        for (std::size_t b = 0; b < batch; ++b) {
          const auto& ry = rows[b];
          const auto& cx = cols[b];
          for (std::size_t c = 0; c < ch; ++c) {
            double* dst = gx->data().data() + (b * ch + c) * h * w;
            const double* src = g.data().data() + (b * ch + c) * out_h * out_w;
            for (std::size_t i = 0; i < out_h; ++i) {
              const double wy = ry.w1[i];
              double* r0 = dst + ry.i0[i] * w;
              double* r1 = dst + ry.i1[i] * w;
              for (std::size_t j = 0; j < out_w; ++j) {
                const double wx = cx.w1[j];
                const double gv = src[i * out_w + j];
                r0[cx.i0[j]] += (1.0 - wy) * (1.0 - wx) * gv;
                r0[cx.i1[j]] += (1.0 - wy) * wx * gv;
                r1[cx.i0[j]] += wy * (1.0 - wx) * gv;
                r1[cx.i1[j]] += wy * wx * gv;
              }
            }
          }
        }
      });
}

struct CroppedImage {
  Tensor image;
  CropRecord crop;
};

// Random crop of a [C x H x W] image with area fraction in [min_scale, max_scale],
// resized back to H x W.
inline CroppedImage random_resized_crop(const Tensor& image, double min_scale, double max_scale, Rng& rng,
                                        const CropOptions& opt = {}) {
  require_rank(image, 3, "random_resized_crop");
  const std::size_t h = image.dim(1), w = image.dim(2);
  CroppedImage out;
  out.crop = sample_crop(h, w, min_scale, max_scale, rng, opt);
  Tape tape;
  Var x = tape.constant(image.reshaped({1, image.dim(0), h, w}));
  const CropRecord crops[] = {out.crop};
  out.image = crop_resize(x, crops, h, w).value().reshaped(image.shape());
  return out;
}

// ---- synthesis loop -------------------------------------------------------

enum class CropStrategy { e2h, fixed };

inline const char* strategy_name(CropStrategy s) { return s == CropStrategy::e2h ? "e2h" : "fixed"; }

inline CropStrategy parse_strategy(const std::string& s) {
  if (s == "e2h") return CropStrategy::e2h;
  if (s == "fixed") return CropStrategy::fixed;
  throw std::invalid_argument("unknown crop strategy '" + s + "' (expected e2h or fixed)");
}

struct SynthesisConfig {
  std::size_t iterations = 500;
  LossWeights weights;
  double delta_lo = 0.08;
  double delta_hi = 1.0;
  double lr = 0.25;
  CropStrategy strategy = CropStrategy::e2h;
  bool clamp_pixels = true;  // keep the canvas in [0, 1] after every step
  double init_mean = kInitMean;
  double init_std = kInitStd;
  CropOptions crop;
  KdeOptions kde;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations == 0) throw std::invalid_argument("synthesis: iterations must be >= 1");
    if (!(delta_lo > 0.0) || delta_lo > delta_hi || delta_hi > 1.0) {
      throw std::invalid_argument("synthesis: need 0 < delta_lo <= delta_hi <= 1");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("synthesis: lr must be positive");
    if (!(init_std >= 0.0)) throw std::invalid_argument("synthesis: init_std must be >= 0");
  }

  double crop_scale(std::size_t t) const {
    return strategy == CropStrategy::e2h ? e2h_schedule(t, iterations, delta_lo, delta_hi) : delta_hi;
  }
};

struct LossValues {
  double pse = 0.0, one_hot = 0.0, tv = 0.0, total = 0.0;
};

struct SampleResult {
  Tensor image;    // [3 x S x S]
  Tensor initial;  // x_0
  int label = 0;
  std::size_t index = 0;
  std::uint64_t seed = 0;
  LossValues final_loss;              // on the uncropped final image
  std::vector<double> loss_history;   // L_TOTAL of each iteration's crop
  std::vector<CropRecord> crops;
};

inline std::vector<int> round_robin_classes(std::size_t count, std::size_t num_classes) {
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<int>(i % num_classes);
  return out;
}

inline std::uint64_t sample_seed(std::uint64_t base, std::size_t index) {
  return derive_seed(base, {0x5A11, static_cast<std::uint64_t>(index)});
}

// Per-pixel N(mean, std^2) clipped to [0, 1].
inline Tensor init_canvas(std::size_t size, double mean, double std, Rng& rng) {
  std::normal_distribution<double> nd(mean, std);
  Tensor img({3, size, size});
  for (double& v : img.data()) v = std::clamp(nd(rng), 0.0, 1.0);
  return img;
}

inline std::vector<LossValues> loss_values(const LossTerms& lt) {
  std::vector<LossValues> out(lt.total.value().size());
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b] = {lt.pse.value()[b], lt.one_hot.value()[b], lt.tv.value()[b], lt.total.value()[b]};
  }
  return out;
}

// Loss components of finished images [B x 3 x S x S] without cropping.
inline std::vector<LossValues> evaluate_losses(const ViTModel& model, const Tensor& images,
                                               std::span<const int> classes, const SynthesisConfig& cfg) {
  Tape tape;
  ModelParams<Var> p = bind(tape, model.params(), false);
  Var x = tape.constant(images);
  ForwardVars fv = forward(x, p, model.config(), nullptr, true);
  return loss_values(total_loss(fv, x, classes, model.config(), cfg.weights, cfg.kde));
}

using SynthesisProgress = std::function<void(std::size_t t, std::span<const double> totals)>;

// Optimises one canvas per (index, class) pair jointly in a single batch. Each
// sample's random stream depends only on (cfg.seed, index), and the batched loss
// is a sum of per-image losses, so results do not depend on which samples share a batch.
inline std::vector<SampleResult> synthesize_samples(const ViTModel& model, const SynthesisConfig& cfg,
                                                    std::span<const std::size_t> indices,
                                                    std::span<const int> classes,
                                                    const SynthesisProgress& progress = {}) {
  cfg.validate();
  if (indices.empty()) throw std::invalid_argument("synthesis: no samples requested");
  if (indices.size() != classes.size()) throw std::invalid_argument("synthesis: one class per sample required");
  const ViTConfig& mc = model.config();
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= mc.num_classes) {
      throw std::out_of_range("synthesis: class " + std::to_string(c) + " outside [0, " +
                              std::to_string(mc.num_classes) + ")");
    }
  }
  const std::size_t batch = indices.size(), s = mc.image_size, per = 3 * s * s;
  std::vector<SampleResult> res(batch);
  std::vector<Rng> rngs;
  Tensor canvas({batch, 3, s, s});
  for (std::size_t b = 0; b < batch; ++b) {
    res[b].index = indices[b];
    res[b].label = classes[b];
    res[b].seed = sample_seed(cfg.seed, indices[b]);
    rngs.emplace_back(res[b].seed);
    res[b].initial = init_canvas(s, cfg.init_mean, cfg.init_std, rngs[b]);
    std::copy(res[b].initial.data().begin(), res[b].initial.data().end(), canvas.data().begin() + b * per);
    res[b].loss_history.reserve(cfg.iterations);
    res[b].crops.reserve(cfg.iterations);
  }

  AdamState state(canvas.shape());
  AdamOptions adam;
  adam.lr = cfg.lr;
  std::vector<CropRecord> crops(batch);
  std::vector<double> totals(batch);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const double scale_t = cfg.crop_scale(t);
    for (std::size_t b = 0; b < batch; ++b) {
      crops[b] = sample_crop(s, s, scale_t, cfg.delta_hi, rngs[b], cfg.crop);
      res[b].crops.push_back(crops[b]);
    }
    Tape tape;
    ModelParams<Var> p = bind(tape, model.params(), false);
    Var x = tape.variable(canvas);
    Var view = crop_resize(x, crops, s, s);
    ForwardVars fv = forward(view, p, mc, nullptr, true);
    LossTerms lt = total_loss(fv, view, classes, mc, cfg.weights, cfg.kde);
    for (std::size_t b = 0; b < batch; ++b) {
      totals[b] = lt.total.value()[b];
      if (!std::isfinite(totals[b])) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "synthesis diverged at t=%zu for sample %zu: L_PSE=%g L_OH=%g L_TV=%g L_TOTAL=%g", t,
                      indices[b], lt.pse.value()[b], lt.one_hot.value()[b], lt.tv.value()[b], totals[b]);
        throw SynthesisError(buf);
      }
      res[b].loss_history.push_back(totals[b]);
    }
    tape.backward(sum(lt.total));
    adam_step(canvas, tape.grad(x), state, adam);
    if (cfg.clamp_pixels) {
      for (double& v : canvas.data()) v = std::clamp(v, 0.0, 1.0);
    }
    if (progress) progress(t, totals);
  }

  const auto finals = evaluate_losses(model, canvas, classes, cfg);
  for (std::size_t b = 0; b < batch; ++b) {
    res[b].image = Tensor({3, s, s}, std::vector<double>(canvas.data().begin() + b * per,
                                                         canvas.data().begin() + (b + 1) * per));
    res[b].final_loss = finals[b];
  }
  return res;
}

inline SampleResult synthesize_sample(const ViTModel& model, const SynthesisConfig& cfg, int label,
                                      std::size_t index = 0) {
  const std::size_t idx[] = {index};
  const int cls[] = {label};
  return synthesize_samples(model, cfg, idx, cls)[0];
}

// `count` samples with round-robin classes, optimised in batches of at most `batch_size`.
inline std::vector<SampleResult> synthesize_batch(const ViTModel& model, const SynthesisConfig& cfg,
                                                  std::size_t count, std::size_t batch_size = 16,
                                                  const SynthesisProgress& progress = {}) {
  if (count == 0) throw std::invalid_argument("synthesize_batch: count must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("synthesize_batch: batch_size must be >= 1");
  const auto classes = round_robin_classes(count, model.config().num_classes);
  std::vector<SampleResult> out;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t n = std::min(batch_size, count - start);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    auto part = synthesize_samples(model, cfg, idx, std::span(classes).subspan(start, n), progress);
    for (auto& r : part) out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<Tensor> sample_images(const std::vector<SampleResult>& samples) {
  std::vector<Tensor> out;
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

// ---- sample files ---------------------------------------------------------

// Binary P6 preview with values clamped to [0, 1].
inline void write_ppm(const Tensor& image, const std::filesystem::path& path) {
  require_rank(image, 3, "write_ppm");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << "P6\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image[c * plane + i], 0.0, 1.0);
      f.put(static_cast<char>(std::lround(v * 255.0)));
    }
  }
}

struct SampleSet {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

// Writes samples.ckpt, one PPM preview per sample and manifest.txt into `dir`.
inline void write_samples(const std::vector<SampleResult>& samples, const SynthesisConfig& cfg,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> tensors;
  Tensor labels({samples.size()});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    tensors.push_back({"sample" + std::to_string(i), samples[i].image});
    labels[i] = samples[i].label;
  }
  tensors.push_back({"labels", labels});
  write_tensor_file(dir / "samples.ckpt", tensors);

  std::ostringstream m;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "strategy %s iterations %zu lr %.17g alpha %.17g beta %.17g delta_lo %.17g delta_hi %.17g seed %llu\n",
                strategy_name(cfg.strategy), cfg.iterations, cfg.lr, cfg.weights.alpha, cfg.weights.beta,
                cfg.delta_lo, cfg.delta_hi, static_cast<unsigned long long>(cfg.seed));
  m << buf;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "sample%02zu.ppm", i);
    write_ppm(s.image, dir / name);
    std::snprintf(buf, sizeof buf,
                  "sample %zu index %zu seed %llu class %d pse %.17g one_hot %.17g tv %.17g total %.17g\n", i,
                  s.index, static_cast<unsigned long long>(s.seed), s.label, s.final_loss.pse,
                  s.final_loss.one_hot, s.final_loss.tv, s.final_loss.total);
    m << buf;
  }
  std::ofstream f(dir / "manifest.txt");
  if (!f) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  f << m.str();
}

inline SampleSet read_samples(const std::filesystem::path& dir) {
  const auto tensors = read_tensor_file(dir / "samples.ckpt");
  const Tensor& labels = find_tensor(tensors, "labels");
  SampleSet set;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    set.images.push_back(find_tensor(tensors, "sample" + std::to_string(i)));
    set.labels.push_back(static_cast<int>(labels[i]));
  }
  return set;
}

}  // namespace dfqvit
