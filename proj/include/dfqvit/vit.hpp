#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/autodiff.hpp"
#include "dfqvit/random.hpp"
#include "dfqvit/tensor.hpp"

namespace dfqvit {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  bool use_cls_token = false;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t num_tokens() const { return num_patches() + (use_cls_token ? 1 : 0); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t mlp_dim() const { return hidden_dim * mlp_ratio; }

  void validate() const {
    if (!image_size || !patch_size || !hidden_dim || !num_layers || !num_heads || !mlp_ratio ||
        !num_classes) {
      throw std::invalid_argument("ViTConfig: all dimensions must be >= 1");
    }
    if (image_size % patch_size) {
      throw std::invalid_argument("ViTConfig: patch_size " + std::to_string(patch_size) +
                                  " does not divide image_size " + std::to_string(image_size));
    }
    if (hidden_dim % num_heads) {
      throw std::invalid_argument("ViTConfig: num_heads " + std::to_string(num_heads) +
                                  " does not divide hidden_dim " + std::to_string(hidden_dim));
    }
  }

  bool operator==(const ViTConfig&) const = default;
};

template <class T>
struct LinearParams {
  T weight;  // [in x out]
  T bias;    // [out]
};

template <class T>
struct BlockParams {
  T norm1_gain, norm1_bias;
  LinearParams<T> q, k, v, proj;
  T norm2_gain, norm2_bias;
  LinearParams<T> fc1, fc2;
};

// Weights of the whole network, parameterised over storage (Tensor) or tape handles (Var).
template <class T>
struct ModelParams {
  LinearParams<T> patch;
  bool has_cls = false;
  T cls_token;  // [1 x D], only when has_cls
  T pos_embed;  // [N x D]
  std::vector<BlockParams<T>> blocks;
  T norm_gain, norm_bias;
  LinearParams<T> head;
};

// Calls f(name, param) for every parameter in canonical checkpoint order.
template <class P, class F>
void visit_params(P& p, F&& f) {
  f(std::string("patch_embed.weight"), p.patch.weight);
  f(std::string("patch_embed.bias"), p.patch.bias);
  if (p.has_cls) f(std::string("cls_token"), p.cls_token);
  f(std::string("pos_embed"), p.pos_embed);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    f(pre + "norm1.gain", b.norm1_gain);
    f(pre + "norm1.bias", b.norm1_bias);
    f(pre + "attn.wq", b.q.weight);
    f(pre + "attn.bq", b.q.bias);
    f(pre + "attn.wk", b.k.weight);
    f(pre + "attn.bk", b.k.bias);
    f(pre + "attn.wv", b.v.weight);
    f(pre + "attn.bv", b.v.bias);
    f(pre + "attn.wo", b.proj.weight);
    f(pre + "attn.bo", b.proj.bias);
    f(pre + "norm2.gain", b.norm2_gain);
    f(pre + "norm2.bias", b.norm2_bias);
    f(pre + "mlp.w1", b.fc1.weight);
    f(pre + "mlp.b1", b.fc1.bias);
    f(pre + "mlp.w2", b.fc2.weight);
    f(pre + "mlp.b2", b.fc2.bias);
  }
  f(std::string("norm.gain"), p.norm_gain);
  f(std::string("norm.bias"), p.norm_bias);
  f(std::string("head.weight"), p.head.weight);
  f(std::string("head.bias"), p.head.bias);
}

// Every matmul weight, in forward order: patch embedding, per block q/k/v/proj/fc1/fc2, head.
template <class P, class F>
void visit_linear_weights(P& p, F&& f) {
  f(std::string("patch_embed.weight"), p.patch.weight);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    f(pre + "attn.wq", b.q.weight);
    f(pre + "attn.wk", b.k.weight);
    f(pre + "attn.wv", b.v.weight);
    f(pre + "attn.wo", b.proj.weight);
    f(pre + "mlp.w1", b.fc1.weight);
    f(pre + "mlp.w2", b.fc2.weight);
  }
  f(std::string("head.weight"), p.head.weight);
}

// Inputs of quantizable linear layers. q/k/v read the same tensor and share one site.
namespace site {
inline std::size_t patch_embed() { return 0; }
inline std::size_t qkv(std::size_t block) { return 1 + 4 * block; }
inline std::size_t proj(std::size_t block) { return 2 + 4 * block; }
inline std::size_t fc1(std::size_t block) { return 3 + 4 * block; }
inline std::size_t fc2(std::size_t block) { return 4 + 4 * block; }
inline std::size_t head(const ViTConfig& c) { return 1 + 4 * c.num_layers; }
inline std::size_t count(const ViTConfig& c) { return 2 + 4 * c.num_layers; }
}  // namespace site

inline std::vector<std::string> activation_site_names(const ViTConfig& c) {
  std::vector<std::string> names{"patch_embed.in"};
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    const std::string pre = "block" + std::to_string(i) + ".";
    names.push_back(pre + "attn.qkv_in");
    names.push_back(pre + "attn.proj_in");
    names.push_back(pre + "mlp.fc1_in");
    names.push_back(pre + "mlp.fc2_in");
  }
  names.push_back("head.in");
  return names;
}

// Activation hook points: 0..L-1 residual stream after each block, L the final
// layer-norm output, L+1 the logits.
namespace hook {
inline std::size_t block_out(std::size_t block) { return block; }
inline std::size_t final_norm(const ViTConfig& c) { return c.num_layers; }
inline std::size_t logits(const ViTConfig& c) { return c.num_layers + 1; }
inline std::size_t count(const ViTConfig& c) { return c.num_layers + 2; }
}  // namespace hook

inline std::string hook_name(const ViTConfig& c, std::size_t id) {
  if (id < c.num_layers) return "block" + std::to_string(id) + ".out";
  if (id == hook::final_norm(c)) return "norm.out";
  if (id == hook::logits(c)) return "logits";
  throw std::out_of_range("hook id " + std::to_string(id) + " out of range");
}

inline std::size_t hook_channels(const ViTConfig& c, std::size_t id) {
  if (id <= hook::final_norm(c)) return c.hidden_dim;
  if (id == hook::logits(c)) return c.num_classes;
  throw std::out_of_range("hook id " + std::to_string(id) + " out of range");
}

class ViTModel {
 public:
  ViTModel() = default;

  // Parameters drawn from N(0, 0.02^2); biases zero, layer-norm gains one.
  static ViTModel init(const ViTConfig& config, std::uint64_t seed) {
    ViTModel m = zeros(config);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    visit_params(m.params_, [&](const std::string& name, Tensor& t) {
      const bool is_gain = name.ends_with(".gain");
      const bool is_bias = name.ends_with(".bias") || name.ends_with(".bq") ||
                           name.ends_with(".bk") || name.ends_with(".bv") ||
                           name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2");
      if (is_gain) {
        t.fill(1.0);
      } else if (!is_bias) {
        for (double& v : t.data()) v = normal(rng);
      }
    });
    return m;
  }

  // Every parameter zero.
  static ViTModel zeros(const ViTConfig& config) {
    config.validate();
    ViTModel m;
    m.config_ = config;
    const std::size_t d = config.hidden_dim, f = config.mlp_dim();
    auto lin = [](std::size_t in, std::size_t out) {
      return LinearParams<Tensor>{Tensor({in, out}), Tensor({out})};
    };
    auto& p = m.params_;
    p.patch = lin(config.patch_dim(), d);
    p.has_cls = config.use_cls_token;
    if (p.has_cls) p.cls_token = Tensor({1, d});
    p.pos_embed = Tensor({config.num_tokens(), d});
    for (std::size_t i = 0; i < config.num_layers; ++i) {
      BlockParams<Tensor> b{Tensor({d}), Tensor({d}), lin(d, d), lin(d, d), lin(d, d), lin(d, d),
                            Tensor({d}), Tensor({d}), lin(d, f), lin(f, d)};
      p.blocks.push_back(std::move(b));
    }
    p.norm_gain = Tensor({d});
    p.norm_bias = Tensor({d});
    p.head = lin(d, config.num_classes);
    return m;
  }

  const ViTConfig& config() const noexcept { return config_; }
  ModelParams<Tensor>& params() noexcept { return params_; }
  const ModelParams<Tensor>& params() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_params(params_, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  // Looks up a parameter by checkpoint name.
  Tensor& param(const std::string& name) {
    Tensor* found = nullptr;
    visit_params(params_, [&](const std::string& n, Tensor& t) {
      if (n == name) found = &t;
    });
    if (!found) throw std::out_of_range("no parameter named '" + name + "'");
    return *found;
  }
  const Tensor& param(const std::string& name) const { return const_cast<ViTModel*>(this)->param(name); }

 private:
  ViTConfig config_;
  ModelParams<Tensor> params_;
};

// Places every parameter on the tape.
inline ModelParams<Var> bind(Tape& tape, const ModelParams<Tensor>& src, bool requires_grad) {
  ModelParams<Var> out;
  out.has_cls = src.has_cls;
  out.blocks.resize(src.blocks.size());
  // Visit both structures in lockstep; the orders are identical by construction.
  std::vector<Var*> slots;
  visit_params(out, [&](const std::string&, Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  visit_params(src, [&](const std::string&, const Tensor& t) {
    *slots[i++] = requires_grad ? tape.variable(t) : tape.constant(t);
  });
  return out;
}

// Interception points used by quantized and corrected inference. Defaults are identities.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  // Input x of the linear layer(s) at activation site `site`.
  virtual Var linear_input(std::size_t site, Var x) {
    (void)site;
    return x;
  }
  // Activation at hook point `id`; the returned value continues through the network.
  virtual Var hook_point(std::size_t id, Var x) {
    (void)id;
    return x;
  }
};

// Splits images [B x 3 x S x S] into flattened patches [B*P x 3*p*p], channel-major within a patch.
inline Var patchify(Var images, const ViTConfig& cfg) {
  const Tensor& x = images.value();
  const std::size_t s = cfg.image_size, p = cfg.patch_size, g = cfg.patches_per_side();
  const bool single = x.rank() == 3;
  if (!((single && x.shape() == Shape{3, s, s}) ||
        (x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == s && x.dim(3) == s))) {
    throw ShapeError("patchify: image shape " + shape_str(x.shape()) + " does not match config " +
                     shape_str({3, s, s}));
  }
  const std::size_t batch = single ? 1 : x.dim(0);
  const std::size_t pd = cfg.patch_dim();
  // index[r * pd + c] = source element of output (r, c)
  auto index = std::make_shared<std::vector<std::size_t>>(batch * g * g * pd);
  Tensor out({batch * g * g, pd});
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t py = 0; py < g; ++py) {
      for (std::size_t px = 0; px < g; ++px) {
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t dy = 0; dy < p; ++dy) {
            for (std::size_t dx = 0; dx < p; ++dx) {
              const std::size_t src = ((b * 3 + c) * s + py * p + dy) * s + px * p + dx;
              (*index)[o] = src;
              out[o++] = x[src];
            }
          }
        }
      }
    }
  }
  return detail::tape_of(images).record(std::move(out), {images}, [images, index](Tape& t, const Tensor& gr) {
    if (Tensor* gi = t.grad_sink(images)) {
      for (std::size_t i = 0; i < gr.size(); ++i) (*gi)[(*index)[i]] += gr[i];
    }
  });
}

// Inserts the class token in front of each image's patch tokens.
inline Var prepend_token(Var tokens, Var cls, std::size_t batch) {
  const Tensor& x = tokens.value();
  const std::size_t d = x.cols(), per = x.rows() / batch;
  Tensor out({batch * (per + 1), d});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(cls.value().data().data(), d, out.row(b * (per + 1)).data());
    std::copy_n(x.row(b * per).data(), per * d, out.row(b * (per + 1) + 1).data());
  }
  return detail::tape_of(tokens).record(std::move(out), {tokens, cls},
                                        [tokens, cls, batch, per, d](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_sink(tokens);
    Tensor* gc = t.grad_sink(cls);
    for (std::size_t b = 0; b < batch; ++b) {
      if (gc) {
        auto src = g.row(b * (per + 1));
        for (std::size_t j = 0; j < d; ++j) (*gc)[j] += src[j];
      }
      if (gx) {
        const double* src = g.row(b * (per + 1) + 1).data();
        double* dst = gx->row(b * per).data();
        for (std::size_t i = 0; i < per * d; ++i) dst[i] += src[i];
      }
    }
  });
}

// Row `offset` of every group of `group` rows.
inline Var select_group_row(Var x, std::size_t group, std::size_t offset) {
  const Tensor& v = x.value();
  const std::size_t groups = v.rows() / group, d = v.cols();
  Tensor out({groups, d});
  for (std::size_t i = 0; i < groups; ++i) std::copy_n(v.row(i * group + offset).data(), d, out.row(i).data());
  return detail::tape_of(x).record(std::move(out), {x}, [x, group, offset, groups, d](Tape& t, const Tensor& g) {
    if (Tensor* gx = t.grad_sink(x)) {
      for (std::size_t i = 0; i < groups; ++i) {
        auto dst = gx->row(i * group + offset);
        for (std::size_t j = 0; j < d; ++j) dst[j] += g.at(i, j);
      }
    }
  });
}

// Single-head scaled dot-product attention softmax(Q K^T / sqrt(d)) V, built from primitive ops.
inline Var attention_head(Var q, Var k, Var v) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 2 || qv.shape() != kv.shape() || kv.dim(0) != vv.dim(0)) {
    throw ShapeError("attention_head: Q " + shape_str(qv.shape()) + ", K " + shape_str(kv.shape()) +
                     ", V " + shape_str(vv.shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qv.dim(1)));
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax(scores, 1), v);
}

// All heads of all images at once. q, k, v are [B*N x D] with heads laid out as
// contiguous column blocks of width D/H; the result keeps that layout, which is
// the concatenation of the per-head outputs.
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads) {
  const Tensor& qv = q.value();
  if (qv.shape() != k.value().shape() || qv.shape() != v.value().shape() || qv.rank() != 2) {
    throw ShapeError("multi_head_attention: Q " + shape_str(qv.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()));
  }
  const std::size_t rows = qv.dim(0), width = qv.dim(1);
  if (batch == 0 || rows % batch || heads == 0 || width % heads) {
    throw ShapeError("multi_head_attention: " + shape_str(qv.shape()) + " not divisible into " +
                     std::to_string(batch) + " images x " + std::to_string(heads) + " heads");
  }
  const std::size_t n = rows / batch, d = width / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto probs = std::make_shared<std::vector<double>>(batch * heads * n * n);

  auto gather = [&](const Tensor& src, std::size_t b, std::size_t h, double* dst) {
    for (std::size_t i = 0; i < n; ++i) std::copy_n(src.row(b * n + i).data() + h * d, d, dst + i * d);
  };

  Tensor out({rows, width});
  std::vector<double> qb(n * d), kb(n * d), vb(n * d), ob(n * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather(qv, b, h, qb.data());
      gather(k.value(), b, h, kb.data());
      gather(v.value(), b, h, vb.data());
      double* p = probs->data() + (b * heads + h) * n * n;
      kernels::gemm_nt(n, d, n, qb.data(), kb.data(), p, false);
      for (std::size_t i = 0; i < n; ++i) {
        double* r = p + i * n;
        double mx = r[0] * inv_sqrt_d;
        for (std::size_t j = 0; j < n; ++j) {
          r[j] *= inv_sqrt_d;
          mx = std::max(mx, r[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          r[j] = std::exp(r[j] - mx);
          s += r[j];
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) r[j] *= inv;
      }
      kernels::gemm_nn(n, n, d, p, vb.data(), ob.data(), false);
      for (std::size_t i = 0; i < n; ++i) std::copy_n(ob.data() + i * d, d, out.row(b * n + i).data() + h * d);
    }
  }

  return detail::tape_of(q).record(
      std::move(out), {q, k, v}, [q, k, v, probs, batch, heads, n, d, inv_sqrt_d](Tape& t, const Tensor& g) {
        Tensor* gq = t.grad_sink(q);
        Tensor* gk = t.grad_sink(k);
        Tensor* gv = t.grad_sink(v);
        std::vector<double> qb(n * d), kb(n * d), vb(n * d), gob(n * d), dp(n * n), tmp(n * d);
        auto gather = [&](const Tensor& src, std::size_t b, std::size_t h, double* dst) {
          for (std::size_t i = 0; i < n; ++i) std::copy_n(src.row(b * n + i).data() + h * d, d, dst + i * d);
        };
        auto scatter_add = [&](Tensor& dst, std::size_t b, std::size_t h, const double* src) {
          for (std::size_t i = 0; i < n; ++i) {
            double* r = dst.row(b * n + i).data() + h * d;
            for (std::size_t j = 0; j < d; ++j) r[j] += src[i * d + j];
          }
        };
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + (b * heads + h) * n * n;
            gather(g, b, h, gob.data());
            if (gv) {
              kernels::gemm_tn(n, n, d, p, gob.data(), tmp.data(), false);
              scatter_add(*gv, b, h, tmp.data());
            }
            if (!gq && !gk) continue;
            gather(t.value(v), b, h, vb.data());
            kernels::gemm_nt(n, d, n, gob.data(), vb.data(), dp.data(), false);
            for (std::size_t i = 0; i < n; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
              for (std::size_t j = 0; j < n; ++j) {
                dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * inv_sqrt_d;
              }
            }
            if (gq) {
              gather(t.value(k), b, h, kb.data());
              kernels::gemm_nn(n, n, d, dp.data(), kb.data(), tmp.data(), false);
              scatter_add(*gq, b, h, tmp.data());
            }
            if (gk) {
              gather(t.value(q), b, h, qb.data());
              kernels::gemm_tn(n, n, d, dp.data(), qb.data(), tmp.data(), false);
              scatter_add(*gk, b, h, tmp.data());
            }
          }
        }
      });
}

struct ForwardVars {
  Var logits;                    // [B x C]
  std::vector<Var> msa_outputs;  // per layer, [B*N x D], after the output projection
  std::vector<Var> hooks;        // per hook id
};

// Multi-head self-attention of one block on already-normalised tokens.
inline Var msa(Var x, const BlockParams<Var>& block, const ViTConfig& cfg, std::size_t batch,
               ForwardHooks* hooks = nullptr, std::size_t block_index = 0) {
  if (hooks) x = hooks->linear_input(site::qkv(block_index), x);
  Var q = linear(x, block.q.weight, block.q.bias);
  Var k = linear(x, block.k.weight, block.k.bias);
  Var v = linear(x, block.v.weight, block.v.bias);
  Var heads = multi_head_attention(q, k, v, batch, cfg.num_heads);
  if (hooks) heads = hooks->linear_input(site::proj(block_index), heads);
  return linear(heads, block.proj.weight, block.proj.bias);
}

// Batch of images [B x 3 x S x S] (or a single [3 x S x S]) to tokens [B*N x D].
inline Var patch_embed(Var images, const ModelParams<Var>& p, const ViTConfig& cfg,
                       ForwardHooks* hooks = nullptr) {
  Var patches = patchify(images, cfg);
  const std::size_t batch = patches.value().rows() / cfg.num_patches();
  if (hooks) patches = hooks->linear_input(site::patch_embed(), patches);
  Var tokens = linear(patches, p.patch.weight, p.patch.bias);
  if (p.has_cls) tokens = prepend_token(tokens, p.cls_token, batch);
  return add_tiled(tokens, p.pos_embed);
}

// Pre-norm transformer: X += MSA(LN(X)); X += MLP(LN(X)); final LN; pool; head.
inline ForwardVars forward(Var images, const ModelParams<Var>& p, const ViTConfig& cfg,
                           ForwardHooks* hooks = nullptr, bool keep_trace = false) {
  ForwardHooks identity;
  ForwardHooks* hk = hooks ? hooks : &identity;
  ForwardVars out;
  Var x = patch_embed(images, p, cfg, hk);
  const std::size_t n = cfg.num_tokens();
  const std::size_t batch = x.value().rows() / n;
  auto at_hook = [&](std::size_t id, Var v) {
    Var r = hk->hook_point(id, v);
    if (keep_trace) out.hooks.push_back(r);
    return r;
  };
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    Var attn = msa(layer_norm(x, b.norm1_gain, b.norm1_bias), b, cfg, batch, hk, i);
    if (keep_trace) out.msa_outputs.push_back(attn);
    x = add(x, attn);
    Var h = hk->linear_input(site::fc1(i), layer_norm(x, b.norm2_gain, b.norm2_bias));
    h = gelu(linear(h, b.fc1.weight, b.fc1.bias));
    h = hk->linear_input(site::fc2(i), h);
    x = add(x, linear(h, b.fc2.weight, b.fc2.bias));
    x = at_hook(hook::block_out(i), x);
  }
  x = at_hook(hook::final_norm(cfg), layer_norm(x, p.norm_gain, p.norm_bias));
  Var pooled = p.has_cls ? select_group_row(x, n, 0) : mean_row_groups(x, n);
  pooled = hk->linear_input(site::head(cfg), pooled);
  out.logits = at_hook(hook::logits(cfg), linear(pooled, p.head.weight, p.head.bias));
  return out;
}

struct ForwardTrace {
  Tensor logits;                    // [B x C]
  std::vector<Tensor> msa_outputs;  // per layer
  std::vector<Tensor> hooks;        // per hook id
};

inline ForwardTrace forward(const ModelParams<Tensor>& params, const ViTConfig& cfg, const Tensor& images,
                            bool trace_requested = false, ForwardHooks* hooks = nullptr) {
  Tape tape;
  ModelParams<Var> p = bind(tape, params, false);
  ForwardVars fv = forward(tape.constant(images), p, cfg, hooks, trace_requested);
  ForwardTrace tr;
  tr.logits = fv.logits.value();
  for (Var v : fv.msa_outputs) tr.msa_outputs.push_back(v.value());
  for (Var v : fv.hooks) tr.hooks.push_back(v.value());
  return tr;
}

inline ForwardTrace forward(const ViTModel& model, const Tensor& images, bool trace_requested = false,
                            ForwardHooks* hooks = nullptr) {
  return forward(model.params(), model.config(), images, trace_requested, hooks);
}

// Image i of a batch [B x 3 x S x S] as a [1 x 3 x S x S] tensor.
inline Tensor batch_item(const Tensor& images, std::size_t i) {
  const std::size_t per = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = 1;
  return Tensor(s, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                       images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
}

// Stacks equally shaped [3 x S x S] (or [1 x 3 x S x S]) images into [B x 3 x S x S].
inline Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty list");
  const std::size_t per = images[0].size();
  const Shape& s0 = images[0].shape();
  Shape out_shape{images.size(), 3, s0[s0.size() - 2], s0.back()};
  std::vector<double> data;
  data.reserve(per * images.size());
  for (const auto& im : images) {
    if (im.size() != per) throw ShapeError("stack_images: mismatched image " + shape_str(im.shape()));
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor(out_shape, std::move(data));
}

}  // namespace dfqvit
