// One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any
// hard criterion fails; criterion 10 is reported but never fails the run.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dfqvit/pipeline.hpp"

using namespace dfqvit;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kRoundTripSlack = 1e-12;  // relative, on the Δ/2 bound
constexpr double kScheduleTol = 1e-15;
constexpr double kGradRelTol = 1e-3;
constexpr double kGradFloor = 1e-7;
constexpr double kFdStep = 1e-6;
constexpr double kEntropyTol = 0.05;
constexpr double kKdeMassTol = 1e-3;
constexpr double kAcmZeroTol = 1e-6;
constexpr double kAlignTol = 1e-10;
constexpr double kFpTarget = 90.0;
constexpr double kFpGap = 8.0;
constexpr double kAcmRatioMax = 1e-3;
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kMinBeats = 4;
constexpr std::size_t kMinLossWins = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int hard_failures = 0;

void report(int id, const char* what, const Outcome& o, double seconds, bool soft = false) {
  const char* verdict = o.pass ? "PASS" : (soft ? "FAIL (soft, recorded only)" : "FAIL");
  std::printf("CRITERION %2d %s: %s; %s [%.1fs]\n", id, verdict, what, o.detail.c_str(), seconds);
  std::fflush(stdout);
  if (!o.pass && !soft) ++hard_failures;
}

template <class F>
void run(int id, const char* what, F&& f, bool soft = false) {
  Stopwatch sw;
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, what, o, sw.seconds(), soft);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void log_line(const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); }

ViTConfig reduced_config() {
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

// Freshly initialised weights are tiny; widen them so every loss term is exercised.
ViTModel perturbed_model(const ViTConfig& cfg, std::uint64_t seed) {
  ViTModel m = ViTModel::init(cfg, seed);
  std::mt19937_64 rng(seed ^ 0xACCE);
  std::normal_distribution<double> n(0.0, 0.3);
  visit_params(m.params(), [&](const std::string& name, Tensor& t) {
    const bool gain = name.find("gain") != std::string::npos;
    for (double& v : t.data()) v = gain ? 1.0 + 0.1 * n(rng) : n(rng);
  });
  return m;
}

std::vector<Tensor> uniform_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t({3, size, size});
    for (double& v : t.data()) v = u(rng);
    out.push_back(t);
  }
  return out;
}

// ---- 1 ----------------------------------------------------------------------

Outcome quantizer_grid() {
  std::size_t checked = 0, bad = 0;
  for (int k : {2, 4, 8}) {
    for (double delta : {0.1, 0.5, 1.0}) {
      for (QuantMode mode : {QuantMode::symmetric, QuantMode::asymmetric}) {
        QuantParams p{k, delta, 0, mode};
        if (mode == QuantMode::asymmetric) p.zero_point = (std::int64_t{1} << k) / 4;
        const double lo = static_cast<double>(p.qmin() - p.zero_point) * delta;
        const double hi = static_cast<double>(p.qmax() - p.zero_point) * delta;
        const double mid = 0.5 * (lo + hi), half = 0.75 * (hi - lo);
        std::int64_t prev = std::numeric_limits<std::int64_t>::min();
        for (int i = 0; i <= 10000; ++i) {
          const double x = mid - half + 2.0 * half * i / 10000.0;
          const std::int64_t q = quantize(x, p);
          const double fq = fake_quantize(x, p);
          bool ok = q >= prev && fake_quantize(fq, p) == fq;
          if (x >= lo && x <= hi) {
            ok = ok && std::fabs(fq - x) <= 0.5 * delta * (1.0 + kRoundTripSlack);
          } else {
            ok = ok && fq == (x < lo ? lo : hi);
          }
          prev = q;
          ++checked;
          bad += ok ? 0 : 1;
        }
      }
    }
  }
  return {bad == 0, fmt("%zu grid points (k in {2,4,8}, delta in {0.1,0.5,1}, both modes), %zu violations", checked, bad)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome schedule_exactness() {
  double worst = 0.0;
  bool monotone = true;
  for (std::size_t total : {1u, 7u, 500u}) {
    for (auto [lo, hi] : {std::pair{0.08, 1.0}, std::pair{0.25, 0.75}}) {
      worst = std::max({worst, std::fabs(e2h_schedule(0, total, lo, hi) - hi),
                        std::fabs(e2h_schedule(total, total, lo, hi) - lo)});
      double prev = hi;
      for (std::size_t t = 0; t <= total; ++t) {
        const double d = e2h_schedule(t, total, lo, hi);
        monotone = monotone && d <= prev;
        prev = d;
      }
    }
  }
  return {worst <= kScheduleTol && monotone,
          fmt("max endpoint error %.3g, nonincreasing: %s", worst, monotone ? "yes" : "no")};
}

// ---- 3 ----------------------------------------------------------------------

double total_loss_of(const ViTModel& m, const Tensor& images, const std::vector<int>& classes, Tensor* grad) {
  Tape tape;
  Var x = grad ? tape.variable(images) : tape.constant(images);
  ForwardVars fv = forward(x, bind(tape, m.params(), false), m.config(), nullptr, true);
  Var loss = sum(total_loss(fv, x, classes, m.config(), LossWeights{}).total);
  const double v = loss.value().item();
  if (grad) {
    tape.backward(loss);
    *grad = tape.grad(x);
  }
  return v;
}

Outcome autodiff_fidelity() {
  double worst = 0.0;
  for (std::uint64_t seed : {101, 202, 303}) {
    const ViTModel m = perturbed_model(reduced_config(), seed);
    Tensor img = stack_images(uniform_images(1, 8, seed));
    for (double& v : img.data()) v = 0.05 + 0.9 * v;
    const std::vector<int> cls{static_cast<int>(seed % 4)};
    Tensor g;
    total_loss_of(m, img, cls, &g);
    for (std::size_t i = 0; i < img.size(); ++i) {
      Tensor xp = img, xm = img;
      xp[i] += kFdStep;
      xm[i] -= kFdStep;
      const double num = (total_loss_of(m, xp, cls, nullptr) - total_loss_of(m, xm, cls, nullptr)) / (2 * kFdStep);
      const double denom = std::max({std::fabs(num), std::fabs(g[i]), kGradFloor});
      worst = std::max(worst, std::fabs(num - g[i]) / denom);
    }
  }
  return {worst < kGradRelTol, fmt("3 seeds x 192 pixels, max relative error %.3g", worst)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome entropy_oracle() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nd;
  std::vector<double> x(500);
  for (double& v : x) v = nd(rng);
  const double h = silverman_bandwidth(x);
  const double est = differential_entropy(x);
  const double oracle = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * (1.0 + h * h));

  std::vector<double> grid;
  const std::size_t n = 40001;
  for (std::size_t j = 0; j < n; ++j) grid.push_back(-10.0 + 20.0 * static_cast<double>(j) / (n - 1));
  const auto f = kde_density(x, h, grid);
  double mass = 0.0;
  for (std::size_t j = 0; j < n; ++j) mass += (j == 0 || j == n - 1 ? 0.5 : 1.0) * f[j];
  mass *= 20.0 / (n - 1);
  return {std::fabs(est - oracle) < kEntropyTol && std::fabs(mass - 1.0) < kKdeMassTol,
          fmt("H=%.4f oracle=%.4f (h=%.4f), integral of density %.6f", est, oracle, h, mass)};
}

// ---- 5 ----------------------------------------------------------------------

Outcome acm_identities() {
  const ViTModel m = perturbed_model(reduced_config(), 55);
  const auto calib = uniform_images(4, 8, 56);
  const HookSpec every{1, true, true};

  QuantConfig full;
  full.bits_w = full.bits_a = 32;
  const AcmSet lossless = compute_acm(m, calibrate(m, calib, full), calib, every);
  double largest = 0.0;
  for (const auto& c : lossless.corrections)
    for (double v : c.offset.data()) largest = std::max(largest, std::fabs(v));

  QuantConfig low;
  low.bits_w = 3;
  low.bits_a = 4;
  const QuantizedModel qm = calibrate(m, calib, low);
  AcmSet zero = compute_acm(m, qm, calib, every);
  for (auto& c : zero.corrections) c.offset.fill(0.0);
  const Tensor batch = stack_images(uniform_images(5, 8, 57));
  const bool identical = bitwise_equal(corrected_forward(qm, zero, batch).logits, quantized_forward(qm, batch).logits);

  const AcmSet acm = compute_acm(m, qm, calib, every);
  const std::size_t first = acm.corrections.front().hook;
  const Tensor cb = stack_images(calib);
  const Tensor fp = column_means(forward(m, cb, true).hooks[first]);
  const Tensor q = column_means(corrected_forward(qm, acm, cb, true).hooks[first]);
  double align = 0.0;
  for (std::size_t c = 0; c < fp.size(); ++c) align = std::max(align, std::fabs(fp[c] - q[c]));

  return {largest < kAcmZeroTol && identical && align < kAlignTol,
          fmt("32-bit max |ACM| %.3g, zero ACM bit-identical: %s, first-hook mean gap %.3g", largest,
              identical ? "yes" : "no", align)};
}

// ---- 6 and 11 -----------------------------------------------------------------

RunConfig lossless_config(const fs::path& dir) {
  RunConfig c;
  c.quant.bits_w = c.quant.bits_a = 32;
  c.acm = false;
  // In-distribution calibration, so that only the bit width separates the arm from FP.
  c.calib_source = CalibSource::real;
  c.out_dir = dir.string();
  return c;
}

void seed_run_dir(const fs::path& dir, const fs::path& fp_ckpt) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::copy_file(fp_ckpt, dir / "fp.ckpt");
}

// ---- 7, 8, 9, 10 --------------------------------------------------------------

struct Study {
  ViTModel fp;
  double fp_acc = 0.0;
  AblationReport ablation;
  CompareReport compare;
  double seconds = 0.0;
};

Study run_study(const RunConfig& base, const fs::path& fp_ckpt) {
  Study s;
  s.fp = load_checkpoint(fp_ckpt);
  const ToyDataset test = test_set(base);
  s.fp_acc = fp_top1(s.fp, test);
  Stopwatch sw;
  std::vector<SeedRun> runs;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    log_line("synthesizing seed " + std::to_string(seed));
    runs.push_back(synthesize_pair(s.fp, base, seed));
  }
  log_line("evaluating ablation arms");
  s.ablation = ablation_from_runs(s.fp, base, runs, test, s.fp_acc);
  for (const auto& r : runs) {
    ComparePair p;
    p.seed = r.seed;
    p.e2h_loss = *r.e2h.mean_final_loss();
    p.fixed_loss = *r.fixed.mean_final_loss();
    for (const auto& e : s.ablation.entries) {
      if (e.seed != r.seed || e.bits_w != 4 || e.bits_a != 8) continue;
      if (e.arm == "+E2H") p.e2h_top1 = e.top1;
      if (e.arm == "Baseline") p.fixed_top1 = e.top1;
    }
    p.shared_init = shared_initialization(r.e2h, r.fixed);
    s.compare.pairs.push_back(p);
  }
  s.seconds = sw.seconds();
  return s;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + fmt("%.1f", x);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string cache_dir = "acceptance_cache";
  app.add_option("--cache-dir", cache_dir, "holds the trained FP model between runs");
  CLI11_PARSE(app, argc, argv);
  const fs::path cache = cache_dir;
  fs::create_directories(cache);

  run(1, "quantizer round trip, clipping, monotonicity, idempotence", quantizer_grid);
  run(2, "E2H schedule endpoints and monotonicity", schedule_exactness);
  run(3, "dL_TOTAL/dpixels vs central differences on the reduced model", autodiff_fidelity);
  run(4, "KDE entropy vs Gaussian oracle and KDE normalization", entropy_oracle);
  run(5, "ACM identities", acm_identities);

  const RunConfig base;
  const fs::path fp_ckpt = cache / "fp.ckpt";
  {
    Stopwatch sw;
    std::fprintf(stderr, "FP model: %s\n", fs::exists(fp_ckpt) ? "cached" : "training (toy default)");
    load_or_train(base, fp_ckpt, log_line);
    std::fprintf(stderr, "FP model ready in %.1fs\n", sw.seconds());
  }

  const fs::path lossless_dir = cache / "lossless";
  EvalReport lossless;
  run(6, "W32/A32 without ACM reproduces FP top-1", [&] {
    seed_run_dir(lossless_dir, fp_ckpt);
    lossless = run_pipeline(lossless_config(lossless_dir));
    // Test activations outside the calibrated range are clipped at any bit width; report how far that moves logits.
    const ViTModel fp = load_checkpoint(fp_ckpt);
    const QuantizedModel qm = load_quant_params(fp, lossless_dir / "quant_params.txt");
    const ToyDataset test = test_set(base);
    const Tensor ql = collect_logits(quantized_logits(qm, nullptr), test);
    const Tensor fl = collect_logits(fp_logits(fp), test);
    double gap = 0.0;
    for (std::size_t i = 0; i < ql.size(); ++i) gap = std::max(gap, std::abs(ql[i] - fl[i]));
    return Outcome{lossless.top1 == lossless.fp_top1,
                   fmt("quantized %.2f%% vs FP %.2f%% on %zu images, max |logit diff| %.3g", lossless.top1,
                       lossless.fp_top1, lossless.test_images, gap)};
  });

  Study study;
  bool study_ok = true;
  std::string study_error;
  try {
    study = run_study(base, fp_ckpt);
    std::fputs(format_ablation(study.ablation).c_str(), stderr);
    std::fputs(format_compare(study.compare).c_str(), stderr);
    std::fprintf(stderr, "synthesis and evaluation of %zu seeds: %.1fs\n", kSeeds, study.seconds);
  } catch (const std::exception& e) {
    study_ok = false;
    study_error = e.what();
  }
  auto need_study = [&] {
    if (!study_ok) throw std::runtime_error(study_error);
  };

  run(7, "W4/A8 ablation: E2H+ACM vs fixed-crop baseline over 5 seeds", [&] {
    need_study();
    const auto& a = study.ablation;
    const auto best = a.top1("+E2H+ACM", 4, 8), baseline = a.top1("Baseline", 4, 8);
    std::size_t beats = 0;
    for (std::size_t i = 0; i < best.size(); ++i) beats += best[i] > baseline[i] ? 1 : 0;
    const double mb = median(best), m0 = median(baseline);
    const bool fp_ok = a.fp_top1 >= kFpTarget;
    const bool ok_a = mb >= m0, ok_b = beats >= kMinBeats, ok_c = a.fp_top1 - mb <= kFpGap;
    return Outcome{fp_ok && ok_a && ok_b && ok_c,
                   fmt("FP %.2f%% (>=%.0f: %s); median E2H+ACM %.2f [%s] vs baseline %.2f [%s] (a: %s); beats "
                       "%zu/%zu (b: %s); gap to FP %.2f pp (c: %s)",
                       a.fp_top1, kFpTarget, fp_ok ? "yes" : "no", mb, join(best).c_str(), m0,
                       join(baseline).c_str(), ok_a ? "ok" : "no", beats, best.size(), ok_b ? "ok" : "no",
                       a.fp_top1 - mb, ok_c ? "ok" : "no")};
  });

  run(8, "W4/A8 Gaussian-noise calibration below E2H synthesis", [&] {
    need_study();
    std::vector<double> noise;
    for (const auto& [seed, acc] : study.ablation.noise_top1) noise.push_back(acc);
    const auto e2h = study.ablation.top1("+E2H", 4, 8);
    const double mn = median(noise), me = median(e2h);
    return Outcome{mn < me, fmt("median noise %.2f [%s] vs E2H %.2f [%s], both without ACM", mn,
                                join(noise).c_str(), me, join(e2h).c_str())};
  });

  run(9, "ACM parameters below 0.1% of the model", [&] {
    need_study();
    std::size_t acm = 0;
    for (const auto& e : study.ablation.entries) acm = std::max(acm, e.acm_params);
    const double ratio = static_cast<double>(acm) / static_cast<double>(study.ablation.model_params);
    return Outcome{acm > 0 && ratio < kAcmRatioMax,
                   fmt("%zu of %zu parameters (%.4f%%)", acm, study.ablation.model_params, 100.0 * ratio)};
  });

  run(
      10, "E2H final L_TOTAL <= fixed in at least 3 of 5 paired seeds",
      [&] {
        need_study();
        std::string pairs;
        bool shared = true;
        for (const auto& p : study.compare.pairs) {
          pairs += fmt(" %.4f/%.4f", p.e2h_loss, p.fixed_loss);
          shared = shared && p.shared_init;
        }
        const std::size_t wins = study.compare.e2h_wins();
        return Outcome{wins >= kMinLossWins,
                       fmt("%zu/%zu pairs (e2h/fixed:%s), shared x0: %s", wins, study.compare.pairs.size(),
                           pairs.c_str(), shared ? "yes" : "no")};
      },
      true);

  run(11, "repeated run gives an identical deterministic report", [&] {
    const fs::path again = cache / "lossless_repeat";
    seed_run_dir(again, fp_ckpt);
    RunConfig c = lossless_config(again);
    const EvalReport r1 = run_pipeline(c);
    const EvalReport r2 = run_pipeline(c);
    EvalReport first = lossless;
    first.config.out_dir = c.out_dir;
    const bool same = deterministic_payload(r1) == deterministic_payload(r2) &&
                      deterministic_payload(r1) == deterministic_payload(first);
    return Outcome{same, fmt("3 runs of the criterion 6 arm, payloads %s", same ? "identical" : "differ")};
  });

  std::printf("%s: %d hard criteria failed\n", hard_failures ? "FAIL" : "PASS", hard_failures);
  return hard_failures ? 1 : 0;
}
