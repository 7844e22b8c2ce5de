#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfqvit/acm.hpp"
#include "dfqvit/checkpoint.hpp"
#include "dfqvit/dataset.hpp"
#include "dfqvit/metrics.hpp"
#include "dfqvit/quantizer.hpp"
#include "dfqvit/synthesis.hpp"
#include "dfqvit/train.hpp"
#include "dfqvit/vit.hpp"

namespace dfqvit {

using Json = nlohmann::json;
using Log = std::function<void(const std::string&)>;

// Failure inside a named pipeline stage.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& cause)
      : std::runtime_error(stage + ": " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

template <class F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(stage, e.what());
  }
}

enum class CalibSource { synth, real, noise };

inline const char* calib_source_name(CalibSource s) {
  switch (s) {
    case CalibSource::synth: return "synth";
    case CalibSource::real: return "real";
    default: return "noise";
  }
}

inline CalibSource parse_calib_source(const std::string& s) {
  if (s == "synth") return CalibSource::synth;
  if (s == "real") return CalibSource::real;
  if (s == "noise") return CalibSource::noise;
  throw std::invalid_argument("unknown calibration source '" + s + "' (expected synth, real or noise)");
}

struct DataConfig {
  std::uint64_t seed = 7;
  std::size_t train_count = 3000;  // drawn fresh every epoch
  std::size_t test_count = 1000;
};

struct RunConfig {
  ViTConfig model;
  std::uint64_t model_seed = 1;
  DataConfig data;
  TrainOptions train;
  SynthesisConfig synth;
  QuantConfig quant;
  CalibSource calib_source = CalibSource::synth;
  std::size_t samples = 16;
  bool acm = true;
  HookSpec hooks;
  std::uint64_t seed = 0;
  std::string out_dir = "run";

  void validate() const {
    model.validate();
    synth.validate();
    for (int k : {quant.bits_w, quant.bits_a}) {
      if (k < 2 || k > 32) throw std::invalid_argument("bit width " + std::to_string(k) + " outside [2, 32]");
    }
    if (samples == 0) throw std::invalid_argument("samples must be >= 1");
    if (data.test_count < model.num_classes || data.train_count < model.num_classes) {
      throw std::invalid_argument("dataset sizes must be >= num_classes");
    }
  }

  // Seed-dependent pieces: synthesis streams, the real subset and the noise images.
  RunConfig with_seed(std::uint64_t s) const {
    RunConfig c = *this;
    c.seed = s;
    c.synth.seed = s;
    return c;
  }

  std::string arm_name() const {
    std::string name = "W" + std::to_string(quant.bits_w) + "/A" + std::to_string(quant.bits_a) + " " +
                       calib_source_name(calib_source);
    if (calib_source == CalibSource::synth) name += std::string("-") + strategy_name(synth.strategy);
    return name + (acm ? " +ACM" : "");
  }
};

// ---- config <-> JSON --------------------------------------------------------

inline Json to_json(const RunConfig& c) {
  return Json{
      {"model",
       {{"image_size", c.model.image_size},
        {"patch_size", c.model.patch_size},
        {"hidden_dim", c.model.hidden_dim},
        {"num_layers", c.model.num_layers},
        {"num_heads", c.model.num_heads},
        {"mlp_ratio", c.model.mlp_ratio},
        {"num_classes", c.model.num_classes},
        {"use_cls_token", c.model.use_cls_token},
        {"seed", c.model_seed}}},
      {"data", {{"seed", c.data.seed}, {"train_count", c.data.train_count}, {"test_count", c.data.test_count}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"seed", c.train.seed},
        {"final_lr_fraction", c.train.final_lr_fraction},
        {"warmup_fraction", c.train.warmup_fraction}}},
      {"synth",
       {{"iterations", c.synth.iterations},
        {"lr", c.synth.lr},
        {"alpha", c.synth.weights.alpha},
        {"beta", c.synth.weights.beta},
        {"delta_lo", c.synth.delta_lo},
        {"delta_hi", c.synth.delta_hi},
        {"strategy", strategy_name(c.synth.strategy)},
        {"clamp_pixels", c.synth.clamp_pixels},
        {"init_mean", c.synth.init_mean},
        {"init_std", c.synth.init_std}}},
      {"quant",
       {{"bits_w", c.quant.bits_w},
        {"bits_a", c.quant.bits_a},
        {"quantize_patch_embed", c.quant.quantize_patch_embed},
        {"act_percentile", c.quant.act_percentile}}},
      {"calib_source", calib_source_name(c.calib_source)},
      {"samples", c.samples},
      {"acm", {{"enabled", c.acm}, {"gamma", c.hooks.gamma}, {"final_norm", c.hooks.final_norm}, {"logits", c.hooks.logits}}},
      {"seed", c.seed},
      {"out_dir", c.out_dir}};
}

// Missing keys keep their defaults, so partial config files are accepted.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  auto get = [](const Json& obj, const char* key, auto& field) {
    if (obj.contains(key)) field = obj.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  if (j.contains("model")) {
    const Json& m = j.at("model");
    get(m, "image_size", c.model.image_size);
    get(m, "patch_size", c.model.patch_size);
    get(m, "hidden_dim", c.model.hidden_dim);
    get(m, "num_layers", c.model.num_layers);
    get(m, "num_heads", c.model.num_heads);
    get(m, "mlp_ratio", c.model.mlp_ratio);
    get(m, "num_classes", c.model.num_classes);
    get(m, "use_cls_token", c.model.use_cls_token);
    get(m, "seed", c.model_seed);
  }
  if (j.contains("data")) {
    const Json& d = j.at("data");
    get(d, "seed", c.data.seed);
    get(d, "train_count", c.data.train_count);
    get(d, "test_count", c.data.test_count);
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    get(t, "epochs", c.train.epochs);
    get(t, "lr", c.train.lr);
    get(t, "batch_size", c.train.batch_size);
    get(t, "seed", c.train.seed);
    get(t, "final_lr_fraction", c.train.final_lr_fraction);
    get(t, "warmup_fraction", c.train.warmup_fraction);
  }
  if (j.contains("synth")) {
    const Json& s = j.at("synth");
    get(s, "iterations", c.synth.iterations);
    get(s, "lr", c.synth.lr);
    get(s, "alpha", c.synth.weights.alpha);
    get(s, "beta", c.synth.weights.beta);
    get(s, "delta_lo", c.synth.delta_lo);
    get(s, "delta_hi", c.synth.delta_hi);
    if (s.contains("strategy")) c.synth.strategy = parse_strategy(s.at("strategy").get<std::string>());
    get(s, "clamp_pixels", c.synth.clamp_pixels);
    get(s, "init_mean", c.synth.init_mean);
    get(s, "init_std", c.synth.init_std);
  }
  if (j.contains("quant")) {
    const Json& q = j.at("quant");
    get(q, "bits_w", c.quant.bits_w);
    get(q, "bits_a", c.quant.bits_a);
    get(q, "quantize_patch_embed", c.quant.quantize_patch_embed);
    get(q, "act_percentile", c.quant.act_percentile);
  }
  if (j.contains("calib_source")) c.calib_source = parse_calib_source(j.at("calib_source").get<std::string>());
  get(j, "samples", c.samples);
  if (j.contains("acm")) {
    const Json& a = j.at("acm");
    get(a, "enabled", c.acm);
    get(a, "gamma", c.hooks.gamma);
    get(a, "final_norm", c.hooks.final_norm);
    get(a, "logits", c.hooks.logits);
  }
  get(j, "seed", c.seed);
  get(j, "out_dir", c.out_dir);
  c.synth.seed = c.seed;
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config '" + path.string() + "'");
  return run_config_from_json(Json::parse(f));
}

// ---- reports ----------------------------------------------------------------

struct EvalReport {
  static constexpr int kSchemaVersion = 1;

  std::string arm;
  RunConfig config;
  double top1 = 0.0;
  double top5 = 0.0;
  double fp_top1 = 0.0;
  std::size_t test_images = 0;
  std::size_t acm_params = 0;
  std::size_t model_params = 0;
  std::optional<double> synth_final_loss;  // mean final L_TOTAL over synthesized samples
  std::map<std::string, double> timings;   // seconds per stage; excluded from the deterministic payload

  double acm_ratio() const {
    return model_params ? static_cast<double>(acm_params) / static_cast<double>(model_params) : 0.0;
  }
};

// The part of a report that must be identical across repeated runs.
inline Json deterministic_payload(const EvalReport& r) {
  return Json{{"arm", r.arm},
              {"config", to_json(r.config)},
              {"top1", r.top1},
              {"top5", r.top5},
              {"fp_top1", r.fp_top1},
              {"test_images", r.test_images},
              {"acm_params", r.acm_params},
              {"model_params", r.model_params},
              {"acm_ratio", r.acm_ratio()},
              {"synth_final_loss", r.synth_final_loss ? Json(*r.synth_final_loss) : Json(nullptr)}};
}

inline Json to_json(const EvalReport& r) {
  return Json{{"schema_version", EvalReport::kSchemaVersion},
              {"deterministic", deterministic_payload(r)},
              {"timings", r.timings}};
}

inline EvalReport report_from_json(const Json& j) {
  const int version = j.at("schema_version").get<int>();
  if (version != EvalReport::kSchemaVersion) {
    throw std::runtime_error("report schema version " + std::to_string(version) + " not supported");
  }
  const Json& d = j.at("deterministic");
  EvalReport r;
  r.arm = d.at("arm").get<std::string>();
  r.config = run_config_from_json(d.at("config"));
  r.top1 = d.at("top1").get<double>();
  r.top5 = d.at("top5").get<double>();
  r.fp_top1 = d.at("fp_top1").get<double>();
  r.test_images = d.at("test_images").get<std::size_t>();
  r.acm_params = d.at("acm_params").get<std::size_t>();
  r.model_params = d.at("model_params").get<std::size_t>();
  if (!d.at("synth_final_loss").is_null()) r.synth_final_loss = d.at("synth_final_loss").get<double>();
  if (j.contains("timings")) r.timings = j.at("timings").get<std::map<std::string, double>>();
  return r;
}

inline std::string report_summary(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "arm          %s\nseed         %llu\ntop-1        %.2f%%\ntop-5        %.2f%%\nFP top-1     %.2f%%\n"
                "test images  %zu\nACM params   %zu of %zu (%.4f%%)\n",
                r.arm.c_str(), static_cast<unsigned long long>(r.config.seed), r.top1, r.top5, r.fp_top1,
                r.test_images, r.acm_params, r.model_params, 100.0 * r.acm_ratio());
  std::string s = buf;
  if (r.synth_final_loss) {
    std::snprintf(buf, sizeof buf, "final L_TOTAL %.6f (mean over samples)\n", *r.synth_final_loss);
    s += buf;
  }
  for (const auto& [stage, secs] : r.timings) {
    std::snprintf(buf, sizeof buf, "time %-9s %.2fs\n", stage.c_str(), secs);
    s += buf;
  }
  return s;
}

// JSON at `path` plus a human-readable summary next to it (same name, .txt).
inline void emit_report(const EvalReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report '" + path.string() + "'");
  f << to_json(r).dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
  std::filesystem::path txt = path;
  txt.replace_extension(".txt");
  std::ofstream s(txt);
  if (!s) throw std::runtime_error("cannot write report summary '" + txt.string() + "'");
  s << report_summary(r);
}

inline EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read report '" + path.string() + "'");
  return report_from_json(Json::parse(f));
}

// ---- stages -----------------------------------------------------------------

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline ToyDataset train_set(const RunConfig& c) {
  return generate(c.data.seed, c.data.train_count, Split::train, c.model.num_classes, c.model.image_size);
}

inline ToyDataset test_set(const RunConfig& c) {
  return generate(c.data.seed, c.data.test_count, Split::test, c.model.num_classes, c.model.image_size);
}

inline ViTModel train_fp_model(const RunConfig& c, const Log& log = {}) {
  ViTModel model = ViTModel::init(c.model, c.model_seed);
  // A fresh draw every epoch; epoch 0 is the nominal training set.
  ToyDataset current;
  const EpochData data = [&](std::size_t epoch) -> const ToyDataset& {
    const std::uint64_t seed = epoch == 0 ? c.data.seed : derive_seed(c.data.seed, {0xE90C, epoch});
    current = generate(seed, c.data.train_count, Split::train, c.model.num_classes, c.model.image_size);
    return current;
  };
  train_epochs(model, data, nullptr, c.train, [&](std::size_t epoch, double loss) {
    if (log) log("train epoch " + std::to_string(epoch + 1) + "/" + std::to_string(c.train.epochs) + " loss " +
                 std::to_string(loss));
  });
  return model;
}

// Loads the checkpoint at `path` if present, otherwise trains and saves it.
inline ViTModel load_or_train(const RunConfig& c, const std::filesystem::path& path, const Log& log = {}) {
  if (std::filesystem::exists(path)) {
    ViTModel m = load_checkpoint(path);
    if (!(m.config() == c.model)) {
      throw std::runtime_error("checkpoint '" + path.string() + "' does not match the configured model");
    }
    return m;
  }
  ViTModel m = train_fp_model(c, log);
  save_checkpoint(m, path);
  return m;
}

struct CalibrationSet {
  std::vector<Tensor> images;
  std::vector<SampleResult> synthesized;  // empty unless synthesized

  std::optional<double> mean_final_loss() const {
    if (synthesized.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& r : synthesized) s += r.final_loss.total;
    return s / static_cast<double>(synthesized.size());
  }
};

inline std::uint64_t noise_seed(std::uint64_t seed) { return derive_seed(seed, {0x401CE}); }
inline std::uint64_t real_subset_seed(std::uint64_t seed) { return derive_seed(seed, {0x4EA1}); }

inline CalibrationSet calibration_set(const ViTModel& fp, const RunConfig& c, const Log& log = {}) {
  CalibrationSet cs;
  switch (c.calib_source) {
    case CalibSource::synth: {
      SynthesisProgress progress;
      if (log) {
        progress = [&](std::size_t t, std::span<const double> totals) {
          if ((t + 1) % 100 != 0 && t + 1 != c.synth.iterations) return;
          double mean = 0.0;
          for (double v : totals) mean += v;
          log("synth " + std::string(strategy_name(c.synth.strategy)) + " iter " + std::to_string(t + 1) + "/" +
              std::to_string(c.synth.iterations) + " mean L_TOTAL " +
              std::to_string(mean / static_cast<double>(totals.size())));
        };
      }
      cs.synthesized = synthesize_batch(fp, c.synth, c.samples, 16, progress);
      cs.images = sample_images(cs.synthesized);
      break;
    }
    case CalibSource::real:
      cs.images = real_calibration_subset(train_set(c), c.samples, real_subset_seed(c.seed));
      break;
    case CalibSource::noise:
      cs.images = gaussian_noise_images(c.samples, c.model.image_size, noise_seed(c.seed));
      break;
  }
  return cs;
}

struct ArmResult {
  QuantizedModel qmodel;
  AcmSet acm;
  EvalReport report;
};

inline LogitsFn quantized_logits(const QuantizedModel& qm, const AcmSet* acm) {
  if (acm) return [&qm, acm](const Tensor& x) { return corrected_forward(qm, *acm, x).logits; };
  return [&qm](const Tensor& x) { return quantized_forward(qm, x).logits; };
}

// Calibration, optional ACM and evaluation for one arm on a given calibration set.
inline ArmResult evaluate_arm(const ViTModel& fp, const CalibrationSet& calib, const RunConfig& c,
                              const ToyDataset& test, double fp_top1) {
  ArmResult a;
  a.report.arm = c.arm_name();
  a.report.config = c;
  a.report.fp_top1 = fp_top1;
  a.report.test_images = test.size();
  a.report.model_params = fp.parameter_count();
  a.report.synth_final_loss = calib.mean_final_loss();
  Stopwatch sw;
  a.qmodel = run_stage("calibrate", [&] { return calibrate(fp, calib.images, c.quant); });
  a.report.timings["calibrate"] = sw.seconds();
  if (c.acm) {
    Stopwatch sa;
    a.acm = run_stage("acm", [&] { return compute_acm(fp, a.qmodel, calib.images, c.hooks); });
    a.report.acm_params = acm_param_count(a.acm);
    a.report.timings["acm"] = sa.seconds();
  }
  Stopwatch se;
  const std::size_t ks[] = {1, 5};
  const std::size_t k5 = std::min<std::size_t>(5, c.model.num_classes);
  const std::size_t ks_small[] = {1, k5};
  const auto acc = run_stage("eval", [&] {
    return evaluate_topk(quantized_logits(a.qmodel, c.acm ? &a.acm : nullptr), test,
                         k5 == 5 ? std::span<const std::size_t>(ks) : std::span<const std::size_t>(ks_small));
  });
  a.report.top1 = acc[0];
  a.report.top5 = acc[1];
  a.report.timings["eval"] = se.seconds();
  return a;
}

inline double fp_top1(const ViTModel& fp, const ToyDataset& test) {
  const std::size_t k1[] = {1};
  return evaluate_topk(fp_logits(fp), test, k1)[0];
}

// Run directory layout.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path fp() const { return dir / "fp.ckpt"; }
  std::filesystem::path samples() const { return dir / "samples"; }
  std::filesystem::path quant_params() const { return dir / "quant_params.txt"; }
  std::filesystem::path acm() const { return dir / "acm.ckpt"; }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path manifest() const { return dir / "manifest.txt"; }
};

inline void write_manifest(const RunPaths& paths, const RunConfig& c, const std::vector<std::string>& stages) {
  std::ofstream f(paths.manifest());
  if (!f) throw std::runtime_error("cannot write '" + paths.manifest().string() + "'");
  f << "arm " << c.arm_name() << "\nseed " << c.seed << "\n";
  for (const auto& s : stages) f << "stage " << s << "\n";
  f << "config " << to_json(c).dump() << "\n";
}

// Full run: FP model (trained if `fp.ckpt` is absent), calibration images,
// quantizer calibration, ACM, evaluation. All artifacts go to c.out_dir.
inline EvalReport run_pipeline(const RunConfig& c, const Log& log = {}) {
  run_stage("config", [&] { c.validate(); });
  const RunPaths paths{c.out_dir};
  std::filesystem::create_directories(paths.dir);
  std::vector<std::string> stages;
  Stopwatch st;
  const ViTModel fp = run_stage("train", [&] { return load_or_train(c, paths.fp(), log); });
  const double train_s = st.seconds();
  stages.push_back("train");
  const ToyDataset test = test_set(c);
  const double fp_acc = run_stage("eval", [&] { return fp_top1(fp, test); });

  Stopwatch ss;
  const CalibrationSet calib = run_stage("synth", [&] { return calibration_set(fp, c, log); });
  const double synth_s = ss.seconds();
  if (!calib.synthesized.empty()) {
    run_stage("synth", [&] { write_samples(calib.synthesized, c.synth, paths.samples()); });
  }
  stages.push_back(calib_source_name(c.calib_source));

  ArmResult arm = evaluate_arm(fp, calib, c, test, fp_acc);
  run_stage("calibrate", [&] { save_quant_params(arm.qmodel, paths.quant_params()); });
  stages.push_back("calibrate");
  if (c.acm) {
    run_stage("acm", [&] { save_acm(arm.acm, paths.acm()); });
    stages.push_back("acm");
  }
  arm.report.timings["train"] = train_s;
  arm.report.timings["synth"] = synth_s;
  run_stage("report", [&] { emit_report(arm.report, paths.report()); });
  stages.push_back("eval");
  run_stage("report", [&] { write_manifest(paths, c, stages); });
  return arm.report;
}

// ---- strategy comparison and ablation ---------------------------------------

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Synthesized calibration sets of both crop strategies for one seed. Both share
// every random stream, so initial images are identical.
struct SeedRun {
  std::uint64_t seed = 0;
  CalibrationSet e2h, fixed, noise;
};

inline SeedRun synthesize_pair(const ViTModel& fp, const RunConfig& base, std::uint64_t seed, const Log& log = {}) {
  SeedRun r;
  r.seed = seed;
  RunConfig c = base.with_seed(seed);
  c.calib_source = CalibSource::synth;
  c.synth.strategy = CropStrategy::e2h;
  r.e2h = run_stage("synth", [&] { return calibration_set(fp, c, log); });
  c.synth.strategy = CropStrategy::fixed;
  r.fixed = run_stage("synth", [&] { return calibration_set(fp, c, log); });
  c.calib_source = CalibSource::noise;
  r.noise = calibration_set(fp, c);
  return r;
}

struct ComparePair {
  std::uint64_t seed = 0;
  double e2h_loss = 0.0, fixed_loss = 0.0;  // mean final L_TOTAL
  double e2h_top1 = 0.0, fixed_top1 = 0.0;  // downstream quantized top-1
  bool shared_init = false;                 // x_0 bit-identical across the pair
};

struct CompareReport {
  std::vector<ComparePair> pairs;
  std::size_t e2h_wins() const {
    return static_cast<std::size_t>(
        std::count_if(pairs.begin(), pairs.end(), [](const ComparePair& p) { return p.e2h_loss <= p.fixed_loss; }));
  }
};

inline bool shared_initialization(const CalibrationSet& a, const CalibrationSet& b) {
  if (a.synthesized.size() != b.synthesized.size()) return false;
  for (std::size_t i = 0; i < a.synthesized.size(); ++i) {
    if (!bitwise_equal(a.synthesized[i].initial, b.synthesized[i].initial)) return false;
  }
  return true;
}

inline CompareReport compare_from_runs(const ViTModel& fp, const RunConfig& base, const std::vector<SeedRun>& runs,
                                       const ToyDataset& test, double fp_acc) {
  CompareReport rep;
  for (const auto& run : runs) {
    RunConfig c = base.with_seed(run.seed);
    c.calib_source = CalibSource::synth;
    ComparePair p;
    p.seed = run.seed;
    p.e2h_loss = *run.e2h.mean_final_loss();
    p.fixed_loss = *run.fixed.mean_final_loss();
    c.synth.strategy = CropStrategy::e2h;
    p.e2h_top1 = evaluate_arm(fp, run.e2h, c, test, fp_acc).report.top1;
    c.synth.strategy = CropStrategy::fixed;
    p.fixed_top1 = evaluate_arm(fp, run.fixed, c, test, fp_acc).report.top1;
    p.shared_init = shared_initialization(run.e2h, run.fixed);
    rep.pairs.push_back(p);
  }
  return rep;
}

inline CompareReport compare_strategies(const ViTModel& fp, const RunConfig& base,
                                        const std::vector<std::uint64_t>& seeds, const ToyDataset& test,
                                        const Log& log = {}) {
  if (seeds.size() < 2) throw std::invalid_argument("compare_strategies: need at least 2 seeds");
  std::vector<SeedRun> runs;
  for (auto s : seeds) runs.push_back(synthesize_pair(fp, base, s, log));
  return compare_from_runs(fp, base, runs, test, fp_top1(fp, test));
}

inline std::string format_compare(const CompareReport& r) {
  std::ostringstream out;
  char buf[256];
  out << "seed  L_TOTAL(e2h)  L_TOTAL(fixed)  top1(e2h)  top1(fixed)  shared_x0\n";
  for (const auto& p : r.pairs) {
    std::snprintf(buf, sizeof buf, "%4llu  %12.6f  %14.6f  %9.2f  %11.2f  %s\n",
                  static_cast<unsigned long long>(p.seed), p.e2h_loss, p.fixed_loss, p.e2h_top1, p.fixed_top1,
                  p.shared_init ? "yes" : "no");
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "e2h final L_TOTAL <= fixed in %zu/%zu pairs\n", r.e2h_wins(), r.pairs.size());
  out << buf;
  return out.str();
}

inline Json to_json(const CompareReport& r) {
  Json pairs = Json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"seed", p.seed},
                     {"e2h_final_loss", p.e2h_loss},
                     {"fixed_final_loss", p.fixed_loss},
                     {"e2h_top1", p.e2h_top1},
                     {"fixed_top1", p.fixed_top1},
                     {"shared_init", p.shared_init}});
  }
  return Json{{"schema_version", EvalReport::kSchemaVersion}, {"pairs", pairs}, {"e2h_wins", r.e2h_wins()}};
}

struct AblationEntry {
  std::string arm;  // Baseline, +E2H, +ACM, +E2H+ACM
  int bits_w = 4, bits_a = 8;
  std::uint64_t seed = 0;
  double top1 = 0.0, top5 = 0.0;
  std::size_t acm_params = 0;
};

struct AblationReport {
  double fp_top1 = 0.0;
  std::size_t model_params = 0;
  std::vector<AblationEntry> entries;
  std::vector<std::pair<std::uint64_t, double>> noise_top1;  // W4/A8, no ACM

  std::vector<double> top1(const std::string& arm, int bits_w, int bits_a) const {
    std::vector<double> v;
    for (const auto& e : entries) {
      if (e.arm == arm && e.bits_w == bits_w && e.bits_a == bits_a) v.push_back(e.top1);
    }
    return v;
  }
};

inline const std::vector<std::string>& ablation_arms() {
  static const std::vector<std::string> arms{"Baseline", "+E2H", "+ACM", "+E2H+ACM"};
  return arms;
}

inline const std::vector<std::pair<int, int>>& ablation_bits() {
  static const std::vector<std::pair<int, int>> bits{{4, 8}, {8, 8}};
  return bits;
}

inline AblationReport ablation_from_runs(const ViTModel& fp, const RunConfig& base, const std::vector<SeedRun>& runs,
                                         const ToyDataset& test, double fp_acc) {
  AblationReport rep;
  rep.fp_top1 = fp_acc;
  rep.model_params = fp.parameter_count();
  for (const auto& run : runs) {
    for (auto [bw, ba] : ablation_bits()) {
      for (const auto& arm : ablation_arms()) {
        RunConfig c = base.with_seed(run.seed);
        c.calib_source = CalibSource::synth;
        c.quant.bits_w = bw;
        c.quant.bits_a = ba;
        const bool e2h = arm.find("E2H") != std::string::npos;
        c.acm = arm.find("ACM") != std::string::npos;
        c.synth.strategy = e2h ? CropStrategy::e2h : CropStrategy::fixed;
        const EvalReport r = evaluate_arm(fp, e2h ? run.e2h : run.fixed, c, test, fp_acc).report;
        rep.entries.push_back({arm, bw, ba, run.seed, r.top1, r.top5, r.acm_params});
      }
    }
    RunConfig c = base.with_seed(run.seed);
    c.calib_source = CalibSource::noise;
    c.quant.bits_w = 4;
    c.quant.bits_a = 8;
    c.acm = false;
    rep.noise_top1.emplace_back(run.seed, evaluate_arm(fp, run.noise, c, test, fp_acc).report.top1);
  }
  return rep;
}

inline AblationReport ablation(const ViTModel& fp, const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                               const ToyDataset& test, const Log& log = {}) {
  if (seeds.empty()) throw std::invalid_argument("ablation: need at least 1 seed");
  std::vector<SeedRun> runs;
  for (auto s : seeds) runs.push_back(synthesize_pair(fp, base, s, log));
  return ablation_from_runs(fp, base, runs, test, fp_top1(fp, test));
}

// Median top-1 per arm and bit setting, one row per arm.
inline std::string format_ablation(const AblationReport& r) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "FP top-1 %.2f%%, %zu parameters\n", r.fp_top1, r.model_params);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-10s %-12s %-12s %s\n", "Method", "W4/A8", "W8/A8", "ACM params");
  out << buf;
  for (const auto& arm : ablation_arms()) {
    std::size_t params = 0;
    for (const auto& e : r.entries) {
      if (e.arm == arm) params = e.acm_params;
    }
    std::snprintf(buf, sizeof buf, "%-10s %-12.2f %-12.2f %zu\n", arm.c_str(), median(r.top1(arm, 4, 8)),
                  median(r.top1(arm, 8, 8)), params);
    out << buf;
  }
  out << "(median top-1 over seeds)\n";
  for (const auto& [seed, acc] : r.noise_top1) {
    std::snprintf(buf, sizeof buf, "noise calibration W4/A8 seed %llu: %.2f\n", static_cast<unsigned long long>(seed),
                  acc);
    out << buf;
  }
  return out.str();
}

inline Json to_json(const AblationReport& r) {
  Json entries = Json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"arm", e.arm},
                       {"bits_w", e.bits_w},
                       {"bits_a", e.bits_a},
                       {"seed", e.seed},
                       {"top1", e.top1},
                       {"top5", e.top5},
                       {"acm_params", e.acm_params}});
  }
  Json noise = Json::array();
  for (const auto& [seed, acc] : r.noise_top1) noise.push_back({{"seed", seed}, {"top1", acc}});
  return Json{{"schema_version", EvalReport::kSchemaVersion},
              {"fp_top1", r.fp_top1},
              {"model_params", r.model_params},
              {"entries", entries},
              {"noise_w4a8", noise}};
}

}  // namespace dfqvit
