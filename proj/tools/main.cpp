#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "dfqvit/pipeline.hpp"

using namespace dfqvit;
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string out = "run";
  std::uint64_t seed = 0;
  int bits_w = 4, bits_a = 8;
  std::string strategy = "e2h";
  std::string calib_source = "synth";
  std::size_t samples = 16;
  std::size_t iters = 500;
  std::string acm = "on";
  std::size_t gamma = 0;
  std::size_t seeds = 5;
};

struct Options {
  CLI::Option *config, *seed, *bits_w, *bits_a, *strategy, *calib_source, *samples, *iters, *acm, *gamma;
};

Options add_common(CLI::App& app, Flags& f) {
  Options o{};
  o.config = app.add_option("--config", f.config, "JSON run configuration");
  app.add_option("--out", f.out, "run directory (artifacts are read from and written to it)");
  o.seed = app.add_option("--seed", f.seed, "run seed");
  o.bits_w = app.add_option("--bits-w", f.bits_w, "weight bit width")->check(CLI::Range(2, 32));
  o.bits_a = app.add_option("--bits-a", f.bits_a, "activation bit width")->check(CLI::Range(2, 32));
  o.strategy = app.add_option("--strategy", f.strategy, "crop strategy")->check(CLI::IsMember({"e2h", "fixed"}));
  o.calib_source = app.add_option("--calib-source", f.calib_source, "calibration images")
                       ->check(CLI::IsMember({"synth", "real", "noise"}));
  o.samples = app.add_option("--samples", f.samples, "calibration image count (default 16)");
  o.iters = app.add_option("--iters", f.iters, "synthesis iterations (default 500)");
  o.acm = app.add_option("--acm", f.acm, "activation correction")->check(CLI::IsMember({"on", "off"}));
  o.gamma = app.add_option("--gamma", f.gamma, "also correct every gamma-th block output (0 = off)");
  return o;
}

fs::path config_path(const fs::path& dir) { return dir / "config.json"; }
fs::path calib_path(const fs::path& dir) { return dir / "calib.ckpt"; }

// --config, else the run directory's saved config, else defaults; flags given on the command line win.
RunConfig resolve_config(const Flags& f, const Options& o) {
  RunConfig c;
  if (*o.config) {
    c = load_run_config(f.config);
  } else if (fs::exists(config_path(f.out))) {
    c = load_run_config(config_path(f.out));
  }
  c.out_dir = f.out;
  if (*o.seed) c = c.with_seed(f.seed);
  if (*o.bits_w) c.quant.bits_w = f.bits_w;
  if (*o.bits_a) c.quant.bits_a = f.bits_a;
  if (*o.strategy) c.synth.strategy = parse_strategy(f.strategy);
  if (*o.calib_source) c.calib_source = parse_calib_source(f.calib_source);
  if (*o.samples) c.samples = f.samples;
  if (*o.iters) c.synth.iterations = f.iters;
  if (*o.acm) c.acm = f.acm == "on";
  if (*o.gamma) c.hooks.gamma = f.gamma;
  c.validate();
  return c;
}

void save_config(const RunConfig& c) {
  fs::create_directories(c.out_dir);
  std::ofstream out(config_path(c.out_dir));
  if (!out) throw std::runtime_error("cannot write '" + config_path(c.out_dir).string() + "'");
  out << to_json(c).dump(2) << "\n";
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

ViTModel load_fp(const RunConfig& c) {
  const RunPaths p{c.out_dir};
  if (!fs::exists(p.fp())) throw std::runtime_error("no FP model at '" + p.fp().string() + "'; run `train` first");
  ViTModel m = load_checkpoint(p.fp());
  if (!(m.config() == c.model)) throw std::runtime_error("'" + p.fp().string() + "' does not match the configured model");
  return m;
}

void write_calibration(const RunConfig& c, const CalibrationSet& cs) {
  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < cs.images.size(); ++i) tensors.push_back({"image" + std::to_string(i), cs.images[i]});
  if (auto loss = cs.mean_final_loss()) tensors.push_back({"mean_final_loss", Tensor::scalar(*loss)});
  write_tensor_file(calib_path(c.out_dir), tensors);
}

std::pair<std::vector<Tensor>, std::optional<double>> read_calibration(const RunConfig& c) {
  const fs::path path = calib_path(c.out_dir);
  if (!fs::exists(path)) throw std::runtime_error("no calibration images at '" + path.string() + "'; run `synth` first");
  std::vector<Tensor> images;
  std::optional<double> loss;
  for (const auto& t : read_tensor_file(path)) {
    if (t.name == "mean_final_loss") {
      loss = t.tensor.item();
    } else {
      images.push_back(t.tensor);
    }
  }
  return {images, loss};
}

void cmd_train(const RunConfig& c) {
  save_config(c);
  Stopwatch sw;
  const ViTModel m = run_stage("train", [&] { return train_fp_model(c, log_line); });
  save_checkpoint(m, RunPaths{c.out_dir}.fp());
  const double acc = run_stage("eval", [&] { return fp_top1(m, test_set(c)); });
  std::printf("FP top-1 %.2f%% on %zu test images (%.1fs), %zu parameters -> %s\n", acc, c.data.test_count,
              sw.seconds(), m.parameter_count(), RunPaths{c.out_dir}.fp().c_str());
}

void cmd_synth(const RunConfig& c) {
  save_config(c);
  const ViTModel fp = run_stage("synth", [&] { return load_fp(c); });
  const CalibrationSet cs = run_stage("synth", [&] { return calibration_set(fp, c, log_line); });
  run_stage("synth", [&] {
    write_calibration(c, cs);
    if (!cs.synthesized.empty()) write_samples(cs.synthesized, c.synth, RunPaths{c.out_dir}.samples());
  });
  std::printf("%zu %s calibration images -> %s\n", cs.images.size(), calib_source_name(c.calib_source),
              calib_path(c.out_dir).c_str());
  if (auto loss = cs.mean_final_loss()) std::printf("mean final L_TOTAL %.6f\n", *loss);
}

void cmd_calibrate(const RunConfig& c) {
  save_config(c);
  const RunPaths p{c.out_dir};
  const ViTModel fp = run_stage("calibrate", [&] { return load_fp(c); });
  const auto images = run_stage("calibrate", [&] { return read_calibration(c).first; });
  const QuantizedModel qm = run_stage("calibrate", [&] { return calibrate(fp, images, c.quant); });
  run_stage("calibrate", [&] { save_quant_params(qm, p.quant_params()); });
  std::printf("W%d/A%d quantizer calibrated on %zu images -> %s\n", c.quant.bits_w, c.quant.bits_a, images.size(),
              p.quant_params().c_str());
  if (c.acm) {
    const AcmSet acm = run_stage("acm", [&] { return compute_acm(fp, qm, images, c.hooks); });
    run_stage("acm", [&] { save_acm(acm, p.acm()); });
    std::printf("ACM: %zu parameters -> %s\n", acm_param_count(acm), p.acm().c_str());
  } else {
    fs::remove(p.acm());
  }
}

void cmd_eval(const RunConfig& c) {
  save_config(c);
  const RunPaths p{c.out_dir};
  const ViTModel fp = run_stage("eval", [&] { return load_fp(c); });
  const QuantizedModel qm = run_stage("eval", [&] {
    if (!fs::exists(p.quant_params())) throw std::runtime_error("no quantizer parameters; run `calibrate` first");
    return load_quant_params(fp, p.quant_params());
  });
  AcmSet acm;
  if (c.acm) {
    acm = run_stage("eval", [&] {
      if (!fs::exists(p.acm())) throw std::runtime_error("ACM is on but no '" + p.acm().string() + "'");
      return load_acm(p.acm(), c.model);
    });
  }
  const ToyDataset test = test_set(c);
  EvalReport r;
  r.arm = c.arm_name();
  r.config = c;
  r.test_images = test.size();
  r.model_params = fp.parameter_count();
  r.acm_params = c.acm ? acm_param_count(acm) : 0;
  if (fs::exists(calib_path(c.out_dir))) r.synth_final_loss = read_calibration(c).second;
  Stopwatch sw;
  const std::size_t k5 = std::min<std::size_t>(5, c.model.num_classes);
  const std::size_t ks[] = {1, k5};
  const auto acc = run_stage("eval", [&] {
    r.fp_top1 = fp_top1(fp, test);
    return evaluate_topk(quantized_logits(qm, c.acm ? &acm : nullptr), test, ks);
  });
  r.top1 = acc[0];
  r.top5 = acc[1];
  r.timings["eval"] = sw.seconds();
  run_stage("report", [&] {
    emit_report(r, p.report());
    write_manifest(p, c, {"eval"});
  });
  std::fputs(report_summary(r).c_str(), stdout);
}

std::vector<std::uint64_t> seed_list(const RunConfig& c, std::size_t n) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n; ++i) seeds.push_back(c.seed + i);
  return seeds;
}

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << s;
}

void cmd_ablate(const RunConfig& c, std::size_t n) {
  save_config(c);
  const ViTModel fp = run_stage("train", [&] { return load_or_train(c, RunPaths{c.out_dir}.fp(), log_line); });
  const AblationReport rep = ablation(fp, c, seed_list(c, n), test_set(c), log_line);
  const fs::path dir = c.out_dir;
  run_stage("report", [&] {
    write_text(dir / "ablation.json", to_json(rep).dump(2) + "\n");
    write_text(dir / "ablation.txt", format_ablation(rep));
  });
  std::fputs(format_ablation(rep).c_str(), stdout);
}

void cmd_compare(const RunConfig& c, std::size_t n) {
  save_config(c);
  const ViTModel fp = run_stage("train", [&] { return load_or_train(c, RunPaths{c.out_dir}.fp(), log_line); });
  const CompareReport rep = run_stage("compare", [&] { return compare_strategies(fp, c, seed_list(c, n), test_set(c), log_line); });
  const fs::path dir = c.out_dir;
  run_stage("report", [&] {
    write_text(dir / "compare.json", to_json(rep).dump(2) + "\n");
    write_text(dir / "compare.txt", format_compare(rep));
  });
  std::fputs(format_compare(rep).c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-free post-training quantization of a toy vision transformer"};
  app.require_subcommand(1);
  Flags flags;

  struct Sub {
    CLI::App* app;
    Options opts;
  };
  auto make = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    return Sub{sub, add_common(*sub, flags)};
  };
  Sub train = make("train", "train the full-precision model (writes fp.ckpt)");
  Sub synth = make("synth", "produce calibration images (synthesized, real or noise)");
  Sub calib = make("calibrate", "fit quantizer parameters and the activation correction");
  Sub eval = make("eval", "evaluate the quantized model on the test split");
  Sub ablate = make("ablate", "baseline / +E2H / +ACM / +E2H+ACM over several seeds");
  Sub compare = make("compare", "E2H vs fixed crop on paired seeds");
  for (Sub* s : {&ablate, &compare}) {
    s->app->add_option("--seeds", flags.seeds, "number of consecutive seeds starting at --seed")
        ->check(CLI::Range(std::size_t{1}, std::size_t{1000}));
  }

  CLI11_PARSE(app, argc, argv);

  std::string stage = "config";
  try {
    for (Sub* s : {&train, &synth, &calib, &eval, &ablate, &compare}) {
      if (!s->app->parsed()) continue;
      stage = s->app->get_name();
      const RunConfig c = run_stage("config", [&] { return resolve_config(flags, s->opts); });
      if (s == &train) cmd_train(c);
      if (s == &synth) cmd_synth(c);
      if (s == &calib) cmd_calibrate(c);
      if (s == &eval) cmd_eval(c);
      if (s == &ablate) cmd_ablate(c, flags.seeds);
      if (s == &compare) cmd_compare(c, flags.seeds);
    }
  } catch (const PipelineError& e) {
    std::fprintf(stderr, "error [%s]: %s\n", e.stage().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error [%s]: %s\n", stage.c_str(), e.what());
    return 1;
  }
  return 0;
}
