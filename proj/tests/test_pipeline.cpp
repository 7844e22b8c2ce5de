#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "dfqvit/pipeline.hpp"
#include "test_util.hpp"

using namespace dfqvit;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.model = testutil::tiny_config();
  c.data.train_count = 40;
  c.data.test_count = 40;
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.synth.iterations = 4;
  c.samples = 2;
  c.quant.bits_w = 4;
  c.quant.bits_a = 8;
  c.out_dir = out.string();
  return c;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("dfqvit_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(TopK, OracleLogitsGiveFullAccuracy) {
  const std::vector<int> labels{0, 3, 1, 2, 3};
  Tensor logits({5, 4});
  for (std::size_t i = 0; i < 5; ++i) logits.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  const std::size_t ks[] = {1, 2};
  const auto acc = topk_from_logits(logits, labels, ks);
  EXPECT_EQ(acc[0], 100.0);
  EXPECT_EQ(acc[1], 100.0);
}

TEST(TopK, RandomLogitsNearChance) {
  const std::size_t n = 4000, c = 10;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> ul(0, 9);
  Tensor logits({n, c});
  for (double& v : logits.data()) v = nd(rng);
  std::vector<int> labels(n);
  for (int& l : labels) l = ul(rng);
  const std::size_t ks[] = {1, 5, 10};
  const auto acc = topk_from_logits(logits, labels, ks);
  for (auto [i, p] : {std::pair<int, double>{0, 0.1}, {1, 0.5}}) {
    const double bound = 300.0 * std::sqrt(p * (1 - p) / static_cast<double>(n));
    EXPECT_NEAR(acc[static_cast<std::size_t>(i)], 100.0 * p, bound);
  }
  EXPECT_LE(acc[0], acc[1]);
  EXPECT_EQ(acc[2], 100.0);
}

TEST(TopK, TiesFavourLowerIndexAndErrors) {
  const std::vector<int> labels{0, 1, 2};
  const Tensor flat({3, 3});
  const std::size_t k1[] = {1}, k2[] = {2}, k0[] = {0}, k4[] = {4};
  EXPECT_NEAR(topk_from_logits(flat, labels, k1)[0], 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(topk_from_logits(flat, labels, k2)[0], 200.0 / 3.0, 1e-12);
  EXPECT_THROW(topk_from_logits(flat, labels, k0), std::invalid_argument);
  EXPECT_THROW(topk_from_logits(flat, labels, k4), std::invalid_argument);
  EXPECT_THROW(topk_from_logits(flat, std::vector<int>{0, 1}, k1), ShapeError);
}

TEST(TopK, EvaluateMatchesPerImageForward) {
  const ViTModel m = testutil::random_model(testutil::tiny_config(), 3);
  const ToyDataset ds = generate(2, 23, Split::test, 4, 8);
  const std::size_t ks[] = {1, 2};
  const auto acc = evaluate_topk(fp_logits(m), ds, ks);
  std::size_t h1 = 0, h2 = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor img = ds.image(i).reshaped({1, 3, 8, 8});
    const Tensor z = fp_logits(m)(img);
    const std::size_t r = label_rank(z.row(0), ds.labels[i]);
    h1 += r < 1;
    h2 += r < 2;
  }
  EXPECT_NEAR(acc[0], 100.0 * static_cast<double>(h1) / 23.0, 1e-12);
  EXPECT_NEAR(acc[1], 100.0 * static_cast<double>(h2) / 23.0, 1e-12);
  EXPECT_LE(acc[0], acc[1]);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = tiny_run("somewhere");
  c.calib_source = CalibSource::real;
  c.synth.strategy = CropStrategy::fixed;
  c.hooks.gamma = 2;
  c.acm = false;
  c.train.warmup_fraction = 0.1;
  c.seed = 42;
  const RunConfig back = run_config_from_json(Json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.synth.seed, 42u);
}

TEST(Config, PartialJsonKeepsDefaults) {
  const RunConfig c = run_config_from_json(Json::parse(R"({"quant": {"bits_w": 2}, "seed": 3})"));
  EXPECT_EQ(c.quant.bits_w, 2);
  EXPECT_EQ(c.quant.bits_a, RunConfig{}.quant.bits_a);
  EXPECT_EQ(c.samples, 16u);
  EXPECT_EQ(c.synth.iterations, 500u);
  EXPECT_THROW(run_config_from_json(Json::parse(R"({"calib_source": "webcam"})")), std::invalid_argument);
}

TEST(Config, ValidationRejectsBadValues) {
  RunConfig c = tiny_run("x");
  c.quant.bits_w = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_run("x");
  c.samples = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_run("x");
  c.data.test_count = 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Report, JsonRoundTripAndSummary) {
  EvalReport r;
  r.arm = "W4/A8 synth-e2h +ACM";
  r.config = tiny_run("x");
  r.top1 = 71.5;
  r.top5 = 99.0;
  r.fp_top1 = 80.0;
  r.test_images = 40;
  r.acm_params = 74;
  r.model_params = 100000;
  r.synth_final_loss = 1.25;
  r.timings["eval"] = 0.5;
  const EvalReport back = report_from_json(Json::parse(to_json(r).dump()));
  EXPECT_EQ(deterministic_payload(back), deterministic_payload(r));
  EXPECT_EQ(back.timings, r.timings);
  EXPECT_NEAR(r.acm_ratio(), 74e-5, 1e-15);
  const std::string s = report_summary(r);
  EXPECT_NE(s.find("top-1        71.50%"), std::string::npos);
  EXPECT_NE(s.find("74 of 100000"), std::string::npos);

  Json bad = to_json(r);
  bad["schema_version"] = 99;
  EXPECT_THROW(report_from_json(bad), std::runtime_error);
}

TEST(Pipeline, RunWritesArtifactsAndIsDeterministic) {
  TempDir a("pipe_a"), b("pipe_b");
  const EvalReport ra = run_pipeline(tiny_run(a.path()));
  const EvalReport rb = run_pipeline(tiny_run(b.path()));
  EvalReport rb_same = rb;
  rb_same.config.out_dir = ra.config.out_dir;
  EXPECT_EQ(deterministic_payload(rb_same), deterministic_payload(ra));
  EXPECT_EQ(ra.top1, rb.top1);
  for (const char* f : {"fp.ckpt", "quant_params.txt", "acm.ckpt", "report.json", "report.txt", "manifest.txt",
                        "samples/samples.ckpt", "samples/manifest.txt", "samples/sample00.ppm"}) {
    EXPECT_TRUE(fs::exists(a.path() / f)) << f;
  }
  EXPECT_EQ(deterministic_payload(read_report(a.path() / "report.json")), deterministic_payload(ra));
  EXPECT_GE(ra.top5, ra.top1);
  EXPECT_GT(ra.acm_params, 0u);
  ASSERT_TRUE(ra.synth_final_loss.has_value());

  // A second run in the same directory reuses the saved FP model.
  const EvalReport again = run_pipeline(tiny_run(a.path()));
  EXPECT_EQ(deterministic_payload(again), deterministic_payload(ra));
}

TEST(Pipeline, LosslessArmReproducesFpAccuracy) {
  TempDir d("pipe_lossless");
  RunConfig c = tiny_run(d.path());
  c.quant.bits_w = 32;
  c.quant.bits_a = 32;
  c.acm = false;
  c.calib_source = CalibSource::noise;
  c.data.test_count = 200;
  const EvalReport r = run_pipeline(c);
  EXPECT_EQ(r.top1, r.fp_top1);
  EXPECT_EQ(r.acm_params, 0u);
  EXPECT_FALSE(fs::exists(d.path() / "acm.ckpt"));
  EXPECT_FALSE(r.synth_final_loss.has_value());
}

TEST(Pipeline, ErrorsCarryTheirStage) {
  TempDir d("pipe_errors");
  RunConfig c = tiny_run(d.path());
  c.quant.bits_a = 40;
  try {
    run_pipeline(c);
    FAIL() << "expected a config error";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "config");
  }

  c = tiny_run(d.path());
  {
    std::ofstream f(d.path() / "fp.ckpt", std::ios::binary);
    f << "garbage";
  }
  try {
    run_pipeline(c);
    FAIL() << "expected a train-stage error";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "train");
    EXPECT_NE(std::string(e.what()).find("train: "), std::string::npos);
  }

  // A checkpoint for a different architecture is rejected, not silently used.
  fs::remove(d.path() / "fp.ckpt");
  RunConfig other = c;
  other.model.hidden_dim = 8;
  run_pipeline(other);
  try {
    run_pipeline(c);
    FAIL() << "expected a mismatch error";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "train");
  }
}

TEST(Pipeline, RealAndNoiseSourcesAreSeeded) {
  const RunConfig c = tiny_run("unused");
  const ViTModel m = testutil::random_model(c.model, 4);
  RunConfig r = c;
  r.calib_source = CalibSource::real;
  const auto a = calibration_set(m, r, {});
  const auto b = calibration_set(m, r, {});
  ASSERT_EQ(a.images.size(), 2u);
  EXPECT_TRUE(bitwise_equal(a.images[0], b.images[0]));
  const auto other = calibration_set(m, r.with_seed(9), {});
  EXPECT_FALSE(bitwise_equal(a.images[0], other.images[0]) && bitwise_equal(a.images[1], other.images[1]));
  r.calib_source = CalibSource::noise;
  EXPECT_EQ(calibration_set(m, r, {}).images.size(), 2u);
}

TEST(Compare, NeedsTwoSeedsAndSharesInitialisation) {
  const RunConfig c = tiny_run("unused");
  const ViTModel m = testutil::random_model(c.model, 5);
  const ToyDataset test = test_set(c);
  EXPECT_THROW(compare_strategies(m, c, {1}, test), std::invalid_argument);

  const CompareReport rep = compare_strategies(m, c, {1, 2}, test);
  ASSERT_EQ(rep.pairs.size(), 2u);
  for (const auto& p : rep.pairs) {
    EXPECT_TRUE(p.shared_init);
    EXPECT_TRUE(std::isfinite(p.e2h_loss));
    EXPECT_TRUE(std::isfinite(p.fixed_loss));
  }
  EXPECT_LE(rep.e2h_wins(), 2u);
  EXPECT_NE(format_compare(rep).find("pairs"), std::string::npos);
  EXPECT_EQ(to_json(rep)["pairs"].size(), 2u);
}

TEST(Ablation, CoversEveryArmAndBitSetting) {
  const RunConfig c = tiny_run("unused");
  const ViTModel m = testutil::random_model(c.model, 6);
  const ToyDataset test = test_set(c);
  const AblationReport rep = ablation(m, c, {3}, test);
  EXPECT_EQ(rep.entries.size(), 8u);
  EXPECT_EQ(rep.noise_top1.size(), 1u);
  for (const auto& arm : ablation_arms()) {
    EXPECT_EQ(rep.top1(arm, 4, 8).size(), 1u) << arm;
    EXPECT_EQ(rep.top1(arm, 8, 8).size(), 1u) << arm;
  }
  for (const auto& e : rep.entries) {
    EXPECT_EQ(e.acm_params > 0, e.arm.find("ACM") != std::string::npos) << e.arm;
  }
  EXPECT_NE(format_ablation(rep).find("+E2H+ACM"), std::string::npos);
  EXPECT_EQ(to_json(rep)["entries"].size(), 8u);
}

TEST(Median, OddEvenAndEmpty) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
}
