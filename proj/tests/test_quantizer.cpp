#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dfqvit/quantizer.hpp"
#include "test_util.hpp"

using namespace dfqvit;
using testutil::random_model;
using testutil::random_tensor;
using testutil::tiny_config;

namespace {

QuantParams sym(int bits, double scale) { return {bits, scale, 0, QuantMode::symmetric}; }

std::vector<Tensor> sample_images(std::size_t n, std::uint64_t seed) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tensor({3, 8, 8}, seed + i, 0, 1));
  return out;
}

}  // namespace

TEST(Quantize, SpecExamples) {
  EXPECT_EQ(quantize(0.0, sym(4, 0.37)), 0);
  EXPECT_EQ(quantize(1.0, sym(4, 0.5)), 2);
  EXPECT_EQ(quantize(10.0, sym(4, 0.5)), 7);
  EXPECT_EQ(quantize(-10.0, sym(4, 0.5)), -8);
  EXPECT_EQ(dequantize(0, sym(4, 0.5)), 0.0);
}

TEST(Quantize, TiesRoundAwayFromZero) {
  EXPECT_EQ(quantize(0.25, sym(4, 0.5)), 1);
  EXPECT_EQ(quantize(-0.25, sym(4, 0.5)), -1);
  EXPECT_EQ(quantize(0.75, sym(4, 0.5)), 2);
  const QuantParams a{8, 1.0, 3, QuantMode::asymmetric};
  EXPECT_EQ(quantize(-2.5, a), 0);  // round(-2.5) = -3, +3 -> 0
  EXPECT_EQ(quantize(2.5, a), 6);
}

TEST(Quantize, ExhaustiveFourBitCodes) {
  const QuantParams p = sym(4, 0.5);
  std::vector<double> values;
  for (std::int64_t q = p.qmin(); q <= p.qmax(); ++q) values.push_back(dequantize(q, p));
  ASSERT_EQ(values.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(values[i], -4.0 + 0.5 * static_cast<double>(i));
  EXPECT_THROW(dequantize(8, p), std::out_of_range);
  EXPECT_THROW(dequantize(-9, p), std::out_of_range);
}

TEST(Quantize, RoundTripBoundMonotoneIdempotent) {
  for (int bits : {2, 3, 4, 8}) {
    for (QuantMode mode : {QuantMode::symmetric, QuantMode::asymmetric}) {
      QuantParams p{bits, 0.3, 0, mode};
      if (mode == QuantMode::asymmetric) p.zero_point = (std::int64_t{1} << bits) / 3;
      const double lo = static_cast<double>(p.qmin() - p.zero_point) * p.scale;
      const double hi = static_cast<double>(p.qmax() - p.zero_point) * p.scale;
      std::int64_t prev = p.qmin();
      for (int i = 0; i <= 4000; ++i) {
        const double x = lo - 0.5 + (hi - lo + 1.0) * i / 4000.0;
        const std::int64_t q = quantize(x, p);
        EXPECT_GE(q, prev);
        prev = q;
        const double fq = fake_quantize(x, p);
        EXPECT_EQ(fake_quantize(fq, p), fq);
        if (x >= lo && x <= hi) {
          EXPECT_LE(std::fabs(fq - x), p.scale / 2 * (1 + 1e-12));
        }
      }
    }
  }
}

TEST(Quantize, NanMapsToLowestCode) {
  EXPECT_EQ(quantize(std::nan(""), sym(4, 1.0)), -8);
}

TEST(FitWeight, Examples) {
  Tensor w = Tensor::vector({1.0, -7.0, 3.0});
  const QuantParams p = fit_weight_params(w, 4);
  EXPECT_EQ(p.scale, 1.0);
  EXPECT_EQ(p.zero_point, 0);
  EXPECT_EQ(p.mode, QuantMode::symmetric);

  const QuantParams z = fit_weight_params(Tensor({5}), 4);
  EXPECT_EQ(z.scale, 1.0);
  const Tensor zq = fake_quantize(Tensor({5}), z);
  for (double v : zq.data()) EXPECT_EQ(v, 0.0);

  const Tensor r = random_tensor({50}, 3, -2, 2);
  const QuantParams rp = fit_weight_params(r, 4);
  std::size_t arg = 0;
  for (std::size_t i = 0; i < 50; ++i)
    if (std::fabs(r[i]) > std::fabs(r[arg])) arg = i;
  EXPECT_LE(std::fabs(fake_quantize(r[arg], rp) - r[arg]), rp.scale / 2);
  EXPECT_THROW(fit_weight_params(Tensor({0}, std::vector<double>{}), 4), std::invalid_argument);
}

TEST(FitActivation, Examples) {
  const QuantParams a = fit_activation_params(0.0, 255.0, 8);
  EXPECT_EQ(a.scale, 1.0);
  EXPECT_EQ(a.zero_point, 0);
  const QuantParams b = fit_activation_params(2.0, 2.0, 8);
  EXPECT_EQ(b.scale, 1.0);
  EXPECT_EQ(quantize(1.9, b), quantize(2.1, b));
  const QuantParams c = fit_activation_params(-1.0, 3.0, 2);
  EXPECT_DOUBLE_EQ(c.scale, 4.0 / 3.0);
  EXPECT_EQ(c.zero_point, 1);
  EXPECT_THROW(fit_activation_params(0.0, INFINITY, 8), std::invalid_argument);
  EXPECT_THROW(fit_activation_params(NAN, 1.0, 8), std::invalid_argument);
  EXPECT_THROW(fit_activation_params(1.0, 0.0, 8), std::invalid_argument);
  // Range entirely above zero clips the zero point at 0.
  EXPECT_EQ(fit_activation_params(1.0, 2.0, 8).zero_point, 0);
}

TEST(QuantParams, Validation) {
  EXPECT_THROW((QuantParams{1, 1.0, 0, QuantMode::symmetric}.validate()), std::invalid_argument);
  EXPECT_THROW((QuantParams{33, 1.0, 0, QuantMode::symmetric}.validate()), std::invalid_argument);
  EXPECT_THROW((QuantParams{8, 0.0, 0, QuantMode::symmetric}.validate()), std::invalid_argument);
  EXPECT_THROW((QuantParams{8, 1.0, 2, QuantMode::symmetric}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((QuantParams{32, 1e-9, 7, QuantMode::asymmetric}.validate()));
  EXPECT_EQ(parse_mode(mode_name(QuantMode::asymmetric)), QuantMode::asymmetric);
  EXPECT_THROW(parse_mode("linear"), std::invalid_argument);
}

TEST(Calibrate, CoversEveryLinearLayer) {
  const ViTConfig cfg = tiny_config();
  const ViTModel m = random_model(cfg, 1);
  const QuantizedModel qm = calibrate(m, sample_images(2, 10), QuantConfig{});
  std::size_t linear = 0;
  visit_linear_weights(m.params(), [&](const std::string& name, const Tensor&) {
    ++linear;
    EXPECT_NE(qm.weight_param(name), nullptr) << name;
  });
  EXPECT_EQ(qm.weight_params.size(), linear);
  for (std::size_t s = 0; s < site::count(cfg); ++s) EXPECT_TRUE(qm.activation_params[s].has_value()) << s;
}

TEST(Calibrate, RangesMatchBruteForceStatistics) {
  const ViTConfig cfg = tiny_config();
  const ViTModel m = random_model(cfg, 2);
  const auto samples = sample_images(3, 20);
  QuantConfig qc;
  qc.bits_a = 6;
  const QuantizedModel qm = calibrate(m, samples, qc);

  // Recompute each site's input by hand from one-image forwards.
  struct Capture : ForwardHooks {
    std::vector<std::vector<double>> seen;
    explicit Capture(std::size_t n) : seen(n) {}
    Var linear_input(std::size_t site, Var x) override {
      seen[site].insert(seen[site].end(), x.value().data().begin(), x.value().data().end());
      return x;
    }
  } cap(site::count(cfg));
  for (const Tensor& s : samples) forward(m, s, false, &cap);
  for (std::size_t s = 0; s < site::count(cfg); ++s) {
    const auto [lo, hi] = std::minmax_element(cap.seen[s].begin(), cap.seen[s].end());
    EXPECT_EQ(*qm.activation_params[s], fit_activation_params(std::min(*lo, 0.0), std::max(*hi, 0.0), 6)) << s;
  }
  EXPECT_EQ(calibrate(m, samples, qc).activation_params, qm.activation_params);
  EXPECT_THROW(calibrate(m, {}, qc), std::invalid_argument);
}

TEST(Calibrate, PercentileNarrowsRange) {
  const ViTModel m = random_model(tiny_config(), 3);
  const auto samples = sample_images(2, 30);
  QuantConfig qc;
  const QuantizedModel full = calibrate(m, samples, qc);
  qc.act_percentile = 99.0;
  const QuantizedModel clipped = calibrate(m, samples, qc);
  for (std::size_t s = 0; s < full.activation_params.size(); ++s) {
    EXPECT_LE(clipped.activation_params[s]->scale, full.activation_params[s]->scale);
  }
}

TEST(QuantizedForward, ThirtyTwoBitsMatchesFullPrecision) {
  const ViTModel m = random_model(tiny_config(), 4);
  const auto samples = sample_images(4, 40);
  QuantConfig qc;
  qc.bits_w = qc.bits_a = 32;
  const QuantizedModel one = calibrate(m, {samples[0]}, qc);
  EXPECT_LT(testutil::max_abs_diff(quantized_forward(one, samples[0]).logits, forward(m, samples[0]).logits), 1e-6);
  const QuantizedModel qm = calibrate(m, samples, qc);
  const Tensor batch = stack_images(samples);
  EXPECT_LT(testutil::max_abs_diff(quantized_forward(qm, batch).logits, forward(m, batch).logits), 1e-5);
}

TEST(QuantizedForward, DeterministicAndLossyAtLowBits) {
  const ViTModel m = random_model(tiny_config(), 5);
  const auto samples = sample_images(4, 50);
  QuantConfig qc;
  qc.bits_w = 2;
  const QuantizedModel qm = calibrate(m, samples, qc);
  const Tensor batch = stack_images(samples);
  const Tensor a = quantized_forward(qm, batch).logits;
  EXPECT_TRUE(bitwise_equal(a, quantized_forward(qm, batch).logits));
  EXPECT_GT(testutil::max_abs_diff(a, forward(m, batch).logits), 1e-3);
}

TEST(QuantizedForward, UncalibratedSiteThrows) {
  const ViTModel m = random_model(tiny_config(), 6);
  const QuantizedModel qm = make_weight_quantized(m, QuantConfig{});
  EXPECT_THROW(quantized_forward(qm, sample_images(1, 60)[0]), std::logic_error);
}

TEST(QuantizedForward, StraightThroughGradient) {
  const QuantParams p = sym(3, 0.25);
  auto f = [&](Var x) { return sum(mul(fake_quantize(x, p), x.tape()->constant(Tensor::vector({1.0, 2.0, 3.0})))); };
  const Tensor g = testutil::autodiff_grad(f, Tensor::vector({0.1, -0.4, 5.0}));
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1], 2.0);
  EXPECT_EQ(g[2], 3.0);
}

TEST(QuantizedForward, PatchEmbedCanStayFloat) {
  const ViTModel m = random_model(tiny_config(), 7);
  QuantConfig qc;
  qc.quantize_patch_embed = false;
  const QuantizedModel qm = calibrate(m, sample_images(2, 70), qc);
  EXPECT_EQ(qm.weight_param("patch_embed.weight"), nullptr);
  EXPECT_FALSE(qm.activation_params[site::patch_embed()].has_value());
  EXPECT_TRUE(bitwise_equal(qm.weights.patch.weight, m.params().patch.weight));
}

TEST(QuantParamsText, RoundTripsExactly) {
  const ViTModel m = random_model(tiny_config(), 8);
  QuantConfig qc;
  qc.bits_w = 3;
  qc.bits_a = 5;
  const QuantizedModel qm = calibrate(m, sample_images(2, 80), qc);
  const std::string text = format_quant_params(qm);
  const QuantizedModel back = parse_quant_params(m, text);
  EXPECT_EQ(back.weight_params, qm.weight_params);
  EXPECT_EQ(back.activation_params, qm.activation_params);
  EXPECT_EQ(back.qconfig.bits_w, 3);
  EXPECT_EQ(format_quant_params(back), text);
  const Tensor img = sample_images(1, 90)[0];
  EXPECT_TRUE(bitwise_equal(quantized_forward(back, img).logits, quantized_forward(qm, img).logits));

  const auto path = std::filesystem::temp_directory_path() / "dfqvit_quant_params.txt";
  save_quant_params(qm, path);
  EXPECT_EQ(load_quant_params(m, path).activation_params, qm.activation_params);
  EXPECT_THROW(parse_quant_params(m, "garbage\n"), std::runtime_error);
}
