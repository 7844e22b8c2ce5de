#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/random.hpp"
#include "dfqvit/tensor.hpp"

namespace dfqvit {

enum class Split : std::uint64_t { train = 1, test = 2 };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

// Procedural labelled images in [0, 1], one geometric pattern per class.
struct ToyDataset {
  Tensor images;            // [count x 3 x S x S]
  std::vector<int> labels;  // in [0, num_classes)
  Split split = Split::train;
  std::uint64_t seed = 0;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return images.dim(3); }
  Tensor image(std::size_t i) const {
    const std::size_t per = images.size() / images.dim(0);
    return Tensor({3, image_size(), image_size()},
                  std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                      images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
  }
};

inline constexpr std::size_t kToyPatternCount = 10;
// Pixel distribution shared by noise baselines and synthesis initialisation.
inline constexpr double kInitMean = 0.5;
inline constexpr double kInitStd = 0.25;

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// Whether pixel offset (dx, dy) from the pattern centre belongs to class `label`'s
// foreground. r is the pattern radius; period/phase drive the full-frame textures.
inline bool pattern_covers(int label, double dx, double dy, double r, double x, double y, double period,
                           double phase) {
  const double ax = std::fabs(dx), ay = std::fabs(dy);
  const double dist = std::sqrt(dx * dx + dy * dy);
  switch (label) {
    case 0: return dist <= r;                                            // disk
    case 1: return std::max(ax, ay) <= 0.8 * r;                          // square
    case 2: return dy >= -r && dy <= 0.8 * r && ax <= 0.5 * (dy + r);    // triangle
    case 3: return dist <= r && dist >= 0.5 * r;                         // ring
    case 4: return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);  // plus
    case 5: return std::fabs(ax - ay) <= r / 3.0 && std::max(ax, ay) <= r;    // diagonal cross
    case 6: return std::fmod(y + phase, period) < period / 2.0;          // horizontal stripes
    case 7: return std::fmod(x + phase, period) < period / 2.0;          // vertical stripes
    case 8: {                                                            // checkerboard
      const int cx = static_cast<int>(std::floor((x + phase) / period));
      const int cy = static_cast<int>(std::floor((y + phase) / period));
      return ((cx + cy) & 1) == 0;
    }
    default: {                                                           // hollow square
      const double m = std::max(ax, ay);
      return m <= 0.9 * r && m >= 0.5 * r;
    }
  }
}

inline void render_toy_image(int label, std::size_t size, Rng& rng, double* out) {
  std::normal_distribution<double> noise(0.0, 0.04);
  const double s = static_cast<double>(size);
  const double bg = 0.35 * uniform01(rng);
  double fg[3];
  // Each class owns a hue band that overlaps its neighbours', so colour alone is ambiguous.
  const double hue = (static_cast<double>(label) + 1.4 * (uniform01(rng) - 0.5)) / static_cast<double>(kToyPatternCount);
  hsv_to_rgb(hue - std::floor(hue), 0.6 + 0.4 * uniform01(rng), 0.65 + 0.35 * uniform01(rng), fg);
  const double r = s * (0.24 + 0.12 * uniform01(rng));
  const double cx = r + (s - 2 * r) * uniform01(rng);
  const double cy = r + (s - 2 * r) * uniform01(rng);
  const double period = 4.0 + 4.0 * uniform01(rng);
  const double phase = period * uniform01(rng);
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const bool on = pattern_covers(label, px - cx, py - cy, r, px, py, period, phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (on ? fg[c] : bg) + noise(rng);
        out[c * plane + y * size + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

}  // namespace detail

// Balanced dataset: image i has label i mod num_classes. Train and test draw
// from disjoint seed streams.
inline ToyDataset generate(std::uint64_t seed, std::size_t count, Split split, std::size_t num_classes = 10,
                           std::size_t image_size = 32) {
  if (num_classes == 0 || num_classes > kToyPatternCount) {
    throw std::invalid_argument("generate: num_classes must be in [1, " + std::to_string(kToyPatternCount) + "]");
  }
  if (count < num_classes) {
    throw std::invalid_argument("generate: count " + std::to_string(count) + " < num_classes " +
                                std::to_string(num_classes));
  }
  ToyDataset ds;
  ds.split = split;
  ds.seed = seed;
  ds.num_classes = num_classes;
  ds.images = Tensor({count, 3, image_size, image_size});
  ds.labels.resize(count);
  const std::size_t per = 3 * image_size * image_size;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % num_classes);
    ds.labels[i] = label;
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(split), i}));
    detail::render_toy_image(label, image_size, rng, ds.images.data().data() + i * per);
  }
  return ds;
}

// n images drawn uniformly without replacement.
inline std::vector<Tensor> real_calibration_subset(const ToyDataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) {
    throw std::invalid_argument("real_calibration_subset: n=" + std::to_string(n) + " exceeds dataset size " +
                                std::to_string(ds.size()));
  }
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {0x5EA1}));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(ds.image(idx[i]));
  return out;
}

// Per-pixel N(kInitMean, kInitStd^2), clipped to [0, 1].
inline Tensor gaussian_image(std::size_t image_size, Rng& rng) {
  std::normal_distribution<double> nd(kInitMean, kInitStd);
  Tensor img({3, image_size, image_size});
  for (double& v : img.data()) v = std::clamp(nd(rng), 0.0, 1.0);
  return img;
}

inline std::vector<Tensor> gaussian_noise_images(std::size_t n, std::size_t image_size, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("gaussian_noise_images: n must be >= 1");
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {0x401, i}));
    out.push_back(gaussian_image(image_size, rng));
  }
  return out;
}

}  // namespace dfqvit
