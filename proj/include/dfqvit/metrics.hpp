#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/dataset.hpp"
#include "dfqvit/tensor.hpp"

namespace dfqvit {

// Maps a batch [B x 3 x S x S] to logits [B x C].
using LogitsFn = std::function<Tensor(const Tensor& images)>;

// Zero-based rank of `label` in a logits row; equal logits rank the lower class index first.
inline std::size_t label_rank(std::span<const double> logits, int label) {
  const double v = logits[static_cast<std::size_t>(label)];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > v || (logits[j] == v && j < static_cast<std::size_t>(label))) ++rank;
  }
  return rank;
}

inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

// Top-k accuracy (percent) over precomputed logits [N x C], one entry per k.
inline std::vector<double> topk_from_logits(const Tensor& logits, std::span<const int> labels,
                                            std::span<const std::size_t> ks) {
  if (labels.empty()) throw std::invalid_argument("top-k: empty dataset");
  if (logits.rows() != labels.size()) {
    throw ShapeError("top-k: " + std::to_string(logits.rows()) + " logit rows for " +
                     std::to_string(labels.size()) + " labels");
  }
  for (auto k : ks) {
    if (k == 0 || k > logits.cols()) {
      throw std::invalid_argument("top-k: k=" + std::to_string(k) + " outside [1, " +
                                  std::to_string(logits.cols()) + "]");
    }
  }
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t r = label_rank(logits.row(i), labels[i]);
    for (std::size_t j = 0; j < ks.size(); ++j) hits[j] += r < ks[j] ? 1 : 0;
  }
  std::vector<double> out;
  for (auto h : hits) out.push_back(100.0 * static_cast<double>(h) / static_cast<double>(labels.size()));
  return out;
}

// Runs `forward` over the dataset in batches and collects all logits.
inline Tensor collect_logits(const LogitsFn& forward, const ToyDataset& ds, std::size_t batch = 50) {
  if (ds.size() == 0) throw std::invalid_argument("collect_logits: empty dataset");
  const std::size_t per = ds.images.size() / ds.size();
  const std::size_t s = ds.image_size();
  std::vector<double> all;
  std::size_t cols = 0;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t b = std::min(batch, ds.size() - start);
    Tensor images({b, 3, s, s},
                  std::vector<double>(ds.images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                                      ds.images.data().begin() + static_cast<std::ptrdiff_t>((start + b) * per)));
    Tensor logits = forward(images);
    cols = logits.cols();
    all.insert(all.end(), logits.data().begin(), logits.data().end());
  }
  return Tensor({ds.size(), cols}, std::move(all));
}

inline std::vector<double> evaluate_topk(const LogitsFn& forward, const ToyDataset& ds,
                                         std::span<const std::size_t> ks) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate_topk: empty dataset");
  return topk_from_logits(collect_logits(forward, ds), ds.labels, ks);
}

}  // namespace dfqvit
