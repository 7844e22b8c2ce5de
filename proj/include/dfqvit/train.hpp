#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfqvit/adam.hpp"
#include "dfqvit/autodiff.hpp"
#include "dfqvit/dataset.hpp"
#include "dfqvit/metrics.hpp"
#include "dfqvit/random.hpp"
#include "dfqvit/vit.hpp"

namespace dfqvit {

struct TrainOptions {
  std::size_t epochs = 14;
  double lr = 2e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Cosine decay of the learning rate down to lr * final_lr_fraction.
  double final_lr_fraction = 0.05;
  // Linear warmup over this fraction of all steps.
  double warmup_fraction = 0.03;
};

struct TrainReport {
  std::vector<double> step_losses;
  double train_top1 = 0.0;
  double test_top1 = 0.0;
};

inline LogitsFn fp_logits(const ViTModel& model) {
  return [&model](const Tensor& images) { return forward(model, images).logits; };
}

// Supplies the training set for each epoch.
using EpochData = std::function<const ToyDataset&(std::size_t epoch)>;

// Minimises mean cross-entropy with Adam. Deterministic for a given seed.
// `on_epoch` (optional) is called after every epoch with (epoch, mean loss).
inline TrainReport train_epochs(ViTModel& model, const EpochData& data, const ToyDataset* test,
                                const TrainOptions& opt,
                                const std::function<void(std::size_t, double)>& on_epoch = {}) {
  const ViTConfig& cfg = model.config();
  std::vector<Tensor*> params;
  visit_params(model.params(), [&](const std::string&, Tensor& t) { params.push_back(&t); });
  std::vector<AdamState> states;
  for (Tensor* p : params) states.emplace_back(p->shape());

  TrainReport report;
  Rng rng(derive_seed(opt.seed, {0x7EA1}));
  std::size_t step = 0;
  const ToyDataset* last = nullptr;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const ToyDataset& train = data(epoch);
    last = &train;
    if (train.size() == 0) throw std::invalid_argument("train_toy: empty dataset");
    for (int l : train.labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= cfg.num_classes) {
        throw std::invalid_argument("train_toy: label " + std::to_string(l) + " outside model's " +
                                    std::to_string(cfg.num_classes) + " classes");
      }
    }
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per = train.images.size() / train.size();
    const std::size_t s = train.image_size();
    const std::size_t steps_per_epoch = (train.size() + opt.batch_size - 1) / opt.batch_size;
    const double total_steps = static_cast<double>(steps_per_epoch * opt.epochs);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train.size(); start += opt.batch_size) {
      const std::size_t b = std::min(opt.batch_size, train.size() - start);
      Tensor images({b, 3, s, s});
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t src = order[start + i];
        std::copy_n(train.images.data().data() + src * per, per, images.data().data() + i * per);
        labels[i] = train.labels[src];
      }
      Tape tape;
      ModelParams<Var> p = bind(tape, model.params(), true);
      ForwardVars fv = forward(tape.constant(images), p, cfg);
      Var loss = cross_entropy(fv.logits, labels);
      tape.backward(loss);
      report.step_losses.push_back(loss.value().item());
      epoch_loss += loss.value().item() * static_cast<double>(b);

      const double progress = std::min(1.0, static_cast<double>(step) / total_steps);
      AdamOptions ao;
      ao.lr = opt.lr * (opt.final_lr_fraction +
                        (1.0 - opt.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * progress)));
      if (progress < opt.warmup_fraction) ao.lr *= (static_cast<double>(step) + 1.0) / (opt.warmup_fraction * total_steps);
      std::vector<Var*> vars;
      visit_params(p, [&](const std::string&, Var& v) { vars.push_back(&v); });
      for (std::size_t i = 0; i < params.size(); ++i) adam_step(*params[i], tape.grad(*vars[i]), states[i], ao);
      ++step;
    }
    if (on_epoch) on_epoch(epoch, epoch_loss / static_cast<double>(train.size()));
  }
  const std::size_t k1[] = {1};
  if (last) report.train_top1 = evaluate_topk(fp_logits(model), *last, k1)[0];
  if (test) report.test_top1 = evaluate_topk(fp_logits(model), *test, k1)[0];
  return report;
}

inline TrainReport train_toy(ViTModel& model, const ToyDataset& train, const ToyDataset* test,
                             const TrainOptions& opt,
                             const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (train.size() == 0) throw std::invalid_argument("train_toy: empty dataset");
  return train_epochs(model, [&train](std::size_t) -> const ToyDataset& { return train; }, test, opt, on_epoch);
}

}  // namespace dfqvit
