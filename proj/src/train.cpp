#include "ntseg/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "ntseg/loss.hpp"
#include "ntseg/metrics.hpp"
#include "ntseg/optim.hpp"
#include "ntseg/rng.hpp"

namespace ntseg {

namespace {

std::vector<std::vector<const Patch*>> make_batches(
    const std::vector<const Patch*>& order, size_t batch_size) {
  std::vector<std::vector<const Patch*>> batches;
  for (size_t i = 0; i < order.size(); i += batch_size) {
    const size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<ptrdiff_t>(i),
                         order.begin() + static_cast<ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace

void TrainConfig::validate() const {
  check(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  check(learning_rate > 0, "TrainConfig: learning_rate must be positive");
  check(validation_fraction > 0 && validation_fraction < 1,
        "TrainConfig: validation_fraction must be in (0,1)");
  if (fixed_epochs_mode) {
    check(fixed_epochs >= 1, "TrainConfig: fixed_epochs must be >= 1");
  } else {
    check(max_epochs >= 1, "TrainConfig: max_epochs must be >= 1");
    check(patience >= 1 && patience < max_epochs,
          "TrainConfig: patience must be in [1, max_epochs)");
  }
}

double evaluate_patches(const UNetParams<float>& model, const PatchSet& set,
                        size_t batch_size) {
  check(!set.patches.empty(), "evaluate_patches: empty patch set");
  std::vector<const Patch*> order;
  order.reserve(set.patches.size());
  for (const Patch& p : set.patches) order.push_back(&p);

  std::vector<uint8_t> pred_all, true_all;
  pred_all.reserve(set.patches.size() * kPatchSize * kPatchSize);
  true_all.reserve(set.patches.size() * kPatchSize * kPatchSize);
  for (const auto& batch : make_batches(order, batch_size)) {
    TensorF probs = unet_forward(model, patch_images(batch));
    std::vector<uint8_t> pred = reconstruct_labels(probs);
    pred_all.insert(pred_all.end(), pred.begin(), pred.end());
    for (const Patch* p : batch)
      true_all.insert(true_all.end(), p->labels.begin(), p->labels.end());
  }
  return mean_tissue_dsc(pred_all, true_all);
}

TrainResult train(UNetParams<float> init, const PatchSet& train_set,
                  const PatchSet& val_set, const TrainConfig& cfg) {
  cfg.validate();
  check(!train_set.patches.empty(), "train: no training patches");
  const bool early_stopping = !cfg.fixed_epochs_mode;
  const bool have_metric =
      static_cast<bool>(cfg.validation_metric_hook) || !val_set.patches.empty();
  check(!early_stopping || have_metric,
        "train: early stopping needs validation patches (or a metric hook)");

  AdamConfig adam_cfg{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
  AdamState<float> adam = AdamState<float>::like(init);
  UNetParams<float>& model = init;

  std::vector<const Patch*> order;
  order.reserve(train_set.patches.size());
  for (const Patch& p : train_set.patches) order.push_back(&p);
  Rng shuffle_rng(derive_seed(cfg.seed, "train/shuffle"));

  TrainResult result;
  result.model = model;  // placeholder until first snapshot / final copy
  // The snapshot follows any strict improvement (best model = max over
  // history); the patience counter only resets on a material one.
  double snapshot_best = -1.0;
  double patience_best = -1.0;
  size_t since_best = 0;
  const size_t total_epochs =
      cfg.fixed_epochs_mode ? cfg.fixed_epochs : cfg.max_epochs;

  for (size_t epoch = 1; epoch <= total_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::array<double, 4> dsc_sum{};
    const auto batches = make_batches(order, cfg.batch_size);
    for (size_t b = 0; b < batches.size(); ++b) {
      TensorF images = patch_images(batches[b]);
      TensorF target = patch_onehot(batches[b]);

      UNetCache<float> cache;
      TensorF probs = unet_forward(model, images, &cache);
      const double loss = dice_loss(probs, target);
      if (!std::isfinite(loss))
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " +
                                 std::to_string(b + 1));
      loss_sum += loss;
      const auto dsc = soft_dice(probs, target);
      for (size_t c = 0; c < 4; ++c) dsc_sum[c] += dsc[c];

      TensorF grad_probs = dice_loss_backward(probs, target);
      UNetParams<float> grads = unet_backward(model, cache, grad_probs);
      adam_step(model, grads, adam, adam_cfg);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(batches.size());
    for (size_t c = 0; c < 4; ++c)
      stats.soft_dsc[c] = dsc_sum[c] / static_cast<double>(batches.size());

    if (have_metric)
      stats.val_mean_dsc =
          cfg.validation_metric_hook
              ? cfg.validation_metric_hook(epoch, model)
              : evaluate_patches(model, val_set, cfg.batch_size);
    else
      stats.val_mean_dsc = std::nan("");

    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.history.epochs.push_back(stats);

    if (early_stopping) {
      const double metric = stats.val_mean_dsc;
      if (epoch == 1 || metric > snapshot_best) {
        snapshot_best = metric;
        result.history.best_epoch = epoch;
        result.model = model;
      }
      if (epoch == 1 || metric >= patience_best + cfg.min_improvement) {
        since_best = 0;
      } else {
        ++since_best;
        if (since_best == cfg.patience) break;
      }
      patience_best = epoch == 1 ? metric : std::max(patience_best, metric);
    }
  }

  if (!early_stopping) {
    result.model = std::move(model);
    result.history.best_epoch = 0;
  }
  return result;
}

void write_history_csv(const TrainHistory& history, const std::string& path,
                       bool include_seconds, const std::string& comment) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  if (!comment.empty()) out << comment << '\n';
  out << "epoch,loss,val_mean_dsc,dsc_bg,dsc_csf,dsc_gm,dsc_wm,seconds\n";
  char buf[64];
  auto cell = [&](double v) {
    if (std::isnan(v)) return std::string("NA");
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const EpochStats& e : history.epochs) {
    out << e.epoch << ',' << cell(e.loss) << ',' << cell(e.val_mean_dsc);
    for (double d : e.soft_dsc) out << ',' << cell(d);
    std::snprintf(buf, sizeof buf, "%.3f", include_seconds ? e.seconds : 0.0);
    out << ',' << buf << '\n';
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::pair<std::vector<std::string>, std::vector<std::string>>
split_train_validation(const std::vector<std::string>& ids, double fraction,
                       uint64_t seed) {
  check(ids.size() >= 2, "split_train_validation: need at least two volumes");
  check(fraction > 0 && fraction < 1,
        "split_train_validation: fraction must be in (0,1)");
  std::vector<std::string> shuffled = ids;
  Rng rng(derive_seed(seed, "train/val-split"));
  rng.shuffle(shuffled);
  size_t n_val = static_cast<size_t>(
      std::ceil(fraction * static_cast<double>(ids.size())));
  n_val = std::max<size_t>(1, std::min(n_val, ids.size() - 1));
  std::vector<std::string> val(shuffled.begin(),
                               shuffled.begin() + static_cast<ptrdiff_t>(n_val));
  std::vector<std::string> train(
      shuffled.begin() + static_cast<ptrdiff_t>(n_val), shuffled.end());
  return {std::move(train), std::move(val)};
}

}  // namespace ntseg
