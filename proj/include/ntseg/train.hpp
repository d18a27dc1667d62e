#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ntseg/patches.hpp"
#include "ntseg/unet.hpp"

// The training loop: seeded-shuffled mini-batches, batch-summed dice loss,
// Adam, and patience-based early stopping on the validation mean tissue DSC.
// Early-stop mode returns the best-validation snapshot; fixed-epochs mode
// runs exactly `fixed_epochs` and returns the final model.

namespace ntseg {

struct TrainConfig {
  size_t max_epochs = 500;
  size_t patience = 30;
  size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  uint64_t seed = 0;
  double validation_fraction = 0.2;  // of training volumes, for the callers
  double min_improvement = 1e-5;
  bool fixed_epochs_mode = false;
  size_t fixed_epochs = 50;

  // Test hook: when set, replaces the validation-metric computation.
  std::function<double(size_t epoch, const UNetParams<float>& model)>
      validation_metric_hook;

  void validate() const;
};

struct EpochStats {
  size_t epoch = 0;  // 1-based
  double loss = 0.0;  // mean batch dice loss
  double val_mean_dsc = 0.0;
  std::array<double, 4> soft_dsc{};  // bg, csf, gm, wm over training batches
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  size_t best_epoch = 0;  // 1-based, 0 when fixed-epochs mode kept the final
};

struct TrainResult {
  UNetParams<float> model;
  TrainHistory history;
};

TrainResult train(UNetParams<float> init, const PatchSet& train_set,
                  const PatchSet& val_set, const TrainConfig& cfg);

// Pooled mean tissue DSC of argmax predictions over a patch set.
double evaluate_patches(const UNetParams<float>& model, const PatchSet& set,
                        size_t batch_size);

// CSV: epoch, loss, val_mean_dsc, dsc_bg, dsc_csf, dsc_gm, dsc_wm, seconds.
// With include_seconds=false the seconds column is written as 0.000 so two
// identical runs produce identical bytes. A nonempty comment becomes the
// first line, before the column header.
void write_history_csv(const TrainHistory& history, const std::string& path,
                       bool include_seconds = true,
                       const std::string& comment = "");

// Carves validation volumes out of a training id list: ceil(fraction * n),
// at least 1, chosen by seeded shuffle.
std::pair<std::vector<std::string>, std::vector<std::string>>
split_train_validation(const std::vector<std::string>& ids, double fraction,
                       uint64_t seed);

}  // namespace ntseg
