#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ntseg/train.hpp"
#include "ntseg/unet.hpp"
#include "ntseg/volume.hpp"

// Data-selection procedures: bootstrap ranking of candidate training subsets
// and suggestive annotation of unlabeled volumes. Both train one fresh model
// per candidate from the same seed, so score differences come from the data,
// and score it by per-volume, per-tissue-class DSC on held-out volumes.

namespace ntseg {

struct LabeledVolume {
  Volume image;
  LabelVolume labels;
};

// Ordered by id, which fixes every iteration order in the procedures.
using VolumePool = std::map<std::string, LabeledVolume>;

struct CandidateSubset {
  std::string subset_id;
  std::vector<std::string> ids;  // may repeat: sampling with replacement
};

struct SelectionRow {
  std::string id;                     // candidate or unlabeled volume id
  std::array<double, 3> dsc{};        // CSF, GM, WM, averaged over volumes
  double mean_dsc = 0.0;
  size_t rank = 0;                    // 1-based, row order matches rank
  bool suggested = false;
};

struct SelectionReport {
  std::string mode;           // "bootstrap", "suggest" or "verify"
  uint64_t seed = 0;
  size_t fixed_epochs = 0;    // per-candidate epochs; 0 = early stopping
  std::vector<SelectionRow> rows;
  std::string winner;                  // bootstrap/verify: top-ranked id
  std::vector<std::string> suggested;  // suggest: the k lowest-DSC ids
};

// Seeded sampling with replacement: `count` subsets of `size` ids each.
struct BootstrapSampler {
  size_t count = 5;
  size_t size = 5;
  uint64_t seed = 0;
};

std::vector<CandidateSubset> sample_candidates(
    const std::vector<std::string>& pool_ids, const BootstrapSampler& spec);

// Trains one model per candidate subset (same config and seed for all) and
// ranks the candidates by mean tissue DSC on the evaluation volumes,
// descending. Candidate ids must exist in `pool` and stay out of `eval_set`.
SelectionReport bootstrap_select(const VolumePool& pool,
                                 const std::vector<CandidateSubset>& candidates,
                                 const VolumePool& eval_set,
                                 const UNetConfig& model_cfg,
                                 const TrainConfig& train_cfg);

SelectionReport bootstrap_select(const VolumePool& pool,
                                 const BootstrapSampler& sampler,
                                 const VolumePool& eval_set,
                                 const UNetConfig& model_cfg,
                                 const TrainConfig& train_cfg);

// Tile, forward, untile: the model's argmax labels in volume geometry.
LabelVolume pseudo_label(const UNetParams<float>& model, const Volume& volume,
                         size_t batch_size = 32);

// Trains a base model on `base_train`, then scores each unlabeled volume by
// how a fresh model trained for exactly `fixed_epochs` on base ∪ {volume with
// its pseudo-label} performs on `probe_set`. The k lowest scorers are the
// suggested annotations; rows are sorted ascending.
SelectionReport suggest_annotations(const VolumePool& base_train,
                                    const std::map<std::string, Volume>& unlabeled,
                                    const VolumePool& probe_set,
                                    const UNetConfig& model_cfg,
                                    const TrainConfig& train_cfg,
                                    size_t fixed_epochs, size_t k);

// Re-scores a chosen subset against alternatives with the bootstrap engine;
// purely tabulation, mode "verify".
SelectionReport verify_selection(const VolumePool& pool,
                                 const CandidateSubset& selected,
                                 const std::vector<CandidateSubset>& alternatives,
                                 const VolumePool& eval_set,
                                 const UNetConfig& model_cfg,
                                 const TrainConfig& train_cfg);

// First line echoes mode/seed/fixed_epochs, then
// candidate_or_volume_id,dsc_csf,dsc_gm,dsc_wm,mean_dsc,rank,suggested.
std::string selection_report_csv(const SelectionReport& report);
std::string selection_report_json(const SelectionReport& report);

}  // namespace ntseg
