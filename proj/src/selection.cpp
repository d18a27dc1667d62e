#include "ntseg/selection.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ntseg/loss.hpp"
#include "ntseg/metrics.hpp"
#include "ntseg/patches.hpp"
#include "ntseg/rng.hpp"

namespace ntseg {

namespace {

// Tiles one labeled volume and splices its foreground-slice patches into
// `dst`. Only the patch list matters for training, so repeated ids (sampling
// with replacement) are fine here.
void append_training_patches(PatchSet& dst, const std::string& id,
                             const Volume& img, const LabelVolume& lab) {
  PatchSet one = tile_patches(id, img, lab);
  drop_background_only_slices(one);
  for (Patch& p : one.patches) dst.patches.push_back(std::move(p));
}

PatchSet training_patches(const VolumePool& pool,
                          const std::vector<std::string>& ids) {
  PatchSet set;
  for (const std::string& id : ids) {
    const LabeledVolume& v = pool.at(id);
    append_training_patches(set, id, v.image, v.labels);
  }
  check(!set.patches.empty(),
        "selection: training subset has no foreground slices");
  return set;
}

// One fresh model per candidate, always from the same seeded initialization.
// Early stopping holds validation volumes out of the candidate itself.
UNetParams<float> train_candidate(const VolumePool& pool,
                                  const std::vector<std::string>& ids,
                                  const UNetConfig& model_cfg,
                                  const TrainConfig& train_cfg) {
  UNetParams<float> init = unet_build<float>(model_cfg);
  if (train_cfg.fixed_epochs_mode || train_cfg.validation_metric_hook)
    return train(std::move(init), training_patches(pool, ids), PatchSet{},
                 train_cfg)
        .model;

  std::vector<std::string> unique(ids);
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  check(unique.size() >= 2,
        "selection: early stopping needs at least two distinct volumes per "
        "candidate");
  auto [train_ids, val_ids] = split_train_validation(
      unique, train_cfg.validation_fraction, train_cfg.seed);
  const std::set<std::string> held_out(val_ids.begin(), val_ids.end());
  std::vector<std::string> kept;
  for (const std::string& id : ids)
    if (!held_out.count(id)) kept.push_back(id);
  return train(std::move(init), training_patches(pool, kept),
               training_patches(pool, val_ids), train_cfg)
      .model;
}

// Per-class DSC over the evaluation volumes: computed per reassembled
// volume, then averaged per class across volumes.
std::array<double, 3> eval_dsc(const UNetParams<float>& model,
                               const VolumePool& eval_set, size_t batch_size) {
  std::array<double, 3> sum{};
  for (const auto& [id, v] : eval_set) {
    const LabelVolume pred = pseudo_label(model, v.image, batch_size);
    for (uint8_t cls = 1; cls <= 3; ++cls)
      sum[cls - 1] += hard_dsc(pred.labels, v.labels.labels, cls);
  }
  for (double& s : sum) s /= static_cast<double>(eval_set.size());
  return sum;
}

SelectionRow scored_row(std::string id, const UNetParams<float>& model,
                        const VolumePool& eval_set, size_t batch_size) {
  SelectionRow row;
  row.id = std::move(id);
  row.dsc = eval_dsc(model, eval_set, batch_size);
  row.mean_dsc = (row.dsc[0] + row.dsc[1] + row.dsc[2]) / 3.0;
  return row;
}

void rank_rows(std::vector<SelectionRow>& rows, bool ascending) {
  std::sort(rows.begin(), rows.end(),
            [&](const SelectionRow& a, const SelectionRow& b) {
              if (a.mean_dsc != b.mean_dsc)
                return ascending ? a.mean_dsc < b.mean_dsc
                                 : a.mean_dsc > b.mean_dsc;
              return a.id < b.id;
            });
  for (size_t i = 0; i < rows.size(); ++i) rows[i].rank = i + 1;
}

}  // namespace

std::vector<CandidateSubset> sample_candidates(
    const std::vector<std::string>& pool_ids, const BootstrapSampler& spec) {
  check(!pool_ids.empty(), "sample_candidates: empty pool");
  check(spec.count >= 1 && spec.size >= 1,
        "sample_candidates: count and size must be >= 1");
  Rng rng(derive_seed(spec.seed, "selection/bootstrap"));
  std::vector<CandidateSubset> out;
  out.reserve(spec.count);
  for (size_t c = 0; c < spec.count; ++c) {
    CandidateSubset s;
    s.subset_id = "bootstrap-" + std::to_string(c + 1);
    for (size_t i = 0; i < spec.size; ++i)
      s.ids.push_back(pool_ids[rng.next_u64() % pool_ids.size()]);
    out.push_back(std::move(s));
  }
  return out;
}

SelectionReport bootstrap_select(const VolumePool& pool,
                                 const std::vector<CandidateSubset>& candidates,
                                 const VolumePool& eval_set,
                                 const UNetConfig& model_cfg,
                                 const TrainConfig& train_cfg) {
  model_cfg.validate();
  train_cfg.validate();
  check(!candidates.empty(), "bootstrap_select: no candidates");
  check(!eval_set.empty(), "bootstrap_select: empty evaluation set");

  std::set<std::string> subset_ids;
  for (const CandidateSubset& c : candidates) {
    check(!c.subset_id.empty(), "bootstrap_select: candidate without an id");
    check(subset_ids.insert(c.subset_id).second,
          "bootstrap_select: duplicate candidate id '" + c.subset_id + "'");
    check(!c.ids.empty(),
          "bootstrap_select: candidate '" + c.subset_id + "' is empty");
    std::set<std::string> overlap;
    for (const std::string& id : c.ids) {
      check(pool.count(id) > 0, "bootstrap_select: candidate '" + c.subset_id +
                                    "' names unknown volume '" + id + "'");
      if (eval_set.count(id)) overlap.insert(id);
    }
    if (!overlap.empty()) {
      std::string msg = "bootstrap_select: candidate '" + c.subset_id +
                        "' overlaps the evaluation set:";
      for (const std::string& id : overlap) msg += " " + id;
      throw std::invalid_argument(msg);
    }
  }

  SelectionReport report;
  report.mode = "bootstrap";
  report.seed = train_cfg.seed;
  report.fixed_epochs = train_cfg.fixed_epochs_mode ? train_cfg.fixed_epochs : 0;
  for (const CandidateSubset& c : candidates) {
    const UNetParams<float> model =
        train_candidate(pool, c.ids, model_cfg, train_cfg);
    report.rows.push_back(
        scored_row(c.subset_id, model, eval_set, train_cfg.batch_size));
  }
  rank_rows(report.rows, /*ascending=*/false);
  report.winner = report.rows.front().id;
  return report;
}

SelectionReport bootstrap_select(const VolumePool& pool,
                                 const BootstrapSampler& sampler,
                                 const VolumePool& eval_set,
                                 const UNetConfig& model_cfg,
                                 const TrainConfig& train_cfg) {
  std::vector<std::string> pool_ids;
  pool_ids.reserve(pool.size());
  for (const auto& [id, v] : pool) pool_ids.push_back(id);
  return bootstrap_select(pool, sample_candidates(pool_ids, sampler), eval_set,
                          model_cfg, train_cfg);
}

LabelVolume pseudo_label(const UNetParams<float>& model, const Volume& volume,
                         size_t batch_size) {
  check(batch_size >= 1, "pseudo_label: batch_size must be >= 1");
  LabelVolume blank;
  blank.dims = volume.dims;
  blank.spacing = volume.spacing;
  blank.labels.assign(volume.dims.voxels(), 0);
  PatchSet set = tile_patches("volume", volume, blank);

  std::vector<TensorF> probs;
  probs.reserve(set.patches.size());
  for (size_t i = 0; i < set.patches.size(); i += batch_size) {
    const size_t end = std::min(set.patches.size(), i + batch_size);
    std::vector<const Patch*> batch;
    batch.reserve(end - i);
    for (size_t j = i; j < end; ++j) batch.push_back(&set.patches[j]);
    const TensorF out = unet_forward(model, patch_images(batch));
    const size_t per_patch = kNumClasses * kPatchSize * kPatchSize;
    for (size_t j = 0; j < batch.size(); ++j) {
      TensorF one({kNumClasses, kPatchSize, kPatchSize});
      std::copy_n(out.data() + j * per_patch, per_patch, one.data());
      probs.push_back(std::move(one));
    }
  }
  return untile(set, "volume", probs);
}

SelectionReport suggest_annotations(
    const VolumePool& base_train, const std::map<std::string, Volume>& unlabeled,
    const VolumePool& probe_set, const UNetConfig& model_cfg,
    const TrainConfig& train_cfg, size_t fixed_epochs, size_t k) {
  model_cfg.validate();
  train_cfg.validate();
  check(!base_train.empty(), "suggest_annotations: empty base training set");
  check(!unlabeled.empty(), "suggest_annotations: no unlabeled volumes");
  check(!probe_set.empty(), "suggest_annotations: empty probe set");
  check(fixed_epochs >= 1, "suggest_annotations: fixed_epochs must be >= 1");
  check(k >= 1 && k <= unlabeled.size(),
        "suggest_annotations: k must be in [1, number of unlabeled volumes]");
  for (const auto& [id, v] : probe_set) {
    check(base_train.count(id) == 0, "suggest_annotations: probe volume '" +
                                         id + "' is in the base training set");
    check(unlabeled.count(id) == 0, "suggest_annotations: probe volume '" + id +
                                        "' is in the unlabeled set");
  }
  for (const auto& [id, v] : unlabeled)
    check(base_train.count(id) == 0, "suggest_annotations: unlabeled volume '" +
                                         id + "' is in the base training set");

  std::vector<std::string> base_ids;
  base_ids.reserve(base_train.size());
  for (const auto& [id, v] : base_train) base_ids.push_back(id);
  const UNetParams<float> base_model =
      train_candidate(base_train, base_ids, model_cfg, train_cfg);

  TrainConfig probe_cfg = train_cfg;
  probe_cfg.fixed_epochs_mode = true;
  probe_cfg.fixed_epochs = fixed_epochs;
  probe_cfg.validation_metric_hook = nullptr;

  SelectionReport report;
  report.mode = "suggest";
  report.seed = train_cfg.seed;
  report.fixed_epochs = fixed_epochs;
  const PatchSet base_patches = training_patches(base_train, base_ids);
  for (const auto& [id, vol] : unlabeled) {
    const LabelVolume pseudo =
        pseudo_label(base_model, vol, train_cfg.batch_size);
    PatchSet augmented = base_patches;
    append_training_patches(augmented, id, vol, pseudo);
    const UNetParams<float> probe_model =
        train(unet_build<float>(model_cfg), augmented, PatchSet{}, probe_cfg)
            .model;
    report.rows.push_back(
        scored_row(id, probe_model, probe_set, train_cfg.batch_size));
  }
  rank_rows(report.rows, /*ascending=*/true);
  for (size_t i = 0; i < k; ++i) {
    report.rows[i].suggested = true;
    report.suggested.push_back(report.rows[i].id);
  }
  return report;
}

SelectionReport verify_selection(const VolumePool& pool,
                                 const CandidateSubset& selected,
                                 const std::vector<CandidateSubset>& alternatives,
                                 const VolumePool& eval_set,
                                 const UNetConfig& model_cfg,
                                 const TrainConfig& train_cfg) {
  std::vector<CandidateSubset> all;
  all.reserve(alternatives.size() + 1);
  all.push_back(selected);
  all.insert(all.end(), alternatives.begin(), alternatives.end());
  SelectionReport report =
      bootstrap_select(pool, all, eval_set, model_cfg, train_cfg);
  report.mode = "verify";
  return report;
}

std::string selection_report_csv(const SelectionReport& report) {
  std::string out = "# mode=" + report.mode +
                    ",seed=" + std::to_string(report.seed) +
                    ",fixed_epochs=" + std::to_string(report.fixed_epochs) +
                    "\n";
  out += "candidate_or_volume_id,dsc_csf,dsc_gm,dsc_wm,mean_dsc,rank,suggested\n";
  char buf[96];
  for (const SelectionRow& r : report.rows) {
    out += r.id;
    for (double d : r.dsc) {
      std::snprintf(buf, sizeof buf, ",%.6f", d);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.6f,%zu,", r.mean_dsc, r.rank);
    out += buf;
    out += r.suggested ? "true" : "false";
    out += '\n';
  }
  return out;
}

std::string selection_report_json(const SelectionReport& report) {
  nlohmann::json j;
  j["mode"] = report.mode;
  j["seed"] = report.seed;
  j["fixed_epochs"] = report.fixed_epochs;
  if (!report.winner.empty()) j["winner"] = report.winner;
  j["suggested"] = report.suggested;
  auto rows = nlohmann::json::array();
  for (const SelectionRow& r : report.rows)
    rows.push_back({{"candidate_or_volume_id", r.id},
                    {"dsc_csf", r.dsc[0]},
                    {"dsc_gm", r.dsc[1]},
                    {"dsc_wm", r.dsc[2]},
                    {"mean_dsc", r.mean_dsc},
                    {"rank", r.rank},
                    {"suggested", r.suggested}});
  j["rows"] = std::move(rows);
  return j.dump(2) + "\n";
}

}  // namespace ntseg
