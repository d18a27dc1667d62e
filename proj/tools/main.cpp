// ntseg command-line driver.
//
// Every command reads one JSON experiment config (--config), optionally
// overridden by --seed and --out, and derives all randomness from the single
// top-level seed via derive_seed tags:
//
//   "<prefix>/<i>"   phantom volume i (1-based) of a family
//   "split"          train/validation/test split
//   "model/init"     Glorot initialisation
//   "train"          shuffling and validation holdout (all training runs)
//
// Outputs go under --out (or config "output"): files are written to a
// temporary name and renamed, the directory is guarded by a lockfile while a
// command runs, and every artifact embeds the config hash (a 16-hex-digit
// FNV-1a of the canonical config dump after overrides).

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ntseg/checkpoint.hpp"
#include "ntseg/gradient_suite.hpp"
#include "ntseg/metrics.hpp"
#include "ntseg/parallel.hpp"
#include "ntseg/patches.hpp"
#include "ntseg/phantom.hpp"
#include "ntseg/rng.hpp"
#include "ntseg/selection.hpp"
#include "ntseg/split.hpp"
#include "ntseg/train.hpp"
#include "ntseg/unet.hpp"
#include "ntseg/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ntseg;

namespace {

constexpr const char* kVersion = "ntseg 1.0.0";

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string hex16(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// config

struct Experiment {
  json cfg = json::object();
  uint64_t seed = 0;
  std::string out_dir;
  std::string hash;
};

void expect_keys(const json& obj, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail("config: " + where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) fail("config: unknown key '" + it.key() + "' in " + where);
  }
}

Experiment load_experiment(const std::string& config_path,
                           const std::string& out_override,
                           const std::optional<uint64_t>& seed_override,
                           bool config_required) {
  Experiment e;
  if (!config_path.empty()) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) fail("cannot open config '" + config_path + "'");
    try {
      e.cfg = json::parse(in);
    } catch (const json::exception& ex) {
      fail("config '" + config_path + "' is not valid JSON: " + ex.what());
    }
  } else if (config_required) {
    fail("this command needs --config");
  }
  expect_keys(e.cfg, "the top level",
              {"seed", "output", "data", "model", "train", "selection"});
  if (seed_override) e.cfg["seed"] = *seed_override;
  if (!out_override.empty()) e.cfg["output"] = out_override;
  if (e.cfg.contains("seed") && !e.cfg.at("seed").is_number_unsigned())
    fail("config: seed must be a non-negative integer");
  e.seed = e.cfg.value("seed", uint64_t{0});
  e.out_dir = e.cfg.value("output", std::string{});
  // the hash identifies the experiment, not where it is written
  json hashable = e.cfg;
  hashable.erase("output");
  e.hash = hex16(fnv1a64(hashable.dump()));
  return e;
}

UNetConfig parse_model(const Experiment& e) {
  UNetConfig cfg;
  if (e.cfg.contains("model")) {
    const json& m = e.cfg.at("model");
    expect_keys(m, "model",
                {"in_channels", "num_classes", "base_channels", "depth"});
    cfg.in_channels = m.value("in_channels", cfg.in_channels);
    cfg.num_classes = m.value("num_classes", cfg.num_classes);
    cfg.base_channels = m.value("base_channels", cfg.base_channels);
    cfg.depth = m.value("depth", cfg.depth);
  }
  cfg.seed = derive_seed(e.seed, "model/init");
  cfg.validate();
  return cfg;
}

TrainConfig parse_train(const Experiment& e, bool required) {
  if (required && !e.cfg.contains("train"))
    fail("config: missing 'train' section");
  TrainConfig cfg;
  if (e.cfg.contains("train")) {
    const json& t = e.cfg.at("train");
    expect_keys(t, "train",
                {"max_epochs", "patience", "batch_size", "learning_rate",
                 "beta1", "beta2", "epsilon", "validation_fraction",
                 "min_improvement", "fixed_epochs_mode", "fixed_epochs"});
    cfg.max_epochs = t.value("max_epochs", cfg.max_epochs);
    cfg.patience = t.value("patience", cfg.patience);
    cfg.batch_size = t.value("batch_size", cfg.batch_size);
    cfg.learning_rate = t.value("learning_rate", cfg.learning_rate);
    cfg.beta1 = t.value("beta1", cfg.beta1);
    cfg.beta2 = t.value("beta2", cfg.beta2);
    cfg.epsilon = t.value("epsilon", cfg.epsilon);
    cfg.validation_fraction =
        t.value("validation_fraction", cfg.validation_fraction);
    cfg.min_improvement = t.value("min_improvement", cfg.min_improvement);
    cfg.fixed_epochs_mode = t.value("fixed_epochs_mode", cfg.fixed_epochs_mode);
    cfg.fixed_epochs = t.value("fixed_epochs", cfg.fixed_epochs);
  }
  cfg.seed = derive_seed(e.seed, "train");
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// data

struct PhantomFamily {
  std::string prefix = "phantom";
  size_t count = 0;
  PhantomSpec spec;  // seed is filled per volume
};

std::array<double, 3> parse_triple(const json& a, const std::string& what) {
  if (!a.is_array() || a.size() != 3)
    fail("config: " + what + " must be a [z, y, x] array");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

std::vector<PhantomFamily> parse_phantoms(const json& arr) {
  if (!arr.is_array() || arr.empty())
    fail("config: data.phantoms must be a nonempty array");
  std::vector<PhantomFamily> families;
  std::set<std::string> prefixes;
  for (const json& f : arr) {
    expect_keys(f, "data.phantoms[]",
                {"prefix", "count", "dims", "spacing", "noise_sigma",
                 "bias_amplitude", "class_means", "wm_axes", "gm_axes",
                 "csf_axes"});
    PhantomFamily fam;
    fam.prefix = f.value("prefix", fam.prefix);
    if (!prefixes.insert(fam.prefix).second)
      fail("config: duplicate phantom prefix '" + fam.prefix + "'");
    fam.count = f.value("count", size_t{0});
    if (fam.count == 0) fail("config: data.phantoms[].count must be >= 1");
    if (f.contains("dims")) {
      const json& d = f.at("dims");
      if (!d.is_array() || d.size() != 3)
        fail("config: dims must be a [z, y, x] array");
      fam.spec.dims = {d[0].get<size_t>(), d[1].get<size_t>(),
                       d[2].get<size_t>()};
    }
    if (f.contains("spacing")) fam.spec.spacing = parse_triple(f.at("spacing"), "spacing");
    fam.spec.noise_sigma = f.value("noise_sigma", fam.spec.noise_sigma);
    fam.spec.bias_amplitude = f.value("bias_amplitude", fam.spec.bias_amplitude);
    if (f.contains("class_means")) {
      const json& m = f.at("class_means");
      if (!m.is_array() || m.size() != 4)
        fail("config: class_means must have 4 entries (bg, csf, gm, wm)");
      for (size_t i = 0; i < 4; ++i) fam.spec.class_means[i] = m[i].get<double>();
    }
    if (f.contains("wm_axes")) fam.spec.wm_axes = parse_triple(f.at("wm_axes"), "wm_axes");
    if (f.contains("gm_axes")) fam.spec.gm_axes = parse_triple(f.at("gm_axes"), "gm_axes");
    if (f.contains("csf_axes")) fam.spec.csf_axes = parse_triple(f.at("csf_axes"), "csf_axes");
    fam.spec.seed = 0;
    fam.spec.validate();
    families.push_back(std::move(fam));
  }
  return families;
}

std::string phantom_id(const std::string& prefix, size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "-%03zu", i + 1);
  return prefix + buf;
}

struct LoadedData {
  std::map<std::string, Volume> images;
  std::map<std::string, LabelVolume> labels;
  SplitManifest split;
  bool has_split = false;
  bool drop_background = true;
};

std::vector<std::string> labeled_ids(const LoadedData& d) {
  std::vector<std::string> ids;
  for (const auto& [id, lab] : d.labels) ids.push_back(id);
  return ids;
}

std::optional<SplitManifest> parse_split(const Experiment& e, const json& data,
                                         const std::vector<std::string>& pool) {
  if (data.contains("split") && data.contains("split_file"))
    fail("config: give data.split or data.split_file, not both");
  if (data.contains("split_file")) {
    return load_split(data.at("split_file").get<std::string>());
  }
  if (!data.contains("split")) return std::nullopt;
  const json& s = data.at("split");
  expect_keys(s, "data.split",
              {"train", "validation", "test", "train_count",
               "validation_count", "test_count"});
  SplitRequest req;
  if (s.contains("train")) req.train = s.at("train").get<std::vector<std::string>>();
  if (s.contains("validation"))
    req.validation = s.at("validation").get<std::vector<std::string>>();
  if (s.contains("test")) req.test = s.at("test").get<std::vector<std::string>>();
  req.train_count = s.value("train_count", size_t{0});
  req.validation_count = s.value("validation_count", size_t{0});
  req.test_count = s.value("test_count", size_t{0});
  req.seed = derive_seed(e.seed, "split");
  return make_split(pool, req);
}

LoadedData load_data(const Experiment& e) {
  if (!e.cfg.contains("data")) fail("config: missing 'data' section");
  const json& data = e.cfg.at("data");
  expect_keys(data, "data",
              {"phantoms", "volumes", "split", "split_file", "normalize",
               "drop_background_slices"});
  const bool have_phantoms = data.contains("phantoms");
  const bool have_volumes = data.contains("volumes");
  if (have_phantoms == have_volumes)
    fail("config: data needs exactly one of 'phantoms' or 'volumes'");

  LoadedData out;
  out.drop_background = data.value("drop_background_slices", true);
  if (have_phantoms) {
    for (const PhantomFamily& fam : parse_phantoms(data.at("phantoms"))) {
      for (size_t i = 0; i < fam.count; ++i) {
        const std::string id = phantom_id(fam.prefix, i);
        if (out.images.count(id)) fail("config: duplicate volume id '" + id + "'");
        PhantomSpec spec = fam.spec;
        spec.seed = derive_seed(e.seed, fam.prefix + "/" + std::to_string(i + 1));
        auto [img, lab] = phantom_generate(spec);
        out.images.emplace(id, std::move(img));
        out.labels.emplace(id, std::move(lab));
      }
    }
  } else {
    const json& vols = data.at("volumes");
    if (!vols.is_object() || vols.empty())
      fail("config: data.volumes must be a nonempty object of id -> paths");
    for (auto it = vols.begin(); it != vols.end(); ++it) {
      const json& v = it.value();
      expect_keys(v, "data.volumes['" + it.key() + "']", {"image", "labels"});
      if (!v.contains("image"))
        fail("config: volume '" + it.key() + "' needs an image path");
      out.images.emplace(it.key(), load_volume(v.at("image").get<std::string>()));
      if (v.contains("labels")) {
        LabelVolume lab = load_label_volume(v.at("labels").get<std::string>());
        if (!(lab.dims == out.images.at(it.key()).dims))
          fail("volume '" + it.key() + "': image and label dims disagree");
        out.labels.emplace(it.key(), std::move(lab));
      }
    }
  }
  if (data.value("normalize", false))
    for (auto& [id, img] : out.images) normalize_minmax(img);

  std::vector<std::string> pool;
  for (const auto& [id, img] : out.images) pool.push_back(id);
  if (auto split = parse_split(e, data, pool)) {
    out.split = std::move(*split);
    out.has_split = true;
    for (const auto* part : {&out.split.train, &out.split.validation, &out.split.test})
      for (const std::string& id : *part)
        if (!out.images.count(id))
          fail("split names unknown volume '" + id + "'");
  }
  return out;
}

const Volume& image_of(const LoadedData& d, const std::string& id) {
  auto it = d.images.find(id);
  if (it == d.images.end()) fail("unknown volume id '" + id + "'");
  return it->second;
}

const LabelVolume& labels_of(const LoadedData& d, const std::string& id) {
  if (!d.images.count(id)) fail("unknown volume id '" + id + "'");
  auto it = d.labels.find(id);
  if (it == d.labels.end()) fail("volume '" + id + "' has no labels");
  return it->second;
}

PatchSet tile_ids(const LoadedData& d, const std::vector<std::string>& ids) {
  PatchSet set;
  for (const std::string& id : ids)
    merge_into(set, tile_patches(id, image_of(d, id), labels_of(d, id)));
  if (d.drop_background) drop_background_only_slices(set);
  if (set.patches.empty()) fail("no non-background patches in the given volumes");
  return set;
}

VolumePool pool_of(const LoadedData& d, const std::vector<std::string>& ids) {
  VolumePool pool;
  for (const std::string& id : ids)
    pool.emplace(id, LabeledVolume{image_of(d, id), labels_of(d, id)});
  return pool;
}

// ---------------------------------------------------------------------------
// output plumbing

void require_out(const Experiment& e) {
  if (e.out_dir.empty()) fail("this command needs --out (or config 'output')");
  fs::create_directories(e.out_dir);
}

// Guards an output directory for the lifetime of a command.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
    std::error_code ec;
    if (fs::exists(path_, ec))
      fail("output directory '" + dir + "' is locked (stale " + path_ + "?)");
    std::ofstream out(path_);
    if (!out) fail("cannot create lockfile '" + path_ + "'");
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

void write_text_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '" + tmp + "' for writing");
    out << content;
    out.flush();
    if (!out) fail("write failed for '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

template <typename SaveFn>
void write_file_atomic(const std::string& path, SaveFn&& save) {
  const std::string tmp = path + ".tmp";
  save(tmp);
  fs::rename(tmp, path);
}

void write_manifest(const Experiment& e, const std::string& command,
                    json fields) {
  json m{{"command", command}, {"config_hash", e.hash}, {"seed", e.seed}};
  m.update(fields);
  write_text_atomic(e.out_dir + "/manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// commands

int cmd_phantom_gen(const Experiment& e) {
  require_out(e);
  if (!e.cfg.contains("data")) fail("config: missing 'data' section");
  const json& data = e.cfg.at("data");
  expect_keys(data, "data",
              {"phantoms", "split", "split_file", "normalize",
               "drop_background_slices"});
  if (!data.contains("phantoms"))
    fail("config: phantom-gen needs data.phantoms");

  DirLock lock(e.out_dir);
  json files = json::object();
  std::vector<std::string> ids;
  for (const PhantomFamily& fam : parse_phantoms(data.at("phantoms"))) {
    for (size_t i = 0; i < fam.count; ++i) {
      const std::string id = phantom_id(fam.prefix, i);
      if (files.contains(id)) fail("config: duplicate volume id '" + id + "'");
      PhantomSpec spec = fam.spec;
      spec.seed = derive_seed(e.seed, fam.prefix + "/" + std::to_string(i + 1));
      auto [img, lab] = phantom_generate(spec);
      const std::string img_path = e.out_dir + "/" + id + ".ntvol";
      const std::string lab_path = e.out_dir + "/" + id + ".ntlbl";
      write_file_atomic(img_path, [&](const std::string& p) { save_volume(img, p); });
      write_file_atomic(lab_path, [&](const std::string& p) { save_volume(lab, p); });
      files[id] = {{"image", id + ".ntvol"}, {"labels", id + ".ntlbl"}};
      ids.push_back(id);
    }
  }
  json fields{{"volumes", files}};
  if (auto split = parse_split(e, data, ids)) {
    write_file_atomic(e.out_dir + "/split.json",
                      [&](const std::string& p) { save_split(*split, p); });
    fields["split"] = "split.json";
  }
  write_manifest(e, "phantom-gen", fields);
  std::printf("wrote %zu phantom volume(s) to %s (config %s)\n", ids.size(),
              e.out_dir.c_str(), e.hash.c_str());
  return 0;
}

int cmd_train(const Experiment& e, bool timings) {
  require_out(e);
  const TrainConfig tcfg = parse_train(e, /*required=*/true);
  const UNetConfig mcfg = parse_model(e);
  const LoadedData data = load_data(e);

  std::vector<std::string> train_ids, val_ids;
  if (data.has_split) {
    train_ids = data.split.train;
    val_ids = data.split.validation;
  } else {
    std::vector<std::string> all = labeled_ids(data);
    if (all.empty()) fail("no labeled volumes to train on");
    if (tcfg.fixed_epochs_mode || all.size() == 1) {
      train_ids = all;
    } else {
      std::tie(train_ids, val_ids) =
          split_train_validation(all, tcfg.validation_fraction, tcfg.seed);
    }
  }
  if (train_ids.empty()) fail("the training split is empty");
  if (!tcfg.fixed_epochs_mode && val_ids.empty())
    fail("early stopping needs validation volumes: provide a split with a "
         "validation part, more than one labeled volume, or set "
         "train.fixed_epochs_mode");

  const PatchSet train_set = tile_ids(data, train_ids);
  PatchSet val_set;
  if (!val_ids.empty()) val_set = tile_ids(data, val_ids);

  DirLock lock(e.out_dir);
  UNetParams<float> model = unet_build<float>(mcfg);
  std::printf("training: %zu train patch(es) from %zu volume(s), "
              "%zu validation patch(es), %zu parameters\n",
              train_set.patches.size(), train_ids.size(),
              val_set.patches.size(), param_count(model));
  TrainResult result = train(std::move(model), train_set, val_set, tcfg);

  const std::map<std::string, std::string> extra{
      {"config_hash", e.hash},
      {"best_epoch", std::to_string(result.history.best_epoch)},
      {"epochs_run", std::to_string(result.history.epochs.size())}};
  write_file_atomic(e.out_dir + "/model.ckpt", [&](const std::string& p) {
    save_checkpoint(result.model, nullptr, p, extra);
  });
  write_file_atomic(e.out_dir + "/history.csv", [&](const std::string& p) {
    write_history_csv(result.history, p, timings, "# config=" + e.hash);
  });
  write_manifest(e, "train",
                 {{"files", json::array({"model.ckpt", "history.csv"})},
                  {"epochs_run", result.history.epochs.size()},
                  {"best_epoch", result.history.best_epoch}});

  const EpochStats& last = result.history.epochs.back();
  std::printf("trained %zu epoch(s), best epoch %zu, final loss %.6f",
              result.history.epochs.size(), result.history.best_epoch,
              last.loss);
  if (!val_ids.empty()) std::printf(", best val mean DSC %.6f",
                                    result.history.best_epoch == 0
                                        ? last.val_mean_dsc
                                        : result.history
                                              .epochs[result.history.best_epoch - 1]
                                              .val_mean_dsc);
  std::printf("\n");
  return 0;
}

json metrics_row_json(const std::string& id, const VolumeMetrics& m) {
  auto opt = [](const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
  };
  return json{{"volume_id", id},
              {"dsc_csf", m.tissue[0].dsc},
              {"dsc_gm", m.tissue[1].dsc},
              {"dsc_wm", m.tissue[2].dsc},
              {"hd_csf", opt(m.tissue[0].hausdorff)},
              {"hd_gm", opt(m.tissue[1].hausdorff)},
              {"hd_wm", opt(m.tissue[2].hausdorff)},
              {"avd_csf", opt(m.tissue[0].avd)},
              {"avd_gm", opt(m.tissue[1].avd)},
              {"avd_wm", opt(m.tissue[2].avd)},
              {"mean_dsc", m.mean_dsc}};
}

int cmd_eval(const Experiment& e, const std::string& checkpoint,
             const std::string& pred_dir) {
  require_out(e);
  if (checkpoint.empty() == pred_dir.empty())
    fail("eval needs exactly one of --checkpoint or --pred-dir");
  const LoadedData data = load_data(e);

  std::vector<std::string> ids;
  if (e.cfg.contains("selection") && e.cfg.at("selection").contains("eval_ids"))
    ids = e.cfg.at("selection").at("eval_ids").get<std::vector<std::string>>();
  else if (data.has_split && !data.split.test.empty())
    ids = data.split.test;
  else
    ids = labeled_ids(data);
  if (ids.empty()) fail("no volumes to evaluate");

  std::optional<UNetParams<float>> model;
  if (!checkpoint.empty())
    model = load_checkpoint_for(parse_model(e), checkpoint);

  DirLock lock(e.out_dir);
  std::string csv = "# config=" + e.hash + "\n" + metrics_csv_header() + "\n";
  json rows = json::array();
  VolumeMetrics mean{};
  std::array<size_t, 3> hd_n{}, avd_n{};
  for (const std::string& id : ids) {
    const LabelVolume& truth = labels_of(data, id);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<uint8_t> pred;
    if (model) {
      pred = pseudo_label(*model, image_of(data, id)).labels;
    } else {
      LabelVolume p = load_label_volume(pred_dir + "/" + id + ".ntlbl");
      if (!(p.dims == truth.dims))
        fail("prediction for '" + id + "' has the wrong dims");
      pred = std::move(p.labels);
    }
    const VolumeMetrics m =
        evaluate_labels(pred, truth.labels, truth.dims, truth.spacing);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    csv += metrics_csv_row(id, m) + "\n";
    rows.push_back(metrics_row_json(id, m));
    std::printf("  %s: mean DSC %.4f (%.2fs)\n", id.c_str(), m.mean_dsc, seconds);
    for (int c = 0; c < 3; ++c) {
      mean.tissue[c].dsc += m.tissue[c].dsc;
      if (m.tissue[c].hausdorff) {
        mean.tissue[c].hausdorff =
            mean.tissue[c].hausdorff.value_or(0.0) + *m.tissue[c].hausdorff;
        ++hd_n[c];
      }
      if (m.tissue[c].avd) {
        mean.tissue[c].avd = mean.tissue[c].avd.value_or(0.0) + *m.tissue[c].avd;
        ++avd_n[c];
      }
    }
    mean.mean_dsc += m.mean_dsc;
  }
  const double n = static_cast<double>(ids.size());
  for (int c = 0; c < 3; ++c) {
    mean.tissue[c].dsc /= n;
    // a mean over a partial column would be misleading: any missing value
    // makes the aggregate NA
    if (hd_n[c] == ids.size())
      *mean.tissue[c].hausdorff /= n;
    else
      mean.tissue[c].hausdorff.reset();
    if (avd_n[c] == ids.size())
      *mean.tissue[c].avd /= n;
    else
      mean.tissue[c].avd.reset();
  }
  mean.mean_dsc /= n;
  csv += metrics_csv_row("mean", mean) + "\n";

  write_text_atomic(e.out_dir + "/metrics.csv", csv);
  json doc{{"config_hash", e.hash},
           {"seed", e.seed},
           {"rows", rows},
           {"mean", metrics_row_json("mean", mean)}};
  write_text_atomic(e.out_dir + "/metrics.json", doc.dump(2) + "\n");
  write_manifest(e, "eval",
                 {{"files", json::array({"metrics.csv", "metrics.json"})},
                  {"volumes", ids.size()}});
  std::printf("evaluated %zu volume(s): mean tissue DSC %.6f\n", ids.size(),
              mean.mean_dsc);
  return 0;
}

const json& selection_section(const Experiment& e) {
  if (!e.cfg.contains("selection")) fail("config: missing 'selection' section");
  const json& sel = e.cfg.at("selection");
  expect_keys(sel, "selection",
              {"candidates", "sampler", "eval_ids", "base_ids",
               "unlabeled_ids", "probe_ids", "fixed_epochs", "k"});
  return sel;
}

void write_selection_outputs(const Experiment& e, const SelectionReport& report,
                             const std::string& stem) {
  write_text_atomic(e.out_dir + "/" + stem + ".csv",
                    "# config=" + e.hash + "\n" + selection_report_csv(report));
  json doc = json::parse(selection_report_json(report));
  doc["config_hash"] = e.hash;
  write_text_atomic(e.out_dir + "/" + stem + ".json", doc.dump(2) + "\n");
}

int cmd_select(const Experiment& e) {
  require_out(e);
  const json& sel = selection_section(e);
  if (!sel.contains("eval_ids")) fail("config: selection.eval_ids is required");
  const auto eval_ids = sel.at("eval_ids").get<std::vector<std::string>>();
  if (sel.contains("candidates") == sel.contains("sampler"))
    fail("config: selection needs exactly one of 'candidates' or 'sampler'");

  const TrainConfig tcfg = parse_train(e, /*required=*/true);
  const UNetConfig mcfg = parse_model(e);
  const LoadedData data = load_data(e);
  const VolumePool eval_set = pool_of(data, eval_ids);
  const VolumePool pool = pool_of(data, labeled_ids(data));

  std::vector<CandidateSubset> candidates;
  if (sel.contains("candidates")) {
    const json& arr = sel.at("candidates");
    if (!arr.is_array() || arr.empty())
      fail("config: selection.candidates must be a nonempty array");
    for (const json& c : arr) {
      expect_keys(c, "selection.candidates[]", {"id", "ids"});
      CandidateSubset cand;
      cand.subset_id = c.value("id", std::string{});
      if (cand.subset_id.empty())
        fail("config: every candidate needs an 'id'");
      if (!c.contains("ids")) fail("config: every candidate needs 'ids'");
      cand.ids = c.at("ids").get<std::vector<std::string>>();
      candidates.push_back(std::move(cand));
    }
  } else {
    const json& s = sel.at("sampler");
    expect_keys(s, "selection.sampler", {"count", "size"});
    BootstrapSampler sampler;
    sampler.count = s.value("count", sampler.count);
    sampler.size = s.value("size", sampler.size);
    sampler.seed = e.seed;
    std::set<std::string> eval_lookup(eval_ids.begin(), eval_ids.end());
    std::vector<std::string> pool_ids;
    for (const std::string& id : labeled_ids(data))
      if (!eval_lookup.count(id)) pool_ids.push_back(id);
    candidates = sample_candidates(pool_ids, sampler);
  }

  DirLock lock(e.out_dir);
  std::printf("selecting over %zu candidate subset(s), %zu evaluation "
              "volume(s)\n", candidates.size(), eval_ids.size());
  const SelectionReport report =
      bootstrap_select(pool, candidates, eval_set, mcfg, tcfg);
  write_selection_outputs(e, report, "selection");
  write_manifest(e, "select",
                 {{"files", json::array({"selection.csv", "selection.json"})},
                  {"winner", report.winner}});
  std::printf("winner: %s (mean DSC %.6f)\n", report.winner.c_str(),
              report.rows.front().mean_dsc);
  return 0;
}

int cmd_suggest(const Experiment& e) {
  require_out(e);
  const json& sel = selection_section(e);
  for (const char* key : {"unlabeled_ids", "probe_ids", "k"})
    if (!sel.contains(key))
      fail(std::string("config: selection.") + key + " is required");

  const TrainConfig tcfg = parse_train(e, /*required=*/true);
  const UNetConfig mcfg = parse_model(e);
  const LoadedData data = load_data(e);

  std::vector<std::string> base_ids;
  if (sel.contains("base_ids"))
    base_ids = sel.at("base_ids").get<std::vector<std::string>>();
  else if (data.has_split)
    base_ids = data.split.train;
  else
    fail("config: selection.base_ids is required without a split");
  const auto unlabeled_ids =
      sel.at("unlabeled_ids").get<std::vector<std::string>>();
  const auto probe_ids = sel.at("probe_ids").get<std::vector<std::string>>();
  const size_t fixed_epochs = sel.value("fixed_epochs", size_t{50});
  const size_t k = sel.at("k").get<size_t>();

  const VolumePool base = pool_of(data, base_ids);
  const VolumePool probe = pool_of(data, probe_ids);
  std::map<std::string, Volume> unlabeled;
  for (const std::string& id : unlabeled_ids)
    unlabeled.emplace(id, image_of(data, id));

  DirLock lock(e.out_dir);
  std::printf("scoring %zu unlabeled volume(s) against %zu base volume(s)\n",
              unlabeled.size(), base.size());
  const SelectionReport report =
      suggest_annotations(base, unlabeled, probe, mcfg, tcfg, fixed_epochs, k);
  write_selection_outputs(e, report, "suggestion");
  json suggested = report.suggested;
  write_manifest(e, "suggest",
                 {{"files", json::array({"suggestion.csv", "suggestion.json"})},
                  {"suggested", suggested}});
  std::string joined;
  for (const std::string& id : report.suggested)
    joined += (joined.empty() ? "" : ", ") + id;
  std::printf("suggested for annotation: %s\n", joined.c_str());
  return 0;
}

int cmd_gradcheck(uint64_t seed, bool inject_bug) {
  const auto entries = run_gradient_suite(seed, inject_bug);
  std::printf("%-18s %13s %10s  %s\n", "primitive", "max rel err", "tolerance",
              "status");
  for (const GradSuiteEntry& entry : entries)
    std::printf("%-18s %13.3e %10.0e  %s\n", entry.name.c_str(),
                entry.result.max_rel_err, entry.tolerance,
                entry.passed ? "pass" : "FAIL");
  const bool ok = all_passed(entries);
  std::printf(ok ? "all %zu gradient checks passed\n"
                 : "gradient checks FAILED (%zu entries)\n",
              entries.size());
  return ok ? 0 : 1;
}

int cmd_info(const Experiment& e, bool layers) {
  std::printf("%s\n", kVersion);
  const UNetConfig cfg = parse_model(e);
  std::printf("model: in_channels=%zu num_classes=%zu base_channels=%zu "
              "depth=%zu\n", cfg.in_channels, cfg.num_classes,
              cfg.base_channels, cfg.depth);
  size_t total = 0;
  for (const LayerPlanEntry& entry : unet_layer_plan(cfg)) {
    size_t n = 1;
    for (size_t d : entry.shape) n *= d;
    total += n;
    if (layers) {
      std::string shape;
      for (size_t d : entry.shape)
        shape += (shape.empty() ? "" : "x") + std::to_string(d);
      std::printf("  %-24s %-14s %10zu\n", entry.name.c_str(), shape.c_str(), n);
    }
  }
  std::printf("parameters: %zu\n", total);
  if (!e.cfg.empty()) std::printf("config hash: %s\n", e.hash.c_str());
  if (e.cfg.contains("data")) {
    const LoadedData data = load_data(e);
    std::printf("volumes: %zu (%zu labeled)\n", data.images.size(),
                data.labels.size());
    if (data.has_split)
      std::printf("split: %zu train / %zu validation / %zu test\n",
                  data.split.train.size(), data.split.validation.size(),
                  data.split.test.size());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric brain-tissue segmentation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path, out_dir, checkpoint, pred_dir;
  std::optional<uint64_t> seed;
  size_t threads = 1;
  bool timings = false, inject_bug = false, layers = false;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--threads", threads, "worker threads for spatial loops")
        ->check(CLI::PositiveNumber);
  };

  CLI::App* gen = app.add_subcommand(
      "phantom-gen", "generate nested-ellipsoid phantom volumes");
  add_common(gen);
  CLI::App* train_cmd =
      app.add_subcommand("train", "train a U-Net and write a checkpoint");
  add_common(train_cmd);
  train_cmd->add_flag("--timings", timings,
                      "record wall-clock seconds in history.csv");
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "segment volumes and report DSC/HD/AVD");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "trained model checkpoint");
  eval_cmd->add_option("--pred-dir", pred_dir,
                       "directory of precomputed .ntlbl predictions");
  CLI::App* select_cmd = app.add_subcommand(
      "select", "rank candidate training subsets by evaluation DSC");
  add_common(select_cmd);
  CLI::App* suggest_cmd = app.add_subcommand(
      "suggest", "rank unlabeled volumes for annotation");
  add_common(suggest_cmd);
  CLI::App* grad_cmd = app.add_subcommand(
      "gradcheck", "finite-difference checks of every primitive");
  grad_cmd->add_option("--seed", seed, "seed for the probe directions");
  grad_cmd->add_option("--threads", threads, "worker threads")
      ->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--inject-bug", inject_bug,
                     "flip one adjoint on purpose (must fail)");
  CLI::App* info_cmd =
      app.add_subcommand("info", "print version, model summary, config hash");
  add_common(info_cmd);
  info_cmd->add_flag("--layers", layers, "list every tensor in the plan");

  CLI11_PARSE(app, argc, argv);

  try {
    set_num_threads(threads);
    if (grad_cmd->parsed()) return cmd_gradcheck(seed.value_or(1), inject_bug);
    const bool need_config = !info_cmd->parsed();
    const Experiment e = load_experiment(config_path, out_dir, seed, need_config);
    if (gen->parsed()) return cmd_phantom_gen(e);
    if (train_cmd->parsed()) return cmd_train(e, timings);
    if (eval_cmd->parsed()) return cmd_eval(e, checkpoint, pred_dir);
    if (select_cmd->parsed()) return cmd_select(e);
    if (suggest_cmd->parsed()) return cmd_suggest(e);
    if (info_cmd->parsed()) return cmd_info(e, layers);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
