#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "ntseg/checkpoint.hpp"
#include "ntseg/loss.hpp"
#include "ntseg/metrics.hpp"
#include "ntseg/phantom.hpp"
#include "ntseg/rng.hpp"
#include "ntseg/train.hpp"

using namespace ntseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("ntseg-train-test-" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

UNetParams<double> scalar_params(double p0) {
  UNetParams<double> params;
  TensorD t({1});
  t[0] = p0;
  params.add("p", std::move(t));
  return params;
}

UNetParams<double> scalar_grads(const UNetParams<double>& like, double g) {
  UNetParams<double> grads = UNetParams<double>::like(like);
  grads.at("p")[0] = g;
  return grads;
}

UNetConfig tiny_cfg(uint64_t seed) {
  UNetConfig cfg;
  cfg.in_channels = 1;
  cfg.num_classes = 4;
  cfg.base_channels = 2;
  cfg.depth = 2;
  cfg.seed = seed;
  return cfg;
}

PatchSet phantom_patches(uint64_t seed, size_t z_slices) {
  PhantomSpec spec;
  spec.dims = {z_slices, 64, 64};
  spec.seed = seed;
  auto [img, lab] = phantom_generate(spec);
  return tile_patches("ph" + std::to_string(seed), img, lab);
}

bool same_params(const UNetParams<float>& a, const UNetParams<float>& b) {
  if (a.entries().size() != b.entries().size()) return false;
  for (size_t i = 0; i < a.entries().size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name || !ea.value.same_shape(eb.value)) return false;
    for (size_t j = 0; j < ea.value.size(); ++j)
      if (ea.value[j] != eb.value[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("[DERIVED] adam's first step has magnitude learning_rate") {
  AdamConfig cfg;
  auto descend = scalar_params(1.0);
  auto st = AdamState<double>::like(descend);
  adam_step(descend, scalar_grads(descend, 0.5), st, cfg);
  // First step: bias corrections cancel, so p -= lr * g / (|g| + eps).
  CHECK(descend.at("p")[0] ==
        doctest::Approx(1.0 - cfg.learning_rate).epsilon(1e-7));
  CHECK(st.t == 1);

  auto ascend = scalar_params(1.0);
  auto st2 = AdamState<double>::like(ascend);
  adam_step(ascend, scalar_grads(ascend, -2.0), st2, cfg);
  CHECK(ascend.at("p")[0] ==
        doctest::Approx(1.0 + cfg.learning_rate).epsilon(1e-7));
}

TEST_CASE("[DERIVED] adam leaves parameters alone on a zero gradient") {
  AdamConfig cfg;
  auto params = scalar_params(3.25);
  auto st = AdamState<double>::like(params);
  for (int i = 0; i < 5; ++i)
    adam_step(params, scalar_grads(params, 0.0), st, cfg);
  CHECK(params.at("p")[0] == 3.25);
  CHECK(st.t == 5);
}

TEST_CASE("[DERIVED] adam matches a scalar reference on p^2 for 50 steps") {
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  auto params = scalar_params(1.5);
  auto st = AdamState<double>::like(params);
  double p_ref = 1.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 50; ++t) {
    adam_step(params, scalar_grads(params, 2.0 * params.at("p")[0]), st, cfg);
    const double g = 2.0 * p_ref;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
    p_ref -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    CHECK(std::abs(params.at("p")[0] - p_ref) < 1e-12);
  }
  CHECK(std::abs(params.at("p")[0]) < 1.5);  // it actually descended
}

TEST_CASE("[TRIVIAL] adam rejects misaligned gradients") {
  AdamConfig cfg;
  auto params = scalar_params(1.0);
  auto st = AdamState<double>::like(params);

  UNetParams<double> wrong_name;
  wrong_name.add("q", TensorD({1}));
  CHECK_THROWS_WITH(adam_step(params, wrong_name, st, cfg),
                    doctest::Contains("does not match"));

  UNetParams<double> wrong_shape;
  wrong_shape.add("p", TensorD({2}));
  CHECK_THROWS_WITH(adam_step(params, wrong_shape, st, cfg),
                    doctest::Contains("does not match"));

  UNetParams<double> empty;
  CHECK_THROWS_WITH(adam_step(params, empty, st, cfg),
                    doctest::Contains("differ in length"));
}

TEST_CASE("[PAPER] a flat validation metric stops after exactly patience+1 epochs") {
  PatchSet tr = phantom_patches(11, 2);
  TrainConfig cfg;
  cfg.max_epochs = 100;
  cfg.patience = 4;
  cfg.batch_size = 8;
  cfg.seed = 5;
  cfg.validation_metric_hook = [](size_t, const UNetParams<float>&) {
    return 0.5;
  };
  auto res = train(unet_build<float>(tiny_cfg(3)), tr, {}, cfg);
  CHECK(res.history.epochs.size() == 5);
  CHECK(res.history.best_epoch == 1);
}

TEST_CASE("[PAPER] a plateau at epoch e stops at epoch e+patience") {
  PatchSet tr = phantom_patches(12, 2);
  TrainConfig cfg;
  cfg.max_epochs = 100;
  cfg.patience = 3;
  cfg.batch_size = 8;
  cfg.seed = 6;
  cfg.validation_metric_hook = [](size_t epoch, const UNetParams<float>&) {
    return 0.1 * static_cast<double>(std::min<size_t>(epoch, 5));
  };
  auto res = train(unet_build<float>(tiny_cfg(4)), tr, {}, cfg);
  CHECK(res.history.epochs.size() == 8);
  CHECK(res.history.best_epoch == 5);
}

TEST_CASE("[DERIVED] the snapshot tracks any strict improvement, the patience counter only material ones") {
  PatchSet tr = phantom_patches(13, 2);
  std::map<size_t, UNetParams<float>> snaps;
  TrainConfig cfg;
  cfg.max_epochs = 100;
  cfg.patience = 3;
  cfg.batch_size = 8;
  cfg.seed = 7;
  // Epoch 2 improves by 5e-6: under min_improvement, so it must not reset
  // the patience counter, but it is still the best model over the run.
  cfg.validation_metric_hook = [&](size_t epoch, const UNetParams<float>& m) {
    snaps.emplace(epoch, m);
    if (epoch == 1) return 0.5;
    if (epoch == 2) return 0.5 + 5e-6;
    return 0.4;
  };
  auto res = train(unet_build<float>(tiny_cfg(5)), tr, {}, cfg);
  REQUIRE(res.history.epochs.size() == 4);
  CHECK(res.history.best_epoch == 2);
  CHECK(same_params(res.model, snaps.at(2)));
  CHECK_FALSE(same_params(res.model, snaps.at(4)));
}

TEST_CASE("[PAPER] fixed-epoch mode runs to the end and keeps the final model") {
  PatchSet tr = phantom_patches(14, 2);
  std::map<size_t, UNetParams<float>> snaps;
  TrainConfig cfg;
  cfg.fixed_epochs_mode = true;
  cfg.fixed_epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 8;
  cfg.validation_metric_hook = [&](size_t epoch, const UNetParams<float>& m) {
    snaps.emplace(epoch, m);
    return 1.0 - 0.1 * static_cast<double>(epoch);  // worsens; ignored
  };
  auto res = train(unet_build<float>(tiny_cfg(6)), tr, {}, cfg);
  CHECK(res.history.epochs.size() == 3);
  CHECK(res.history.best_epoch == 0);
  CHECK(same_params(res.model, snaps.at(3)));
}

TEST_CASE("[PAPER] dice loss falls over training on a phantom") {
  PatchSet tr = phantom_patches(21, 4);
  TrainConfig cfg;
  cfg.fixed_epochs_mode = true;
  cfg.fixed_epochs = 25;
  cfg.batch_size = 2;
  cfg.learning_rate = 2e-3;
  cfg.seed = 9;
  auto res = train(unet_build<float>(tiny_cfg(9)), tr, {}, cfg);
  const auto& ep = res.history.epochs;
  REQUIRE(ep.size() == 25);
  for (const auto& e : ep) {
    CHECK(e.loss >= 0.0);
    CHECK(e.loss <= 4.0);
    CHECK(std::isnan(e.val_mean_dsc));  // no validation source given
  }
  CHECK(ep.back().loss < ep.front().loss);
}

TEST_CASE("[DERIVED] training is reproducible for a fixed seed") {
  PatchSet tr = phantom_patches(22, 5);
  TrainConfig cfg;
  cfg.fixed_epochs_mode = true;
  cfg.fixed_epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 10;
  auto init = unet_build<float>(tiny_cfg(7));
  auto a = train(init, tr, {}, cfg);
  auto b = train(init, tr, {}, cfg);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (size_t i = 0; i < a.history.epochs.size(); ++i)
    CHECK(a.history.epochs[i].loss == b.history.epochs[i].loss);
  CHECK(same_params(a.model, b.model));

  cfg.seed = 11;  // different shuffle stream
  auto c = train(init, tr, {}, cfg);
  bool any_diff = false;
  for (size_t i = 0; i < a.history.epochs.size(); ++i)
    any_diff |= a.history.epochs[i].loss != c.history.epochs[i].loss;
  CHECK(any_diff);
}

TEST_CASE("[DERIVED] a non-finite loss aborts with a diagnostic") {
  PatchSet tr = phantom_patches(23, 2);
  TrainConfig cfg;
  cfg.fixed_epochs_mode = true;
  cfg.fixed_epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 12;
  auto init = unet_build<float>(tiny_cfg(8));
  init.at("final.bias")[0] = std::nanf("");
  CHECK_THROWS_WITH(train(init, tr, {}, cfg),
                    doctest::Contains("non-finite loss"));
}

TEST_CASE("[DERIVED] evaluate_patches pools over patches independently of batching") {
  PatchSet set = phantom_patches(41, 4);
  auto model = unet_build<float>(tiny_cfg(2));
  const double uneven = evaluate_patches(model, set, 3);
  const double single = evaluate_patches(model, set, 100);
  CHECK(uneven == single);

  // Oracle: forward everything at once, argmax, pooled mean tissue DSC.
  std::vector<const Patch*> all;
  for (const Patch& p : set.patches) all.push_back(&p);
  std::vector<uint8_t> pred = reconstruct_labels(unet_forward(model, patch_images(all)));
  std::vector<uint8_t> truth;
  for (const Patch& p : set.patches)
    truth.insert(truth.end(), p.labels.begin(), p.labels.end());
  CHECK(single == mean_tissue_dsc(pred, truth));
}

TEST_CASE("[DERIVED] history CSV has the documented layout") {
  TrainHistory h;
  EpochStats e1;
  e1.epoch = 1;
  e1.loss = 1.25;
  e1.val_mean_dsc = std::nan("");
  e1.soft_dsc = {0.9, 0.1, 0.2, 0.3};
  e1.seconds = 1.5;
  EpochStats e2;
  e2.epoch = 2;
  e2.loss = 1.0;
  e2.val_mean_dsc = 0.5;
  e2.soft_dsc = {1.0, 0.25, 0.5, 0.75};
  e2.seconds = 2.25;
  h.epochs = {e1, e2};

  TempDir tmp;
  const std::string path = tmp.file("history.csv");
  write_history_csv(h, path);
  CHECK(slurp(path) ==
        "epoch,loss,val_mean_dsc,dsc_bg,dsc_csf,dsc_gm,dsc_wm,seconds\n"
        "1,1.250000,NA,0.900000,0.100000,0.200000,0.300000,1.500\n"
        "2,1.000000,0.500000,1.000000,0.250000,0.500000,0.750000,2.250\n");

  write_history_csv(h, path, /*include_seconds=*/false);
  CHECK(slurp(path) ==
        "epoch,loss,val_mean_dsc,dsc_bg,dsc_csf,dsc_gm,dsc_wm,seconds\n"
        "1,1.250000,NA,0.900000,0.100000,0.200000,0.300000,0.000\n"
        "2,1.000000,0.500000,1.000000,0.250000,0.500000,0.750000,0.000\n");
}

TEST_CASE("[DERIVED] split_train_validation carves a seeded validation set") {
  const std::vector<std::string> ids{"a", "b", "c", "d", "e"};
  auto [tr, val] = split_train_validation(ids, 0.2, 3);
  CHECK(val.size() == 1);
  CHECK(tr.size() == 4);
  std::vector<std::string> joined = tr;
  joined.insert(joined.end(), val.begin(), val.end());
  std::sort(joined.begin(), joined.end());
  CHECK(joined == ids);

  auto [tr2, val2] = split_train_validation(ids, 0.2, 3);
  CHECK(tr2 == tr);
  CHECK(val2 == val);

  auto [tr3, val3] = split_train_validation(ids, 0.5, 3);
  CHECK(val3.size() == 3);  // ceil(2.5)
  auto [tr4, val4] = split_train_validation(ids, 0.99, 3);
  CHECK(val4.size() == 4);  // clamped to leave one training volume
  CHECK(tr4.size() == 1);

  CHECK_THROWS(split_train_validation({"only"}, 0.2, 3));
  CHECK_THROWS(split_train_validation(ids, 0.0, 3));
}

TEST_CASE("[DERIVED] checkpoints round-trip bit-exactly, including adam state") {
  TempDir tmp;
  const UNetConfig cfg = tiny_cfg(13);
  auto model = unet_build<float>(cfg);

  auto st = AdamState<float>::like(model);
  AdamConfig acfg;
  auto grads = UNetParams<float>::like(model);
  Rng rng(99);
  for (auto& e : grads.entries())
    for (size_t i = 0; i < e.value.size(); ++i)
      e.value[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  adam_step(model, grads, st, acfg);
  adam_step(model, grads, st, acfg);

  const std::string path = tmp.file("model.ckpt");
  save_checkpoint(model, &st, path, {{"phase", "unit"}, {"note", "x"}});

  Checkpoint ck = load_checkpoint(path);
  CHECK(same_params(ck.model, model));
  CHECK(ck.model.config() == cfg);
  CHECK(ck.extra.at("phase") == "unit");
  CHECK(ck.extra.at("note") == "x");
  REQUIRE(ck.adam.has_value());
  CHECK(ck.adam->t == 2);
  REQUIRE(ck.adam->m.size() == st.m.size());
  for (size_t i = 0; i < st.m.size(); ++i) {
    CHECK(ck.adam->m[i].name == st.m[i].name);
    for (size_t j = 0; j < st.m[i].value.size(); ++j) {
      CHECK(ck.adam->m[i].value[j] == st.m[i].value[j]);
      CHECK(ck.adam->v[i].value[j] == st.v[i].value[j]);
    }
  }

  CHECK(same_params(load_checkpoint_for(cfg, path), model));

  // Re-saving the loaded checkpoint reproduces the file byte for byte.
  const std::string path2 = tmp.file("model2.ckpt");
  save_checkpoint(ck.model, &*ck.adam, path2, ck.extra);
  CHECK(slurp(path) == slurp(path2));

  // Without adam state the file omits it.
  const std::string bare = tmp.file("bare.ckpt");
  save_checkpoint(model, nullptr, bare);
  Checkpoint ck2 = load_checkpoint(bare);
  CHECK(!ck2.adam.has_value());
  CHECK(ck2.extra.empty());
  CHECK(same_params(ck2.model, model));
}

TEST_CASE("[DERIVED] checkpoint loading rejects the wrong architecture or a damaged file") {
  TempDir tmp;
  const std::string deep = tmp.file("deep.ckpt");
  save_checkpoint(unet_build<float>(tiny_cfg(1)), nullptr, deep);

  UNetConfig shallow_cfg = tiny_cfg(1);
  shallow_cfg.depth = 1;
  CHECK_THROWS_WITH(load_checkpoint_for(shallow_cfg, deep),
                    doctest::Contains("extra"));

  const std::string shallow = tmp.file("shallow.ckpt");
  save_checkpoint(unet_build<float>(shallow_cfg), nullptr, shallow);
  CHECK_THROWS_WITH(load_checkpoint_for(tiny_cfg(1), shallow),
                    doctest::Contains("missing"));

  UNetConfig wide_cfg = tiny_cfg(1);
  wide_cfg.base_channels = 4;
  CHECK_THROWS_WITH(load_checkpoint_for(wide_cfg, deep),
                    doctest::Contains("has shape"));

  const std::string cut = tmp.file("cut.ckpt");
  fs::copy_file(deep, cut);
  fs::resize_file(cut, fs::file_size(cut) - 8);
  CHECK_THROWS_WITH(load_checkpoint(cut), doctest::Contains("truncated"));

  const std::string junk = tmp.file("junk.ckpt");
  std::ofstream(junk, std::ios::binary) << "XXXXXXXXnot a checkpoint\n";
  CHECK_THROWS_WITH(load_checkpoint(junk), doctest::Contains("bad magic"));

  const std::string stub = tmp.file("stub.ckpt");
  std::ofstream(stub, std::ios::binary) << "XX";
  CHECK_THROWS_WITH(load_checkpoint(stub), doctest::Contains("no magic"));
}
