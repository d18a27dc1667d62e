// End-to-end checks of the ntseg binary: every subcommand, the determinism
// guarantees, and the config-validation error paths.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ntseg/checkpoint.hpp"
#include "ntseg/split.hpp"
#include "ntseg/volume.hpp"

using namespace ntseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("ntseg-cli-test-" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(NTSEG_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult res;
  char buf[4096];
  while (size_t n = std::fread(buf, 1, sizeof buf, pipe)) res.output.append(buf, n);
  const int status = ::pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.good());
  out << content;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) {
  return slurp(a) == slurp(b);
}

const char* kGenConfig = R"({
  "seed": 11,
  "data": {
    "phantoms": [{"prefix": "ph", "count": 3, "dims": [4, 64, 64], "noise_sigma": 1.0}],
    "split": {"train_count": 2, "test_count": 1}
  }
})";

const char* kTrainConfig = R"({
  "seed": 5,
  "data": {
    "phantoms": [{"prefix": "ph", "count": 3, "dims": [4, 64, 64], "noise_sigma": 1.0}],
    "normalize": true
  },
  "model": {"base_channels": 2, "depth": 2},
  "train": {"fixed_epochs_mode": true, "fixed_epochs": 4, "batch_size": 4, "learning_rate": 0.01}
})";

}  // namespace

TEST_CASE("[TRIVIAL] cli: no subcommand or bad flag fails") {
  CHECK(run_cli("").exit_code != 0);
  CHECK(run_cli("train --no-such-flag").exit_code != 0);
  CHECK(run_cli("no-such-command").exit_code != 0);
}

TEST_CASE("[DERIVED] cli: info reports the default parameter count") {
  const CmdResult res = run_cli("info");
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("31030788") != std::string::npos);
  const CmdResult layers = run_cli("info --layers");
  CHECK(layers.exit_code == 0);
  CHECK(layers.output.find("final.weight") != std::string::npos);
}

TEST_CASE("[DERIVED] cli: gradcheck passes clean and fails with a planted bug") {
  const CmdResult clean = run_cli("gradcheck");
  CHECK(clean.exit_code == 0);
  for (const char* name : {"conv2d", "conv1x1", "relu", "maxpool2", "upconv2",
                           "concat_channels", "softmax_channels", "dice_loss",
                           "softmax_dice", "unet_tiny"})
    CHECK(clean.output.find(name) != std::string::npos);
  CHECK(clean.output.find("max rel err") != std::string::npos);

  const CmdResult bug = run_cli("gradcheck --inject-bug");
  CHECK(bug.exit_code != 0);
  CHECK(bug.output.find("FAIL") != std::string::npos);
}

TEST_CASE("[PAPER] cli: phantom-gen is byte-identical across reruns and loads back") {
  TempDir tmp;
  const std::string cfg = tmp.sub("gen.json");
  write_file(cfg, kGenConfig);
  const std::string out1 = tmp.sub("gen1"), out2 = tmp.sub("gen2");
  CHECK(run_cli("phantom-gen --config " + cfg + " --out " + out1).exit_code == 0);
  CHECK(run_cli("phantom-gen --config " + cfg + " --out " + out2).exit_code == 0);

  for (const char* name :
       {"ph-001.ntvol", "ph-001.ntlbl", "ph-002.ntvol", "ph-002.ntlbl",
        "ph-003.ntvol", "ph-003.ntlbl", "split.json", "manifest.json"})
    CHECK(same_bytes(out1 + "/" + name, out2 + "/" + name));

  const Volume img = load_volume(out1 + "/ph-001.ntvol");
  const LabelVolume lab = load_label_volume(out1 + "/ph-001.ntlbl");
  CHECK(img.dims == VolumeDims{4, 64, 64});
  CHECK(lab.dims == img.dims);
  const SplitManifest split = load_split(out1 + "/split.json");
  CHECK(split.train.size() == 2);
  CHECK(split.test.size() == 1);

  // a different seed must change the payload
  const std::string out3 = tmp.sub("gen3");
  CHECK(run_cli("phantom-gen --config " + cfg + " --seed 12 --out " + out3)
            .exit_code == 0);
  CHECK_FALSE(same_bytes(out1 + "/ph-001.ntvol", out3 + "/ph-001.ntvol"));
}

TEST_CASE("[DERIVED] cli: phantom-gen rejects a broken nesting") {
  TempDir tmp;
  const std::string cfg = tmp.sub("bad.json");
  write_file(cfg, R"({
    "seed": 1,
    "data": {"phantoms": [{"prefix": "p", "count": 1, "dims": [4, 64, 64],
                           "wm_axes": [3.8, 30, 30]}]}
  })");
  const CmdResult res = run_cli("phantom-gen --config " + cfg + " --out " +
                                tmp.sub("out"));
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("error:") != std::string::npos);
}

TEST_CASE("[PAPER] cli: train writes a loadable checkpoint and a deterministic history") {
  TempDir tmp;
  const std::string cfg = tmp.sub("train.json");
  write_file(cfg, kTrainConfig);
  const std::string out1 = tmp.sub("t1"), out2 = tmp.sub("t2");
  const CmdResult res = run_cli("train --config " + cfg + " --out " + out1);
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("trained 4 epoch(s)") != std::string::npos);

  const Checkpoint ckpt = load_checkpoint(out1 + "/model.ckpt");
  CHECK(ckpt.model.config().base_channels == 2);
  CHECK(ckpt.model.config().depth == 2);
  CHECK_FALSE(ckpt.adam.has_value());
  CHECK(ckpt.extra.count("config_hash") == 1);
  CHECK(ckpt.extra.at("config_hash").size() == 16);

  const std::string history = slurp(out1 + "/history.csv");
  CHECK(history.rfind("# config=", 0) == 0);
  CHECK(history.find("epoch,loss,val_mean_dsc") != std::string::npos);
  // comment + header + 4 data rows
  CHECK(std::count(history.begin(), history.end(), '\n') == 6);

  CHECK(run_cli("train --config " + cfg + " --out " + out2).exit_code == 0);
  CHECK(same_bytes(out1 + "/history.csv", out2 + "/history.csv"));
  CHECK(same_bytes(out1 + "/model.ckpt", out2 + "/model.ckpt"));
}

TEST_CASE("[DERIVED] cli: config validation failures exit nonzero with a message") {
  TempDir tmp;
  const std::string no_train = tmp.sub("no_train.json");
  write_file(no_train, R"({
    "seed": 1,
    "data": {"phantoms": [{"prefix": "p", "count": 2, "dims": [4, 64, 64]}]}
  })");
  CmdResult res = run_cli("train --config " + no_train + " --out " + tmp.sub("o1"));
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("missing 'train' section") != std::string::npos);

  const std::string typo = tmp.sub("typo.json");
  write_file(typo, R"({"seed": 1, "trian": {}})");
  res = run_cli("train --config " + typo + " --out " + tmp.sub("o2"));
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("unknown key 'trian'") != std::string::npos);

  const std::string garbage = tmp.sub("garbage.json");
  write_file(garbage, "{not json");
  res = run_cli("train --config " + garbage + " --out " + tmp.sub("o3"));
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("not valid JSON") != std::string::npos);

  res = run_cli("train --out " + tmp.sub("o4"));
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("--config") != std::string::npos);
}

TEST_CASE("[DERIVED] cli: a lockfile blocks a second writer") {
  TempDir tmp;
  const std::string cfg = tmp.sub("gen.json");
  write_file(cfg, kGenConfig);
  const std::string out = tmp.sub("locked");
  fs::create_directories(out);
  write_file(out + "/.lock", "");
  const CmdResult res = run_cli("phantom-gen --config " + cfg + " --out " + out);
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("locked") != std::string::npos);
}

TEST_CASE("[PAPER] cli: eval scores ground truth against itself as perfect") {
  TempDir tmp;
  const std::string gen_cfg = tmp.sub("gen.json");
  write_file(gen_cfg, kGenConfig);
  const std::string gen = tmp.sub("gen");
  REQUIRE(run_cli("phantom-gen --config " + gen_cfg + " --out " + gen).exit_code == 0);

  const std::string eval_cfg = tmp.sub("eval.json");
  write_file(eval_cfg, R"({
    "seed": 11,
    "data": {"volumes": {
      "ph-001": {"image": ")" + gen + R"(/ph-001.ntvol", "labels": ")" + gen +
                          R"(/ph-001.ntlbl"},
      "ph-002": {"image": ")" + gen + R"(/ph-002.ntvol", "labels": ")" + gen +
                          R"(/ph-002.ntlbl"}
    }}
  })");
  const std::string out = tmp.sub("ev");
  const CmdResult res =
      run_cli("eval --config " + eval_cfg + " --out " + out + " --pred-dir " + gen);
  CHECK(res.exit_code == 0);

  const std::string csv = slurp(out + "/metrics.csv");
  CHECK(csv.find("volume_id,dsc_csf,dsc_gm,dsc_wm,hd_csf") != std::string::npos);
  CHECK(csv.find("ph-001,1.000000,1.000000,1.000000,0.000000") != std::string::npos);
  CHECK(csv.find("ph-002,1.000000,1.000000,1.000000,0.000000") != std::string::npos);
  CHECK(csv.find("mean,1.000000,1.000000,1.000000,0.000000") != std::string::npos);
  // one comment, one header, two volumes, one mean row
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  // a second identical run must produce identical bytes
  const std::string out2 = tmp.sub("ev2");
  REQUIRE(run_cli("eval --config " + eval_cfg + " --out " + out2 + " --pred-dir " +
                  gen).exit_code == 0);
  CHECK(same_bytes(out + "/metrics.csv", out2 + "/metrics.csv"));
  CHECK(same_bytes(out + "/metrics.json", out2 + "/metrics.json"));

  // eval needs exactly one prediction source
  CHECK(run_cli("eval --config " + eval_cfg + " --out " + tmp.sub("ev3"))
            .exit_code != 0);
}

TEST_CASE("[DERIVED] cli: eval runs a checkpoint over the test split") {
  TempDir tmp;
  const std::string cfg = tmp.sub("cfg.json");
  write_file(cfg, R"({
    "seed": 5,
    "data": {
      "phantoms": [{"prefix": "ph", "count": 3, "dims": [4, 64, 64], "noise_sigma": 1.0}],
      "normalize": true,
      "split": {"train": ["ph-001", "ph-002"], "test": ["ph-003"]}
    },
    "model": {"base_channels": 2, "depth": 2},
    "train": {"fixed_epochs_mode": true, "fixed_epochs": 2, "batch_size": 4,
              "learning_rate": 0.01}
  })");
  const std::string tr = tmp.sub("tr");
  REQUIRE(run_cli("train --config " + cfg + " --out " + tr).exit_code == 0);
  const std::string ev = tmp.sub("ev");
  const CmdResult res = run_cli("eval --config " + cfg + " --out " + ev +
                                " --checkpoint " + tr + "/model.ckpt");
  CHECK(res.exit_code == 0);
  const std::string csv = slurp(ev + "/metrics.csv");
  CHECK(csv.find("\nph-003,") != std::string::npos);
  CHECK(csv.find("\nmean,") != std::string::npos);
  CHECK(csv.find("\nph-001,") == std::string::npos);  // only the test split
}

TEST_CASE("[PAPER] cli: select ranks candidates and is deterministic") {
  TempDir tmp;
  const std::string cfg = tmp.sub("sel.json");
  write_file(cfg, R"({
    "seed": 9,
    "data": {
      "phantoms": [{"prefix": "ph", "count": 4, "dims": [4, 64, 64], "noise_sigma": 1.0}],
      "normalize": true
    },
    "model": {"base_channels": 2, "depth": 2},
    "train": {"fixed_epochs_mode": true, "fixed_epochs": 2, "batch_size": 4,
              "learning_rate": 0.01},
    "selection": {
      "eval_ids": ["ph-004"],
      "candidates": [
        {"id": "a", "ids": ["ph-001", "ph-002"]},
        {"id": "b", "ids": ["ph-002", "ph-003"]}
      ]
    }
  })");
  const std::string out1 = tmp.sub("s1"), out2 = tmp.sub("s2");
  const CmdResult res = run_cli("select --config " + cfg + " --out " + out1);
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("winner:") != std::string::npos);

  const std::string csv = slurp(out1 + "/selection.csv");
  CHECK(csv.rfind("# config=", 0) == 0);
  CHECK(csv.find("# mode=bootstrap") != std::string::npos);
  CHECK(csv.find("candidate_or_volume_id,") != std::string::npos);
  CHECK(csv.find("\na,") != std::string::npos);
  CHECK(csv.find("\nb,") != std::string::npos);

  REQUIRE(run_cli("select --config " + cfg + " --out " + out2).exit_code == 0);
  CHECK(same_bytes(out1 + "/selection.csv", out2 + "/selection.csv"));
  CHECK(same_bytes(out1 + "/selection.json", out2 + "/selection.json"));
}

TEST_CASE("[DERIVED] cli: select with a sampler draws candidates from the pool") {
  TempDir tmp;
  const std::string cfg = tmp.sub("sel.json");
  write_file(cfg, R"({
    "seed": 3,
    "data": {
      "phantoms": [{"prefix": "ph", "count": 5, "dims": [4, 64, 64], "noise_sigma": 1.0}],
      "normalize": true
    },
    "model": {"base_channels": 2, "depth": 2},
    "train": {"fixed_epochs_mode": true, "fixed_epochs": 2, "batch_size": 4,
              "learning_rate": 0.01},
    "selection": {
      "eval_ids": ["ph-005"],
      "sampler": {"count": 3, "size": 2}
    }
  })");
  const std::string out = tmp.sub("s");
  const CmdResult res = run_cli("select --config " + cfg + " --out " + out);
  CHECK(res.exit_code == 0);
  const std::string csv = slurp(out + "/selection.csv");
  for (const char* id : {"bootstrap-1", "bootstrap-2", "bootstrap-3"})
    CHECK(csv.find(id) != std::string::npos);
  // the eval volume must never be drawn into a candidate
  CHECK(res.output.find("overlaps") == std::string::npos);
}

TEST_CASE("[PAPER] cli: suggest flags the lowest-scoring unlabeled volumes") {
  TempDir tmp;
  const std::string cfg = tmp.sub("sug.json");
  write_file(cfg, R"({
    "seed": 7,
    "data": {
      "phantoms": [{"prefix": "ph", "count": 4, "dims": [4, 64, 64], "noise_sigma": 1.0}],
      "normalize": true
    },
    "model": {"base_channels": 2, "depth": 2},
    "train": {"fixed_epochs_mode": true, "fixed_epochs": 2, "batch_size": 4,
              "learning_rate": 0.01},
    "selection": {
      "base_ids": ["ph-001"],
      "unlabeled_ids": ["ph-002", "ph-003"],
      "probe_ids": ["ph-004"],
      "fixed_epochs": 2,
      "k": 1
    }
  })");
  const std::string out1 = tmp.sub("g1"), out2 = tmp.sub("g2");
  const CmdResult res = run_cli("suggest --config " + cfg + " --out " + out1);
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("suggested for annotation:") != std::string::npos);

  const std::string csv = slurp(out1 + "/suggestion.csv");
  CHECK(csv.find("# mode=suggest") != std::string::npos);
  CHECK(csv.find(",1,true\n") != std::string::npos);
  CHECK(csv.find(",2,false\n") != std::string::npos);

  REQUIRE(run_cli("suggest --config " + cfg + " --out " + out2).exit_code == 0);
  CHECK(same_bytes(out1 + "/suggestion.csv", out2 + "/suggestion.csv"));

  // k must stay within the unlabeled pool
  const std::string bad = tmp.sub("bad.json");
  std::string text = slurp(cfg);
  const size_t pos = text.find("\"k\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 6, "\"k\": 9");
  write_file(bad, text);
  CHECK(run_cli("suggest --config " + bad + " --out " + tmp.sub("g3")).exit_code != 0);
}
