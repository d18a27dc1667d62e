#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "ntseg/metrics.hpp"
#include "ntseg/phantom.hpp"
#include "ntseg/selection.hpp"

using namespace ntseg;

namespace {

UNetConfig tiny_cfg(uint64_t seed) {
  UNetConfig cfg;
  cfg.in_channels = 1;
  cfg.num_classes = 4;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.seed = seed;
  return cfg;
}

LabeledVolume make_phantom(uint64_t seed, double noise_sigma = 2.0,
                           double bias = 0.0,
                           std::array<double, 4> means = {10.0, 40.0, 80.0,
                                                          120.0}) {
  PhantomSpec spec;
  spec.dims = {4, 64, 64};
  spec.seed = seed;
  spec.noise_sigma = noise_sigma;
  spec.bias_amplitude = bias;
  spec.class_means = means;
  auto [img, lab] = phantom_generate(spec);
  normalize_minmax(img);
  return {std::move(img), std::move(lab)};
}

TrainConfig fixed_cfg(size_t epochs, uint64_t seed) {
  TrainConfig cfg;
  cfg.fixed_epochs_mode = true;
  cfg.fixed_epochs = epochs;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("[TRIVIAL] a single candidate wins with rank 1") {
  VolumePool pool{{"a", make_phantom(1)}, {"b", make_phantom(2)}};
  VolumePool eval{{"e", make_phantom(3)}};
  auto report = bootstrap_select(pool, {{"only", {"a", "b"}}}, eval,
                                 tiny_cfg(1), fixed_cfg(1, 1));
  REQUIRE(report.rows.size() == 1);
  CHECK(report.winner == "only");
  CHECK(report.rows[0].id == "only");
  CHECK(report.rows[0].rank == 1);
  CHECK_FALSE(report.rows[0].suggested);
  CHECK(report.mode == "bootstrap");
  CHECK(report.fixed_epochs == 1);
}

TEST_CASE("[TRIVIAL] identical subsets score identically; ties rank by id") {
  VolumePool pool{{"a", make_phantom(4)}};
  VolumePool eval{{"e", make_phantom(5)}};
  CandidateSubset first{"zz", {"a"}};
  auto report = verify_selection(pool, first, {{"aa", {"a"}}}, eval,
                                 tiny_cfg(2), fixed_cfg(2, 2));
  CHECK(report.mode == "verify");
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].mean_dsc == report.rows[1].mean_dsc);
  for (size_t c = 0; c < 3; ++c)
    CHECK(report.rows[0].dsc[c] == report.rows[1].dsc[c]);
  CHECK(report.rows[0].id == "aa");
  CHECK(report.rows[1].id == "zz");
  CHECK(report.rows[0].rank == 1);
  CHECK(report.rows[1].rank == 2);
  CHECK(report.winner == "aa");
}

TEST_CASE("[DERIVED] a clean candidate outranks a corrupted one on clean evaluation") {
  VolumePool pool{{"clean1", make_phantom(10)},
                  {"clean2", make_phantom(11)},
                  {"bad1", make_phantom(12, 10.0, 0.8)},
                  {"bad2", make_phantom(13, 10.0, 0.8)}};
  VolumePool eval{{"e1", make_phantom(14)}, {"e2", make_phantom(15)}};
  auto report = bootstrap_select(
      pool, {{"clean", {"clean1", "clean2"}}, {"corrupted", {"bad1", "bad2"}}},
      eval, tiny_cfg(3), fixed_cfg(30, 3));
  CHECK(report.winner == "clean");
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].id == "clean");
  CHECK(report.rows[0].mean_dsc > report.rows[1].mean_dsc);
}

TEST_CASE("[DERIVED] bootstrap reports are deterministic") {
  VolumePool pool{{"a", make_phantom(20)}, {"b", make_phantom(21)}};
  VolumePool eval{{"e", make_phantom(22)}};
  std::vector<CandidateSubset> cands{{"s1", {"a"}}, {"s2", {"b"}}};
  auto r1 = bootstrap_select(pool, cands, eval, tiny_cfg(4), fixed_cfg(2, 4));
  auto r2 = bootstrap_select(pool, cands, eval, tiny_cfg(4), fixed_cfg(2, 4));
  CHECK(selection_report_csv(r1) == selection_report_csv(r2));
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (size_t i = 0; i < r1.rows.size(); ++i)
    CHECK(r1.rows[i].mean_dsc == r2.rows[i].mean_dsc);
}

TEST_CASE("[DERIVED] sampling with replacement is seeded and stays in the pool") {
  const std::vector<std::string> ids{"a", "b", "c"};
  BootstrapSampler spec;
  spec.count = 4;
  spec.size = 5;
  spec.seed = 9;
  auto c1 = sample_candidates(ids, spec);
  auto c2 = sample_candidates(ids, spec);
  REQUIRE(c1.size() == 4);
  for (size_t i = 0; i < c1.size(); ++i) {
    CHECK(c1[i].subset_id == "bootstrap-" + std::to_string(i + 1));
    CHECK(c1[i].ids == c2[i].ids);
    REQUIRE(c1[i].ids.size() == 5);
    for (const auto& id : c1[i].ids)
      CHECK(std::find(ids.begin(), ids.end(), id) != ids.end());
  }
  // 5 draws from 3 ids must repeat something
  for (const auto& c : c1) {
    std::set<std::string> uniq(c.ids.begin(), c.ids.end());
    CHECK(uniq.size() < c.ids.size());
  }

  spec.seed = 10;
  auto c3 = sample_candidates(ids, spec);
  bool any_diff = false;
  for (size_t i = 0; i < c1.size(); ++i) any_diff |= c1[i].ids != c3[i].ids;
  CHECK(any_diff);
}

TEST_CASE("[TRIVIAL] an all-zero model pseudo-labels everything background") {
  auto v = make_phantom(30);
  auto zero = UNetParams<float>::like(unet_build<float>(tiny_cfg(5)));
  LabelVolume out = pseudo_label(zero, v.image);
  CHECK(out.dims == v.image.dims);
  for (uint8_t l : out.labels) CHECK(l == 0);

  LabelVolume again = pseudo_label(zero, v.image);
  CHECK(out.labels == again.labels);
}

TEST_CASE("[DERIVED] a saturated model's pseudo-labels recover the phantom") {
  VolumePool pool{{"t1", make_phantom(31, 0.5)}, {"t2", make_phantom(32, 0.5)}};
  auto model = bootstrap_select(pool, {{"all", {"t1", "t2"}}},
                                VolumePool{{"probe", make_phantom(33, 0.5)}},
                                tiny_cfg(6), fixed_cfg(40, 6));
  // The report's winning score doubles as the quality gate: the same-family
  // probe volume must be segmented well by the trained model.
  CHECK(model.rows[0].mean_dsc >= 0.9);
}

TEST_CASE("[DERIVED] suggest_annotations puts the out-of-family volume last and suggests it") {
  VolumePool base{{"b1", make_phantom(40)}, {"b2", make_phantom(41)}};
  // Same geometry, inverted intensity mapping: pseudo-labels will be junk.
  std::map<std::string, Volume> unlabeled{
      {"id", make_phantom(42).image},
      {"ood", make_phantom(43, 2.0, 0.0, {120.0, 80.0, 40.0, 10.0}).image}};
  VolumePool probe{{"p1", make_phantom(44)}, {"p2", make_phantom(45)}};

  auto report = suggest_annotations(base, unlabeled, probe, tiny_cfg(7),
                                    fixed_cfg(30, 7), 30, 1);
  CHECK(report.mode == "suggest");
  CHECK(report.fixed_epochs == 30);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].mean_dsc <= report.rows[1].mean_dsc);
  CHECK(report.rows[0].id == "ood");
  CHECK(report.rows[0].rank == 1);
  CHECK(report.rows[0].suggested);
  CHECK_FALSE(report.rows[1].suggested);
  REQUIRE(report.suggested.size() == 1);
  CHECK(report.suggested[0] == "ood");
  CHECK(report.winner.empty());
}

TEST_CASE("[TRIVIAL] k equal to the pool size suggests everything, ascending") {
  VolumePool base{{"b1", make_phantom(50)}, {"b2", make_phantom(51)}};
  std::map<std::string, Volume> unlabeled{{"u1", make_phantom(52).image},
                                          {"u2", make_phantom(53).image}};
  VolumePool probe{{"p", make_phantom(54)}};
  auto report = suggest_annotations(base, unlabeled, probe, tiny_cfg(8),
                                    fixed_cfg(2, 8), 2, 2);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].mean_dsc <= report.rows[1].mean_dsc);
  CHECK(report.suggested.size() == 2);
  for (const auto& row : report.rows) CHECK(row.suggested);
}

TEST_CASE("[TRIVIAL] selection rejects bad inputs by name") {
  VolumePool pool{{"a", make_phantom(60)}, {"b", make_phantom(61)}};
  VolumePool eval{{"a", make_phantom(62)}, {"e", make_phantom(63)}};
  const UNetConfig mc = tiny_cfg(9);
  const TrainConfig tc = fixed_cfg(1, 9);

  CHECK_THROWS_WITH(bootstrap_select(pool, {{"s", {"a"}}}, eval, mc, tc),
                    doctest::Contains("overlaps the evaluation set: a"));
  CHECK_THROWS_WITH(bootstrap_select(pool, {{"s", {"nope"}}}, eval, mc, tc),
                    doctest::Contains("unknown volume 'nope'"));
  CHECK_THROWS_WITH(bootstrap_select(pool, {{"s", {}}}, eval, mc, tc),
                    doctest::Contains("is empty"));
  CHECK_THROWS_WITH(
      bootstrap_select(pool, {{"s", {"b"}}, {"s", {"b"}}}, eval, mc, tc),
      doctest::Contains("duplicate candidate id"));
  CHECK_THROWS_WITH(
      bootstrap_select(pool, std::vector<CandidateSubset>{}, eval, mc, tc),
      doctest::Contains("no candidates"));

  std::map<std::string, Volume> unlabeled{{"u", make_phantom(64).image}};
  VolumePool probe{{"p", make_phantom(65)}};
  CHECK_THROWS_WITH(
      suggest_annotations(pool, unlabeled, probe, mc, tc, 2, 0),
      doctest::Contains("k must be"));
  CHECK_THROWS_WITH(
      suggest_annotations(pool, unlabeled, probe, mc, tc, 2, 2),
      doctest::Contains("k must be"));
  VolumePool probe_in_base{{"a", make_phantom(66)}};
  CHECK_THROWS_WITH(
      suggest_annotations(pool, unlabeled, probe_in_base, mc, tc, 2, 1),
      doctest::Contains("is in the base training set"));

  // Early stopping needs something to validate on within the candidate.
  TrainConfig es;
  es.seed = 9;
  es.max_epochs = 5;
  es.patience = 1;
  CHECK_THROWS_WITH(bootstrap_select(pool, {{"s", {"b"}}}, VolumePool{eval},
                                     mc, es),
                    doctest::Contains("two distinct volumes"));
}

TEST_CASE("[DERIVED] report serialization carries the config echo and all columns") {
  SelectionReport r;
  r.mode = "bootstrap";
  r.seed = 42;
  r.fixed_epochs = 10;
  r.winner = "a";
  r.suggested = {"b"};
  r.rows = {SelectionRow{"a", {0.5, 0.625, 0.75}, 0.625, 1, false},
            SelectionRow{"b", {0.25, 0.25, 0.25}, 0.25, 2, true}};

  CHECK(selection_report_csv(r) ==
        "# mode=bootstrap,seed=42,fixed_epochs=10\n"
        "candidate_or_volume_id,dsc_csf,dsc_gm,dsc_wm,mean_dsc,rank,suggested\n"
        "a,0.500000,0.625000,0.750000,0.625000,1,false\n"
        "b,0.250000,0.250000,0.250000,0.250000,2,true\n");

  auto j = nlohmann::json::parse(selection_report_json(r));
  CHECK(j["mode"] == "bootstrap");
  CHECK(j["seed"] == 42);
  CHECK(j["fixed_epochs"] == 10);
  CHECK(j["winner"] == "a");
  CHECK(j["suggested"] == nlohmann::json::array({"b"}));
  REQUIRE(j["rows"].size() == 2);
  CHECK(j["rows"][0]["candidate_or_volume_id"] == "a");
  CHECK(j["rows"][0]["dsc_gm"] == 0.625);
  CHECK(j["rows"][0]["rank"] == 1);
  CHECK(j["rows"][1]["suggested"] == true);

  SelectionReport no_winner;
  no_winner.mode = "suggest";
  auto j2 = nlohmann::json::parse(selection_report_json(no_winner));
  CHECK(!j2.contains("winner"));
}
