#include "ntseg/split.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ntseg/rng.hpp"
#include "ntseg/tensor.hpp"

namespace ntseg {

namespace {

using nlohmann::json;

void add_role(std::set<std::string>& seen, const std::vector<std::string>& ids,
              const char* role) {
  for (const auto& id : ids)
    check(seen.insert(id).second, "split: id '" + id +
                                      "' appears in more than one role (" +
                                      role + ")");
}

}  // namespace

void SplitManifest::validate() const {
  std::set<std::string> seen;
  add_role(seen, train, "train");
  add_role(seen, validation, "validation");
  add_role(seen, test, "test");
}

SplitManifest make_split(const std::vector<std::string>& pool,
                         const SplitRequest& request) {
  const std::set<std::string> known(pool.begin(), pool.end());
  check(known.size() == pool.size(), "make_split: pool contains duplicates");

  SplitManifest out;
  out.seed = request.seed;
  out.train = request.train;
  out.validation = request.validation;
  out.test = request.test;
  out.validate();

  std::set<std::string> taken;
  for (const auto* role : {&out.train, &out.validation, &out.test})
    for (const auto& id : *role) {
      check(known.count(id), "make_split: id '" + id + "' is not in the pool");
      taken.insert(id);
    }

  std::vector<std::string> rest;
  for (const auto& id : pool)
    if (!taken.count(id)) rest.push_back(id);
  Rng rng(request.seed);
  rng.shuffle(rest);

  size_t next = 0;
  auto draw = [&](std::vector<std::string>& role, size_t count) {
    check(next + count <= rest.size(),
          "make_split: pool too small for the requested counts");
    for (size_t i = 0; i < count; ++i) role.push_back(rest[next++]);
  };
  draw(out.train, request.train_count);
  draw(out.validation, request.validation_count);
  draw(out.test, request.test_count);
  return out;
}

void save_split(const SplitManifest& split, const std::string& path) {
  split.validate();
  json j;
  j["train"] = split.train;
  j["validation"] = split.validation;
  j["test"] = split.test;
  j["seed"] = split.seed;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

SplitManifest load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": not valid JSON: " + e.what());
  }
  SplitManifest out;
  if (j.contains("train")) out.train = j["train"].get<std::vector<std::string>>();
  if (j.contains("validation"))
    out.validation = j["validation"].get<std::vector<std::string>>();
  if (j.contains("test")) out.test = j["test"].get<std::vector<std::string>>();
  if (j.contains("seed")) out.seed = j["seed"].get<uint64_t>();
  out.validate();
  return out;
}

}  // namespace ntseg
