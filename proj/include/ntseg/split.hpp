#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Dataset role assignment. Roles may be requested explicitly by id, by count
// (filled from the remaining pool in seeded shuffle order), or both.

namespace ntseg {

struct SplitManifest {
  std::vector<std::string> train, validation, test;
  uint64_t seed = 0;

  void validate() const;  // roles must be disjoint
};

struct SplitRequest {
  std::vector<std::string> train, validation, test;  // explicit ids
  size_t train_count = 0, validation_count = 0, test_count = 0;
  uint64_t seed = 0;
};

SplitManifest make_split(const std::vector<std::string>& pool,
                         const SplitRequest& request);

void save_split(const SplitManifest& split, const std::string& path);
SplitManifest load_split(const std::string& path);

}  // namespace ntseg
