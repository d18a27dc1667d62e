#pragma once

#include <string>
#include <vector>

#include "ntseg/gradcheck.hpp"

// Named gradient checks covering every differentiable primitive plus a small
// end-to-end network, shared by the CLI and the test suite. `inject_bug`
// flips the sign of one adjoint on purpose; a healthy harness must then
// report a failure.

namespace ntseg {

struct GradSuiteEntry {
  std::string name;
  double tolerance = 0.0;
  GradCheckResult result;
  bool passed = false;
};

std::vector<GradSuiteEntry> run_gradient_suite(uint64_t seed,
                                               bool inject_bug = false);

bool all_passed(const std::vector<GradSuiteEntry>& entries);

}  // namespace ntseg
