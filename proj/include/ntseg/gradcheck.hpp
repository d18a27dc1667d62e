#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ntseg/tensor.hpp"

// Central-difference gradient checking, double precision only. A problem
// exposes the tensors to probe, a forward closure reading them, and a
// backward closure mapping an output cotangent to analytic input gradients
// (computed from values saved at the base point, not by re-running forward).

namespace ntseg {

struct GradCheckProblem {
  std::vector<TensorD*> inputs;
  std::function<TensorD()> forward;
  std::function<std::vector<TensorD>(const TensorD&)> backward;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool finite = true;
  size_t probes = 0;
  std::string worst;  // "input 1 [37]: analytic=..., numeric=..."

  bool pass(double tol) const { return finite && max_rel_err <= tol; }
};

// Probes every coordinate when a tensor has at most max_probes entries,
// otherwise a seeded random subset of that size.
GradCheckResult grad_check(const GradCheckProblem& problem,
                           double step = 1e-5, uint64_t seed = 1,
                           size_t max_probes = 400);

}  // namespace ntseg
