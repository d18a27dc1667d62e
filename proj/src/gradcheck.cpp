#include "ntseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ntseg/rng.hpp"

namespace ntseg {

namespace {

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<size_t> probe_coords(size_t size, size_t max_probes, Rng& rng) {
  std::vector<size_t> coords;
  if (size <= max_probes) {
    coords.resize(size);
    for (size_t i = 0; i < size; ++i) coords[i] = i;
    return coords;
  }
  coords.reserve(max_probes);
  for (size_t i = 0; i < max_probes; ++i)
    coords.push_back(rng.next_u64() % size);
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

}  // namespace

GradCheckResult grad_check(const GradCheckProblem& problem, double step,
                           uint64_t seed, size_t max_probes) {
  check(!problem.inputs.empty(), "grad_check: no inputs");
  check(step > 0, "grad_check: step must be positive");

  Rng rng(seed);
  TensorD base = problem.forward();
  TensorD cotangent(base.shape());
  for (size_t i = 0; i < cotangent.size(); ++i)
    cotangent[i] = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);

  std::vector<TensorD> analytic = problem.backward(cotangent);
  check(analytic.size() == problem.inputs.size(),
        "grad_check: backward returned " + std::to_string(analytic.size()) +
            " gradients for " + std::to_string(problem.inputs.size()) +
            " inputs");

  GradCheckResult result;
  for (size_t t = 0; t < problem.inputs.size(); ++t) {
    TensorD& x = *problem.inputs[t];
    const TensorD& grad = analytic[t];
    check(grad.same_shape(x), "grad_check: gradient " + std::to_string(t) +
                                  " shape " + grad.shape_string() +
                                  " does not match input " + x.shape_string());
    if (!grad.all_finite()) result.finite = false;

    for (size_t i : probe_coords(x.size(), max_probes, rng)) {
      const double saved = x[i];
      x[i] = saved + step;
      const double up = dot(problem.forward(), cotangent);
      x[i] = saved - step;
      const double down = dot(problem.forward(), cotangent);
      x[i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double a = grad[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      const double rel = std::fabs(a - numeric) / denom;
      ++result.probes;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        std::ostringstream os;
        os << "input " << t << " [" << i << "]: analytic=" << a
           << ", numeric=" << numeric;
        result.worst = os.str();
      }
    }
  }
  return result;
}

}  // namespace ntseg
