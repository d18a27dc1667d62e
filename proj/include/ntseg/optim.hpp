#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ntseg/unet.hpp"

// Adam. Moments are stored alongside each parameter tensor; the update is
// computed in double and stored back at parameter precision, so float and
// double models follow the same trajectory up to rounding.

namespace ntseg {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<NamedTensor<T>> m, v;
  size_t t = 0;

  static AdamState like(const UNetParams<T>& params) {
    AdamState s;
    s.m.reserve(params.entries().size());
    s.v.reserve(params.entries().size());
    for (const auto& e : params.entries()) {
      s.m.push_back({e.name, Tensor<T>(e.value.shape())});
      s.v.push_back({e.name, Tensor<T>(e.value.shape())});
    }
    return s;
  }
};

template <typename T>
void adam_step(UNetParams<T>& params, const UNetParams<T>& grads,
               AdamState<T>& state, const AdamConfig& cfg) {
  auto& entries = params.entries();
  check(grads.entries().size() == entries.size() &&
            state.m.size() == entries.size(),
        "adam_step: parameter, gradient and state lists differ in length");

  ++state.t;
  const double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  for (size_t i = 0; i < entries.size(); ++i) {
    Tensor<T>& p = entries[i].value;
    const Tensor<T>& g = grads.entries()[i].value;
    check(grads.entries()[i].name == entries[i].name && g.same_shape(p),
          "adam_step: gradient '" + grads.entries()[i].name +
              "' does not match parameter '" + entries[i].name + "'");
    Tensor<T>& m = state.m[i].value;
    Tensor<T>& v = state.v[i].value;

    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj =
          cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) +
                        (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / b1t;
      const double vhat = vj / b2t;
      p[j] = static_cast<T>(static_cast<double>(p[j]) -
                            cfg.learning_rate * mhat /
                                (std::sqrt(vhat) + cfg.epsilon));
    }
  }
}

}  // namespace ntseg
