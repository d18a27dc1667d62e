#include "ntseg/gradient_suite.hpp"

#include <cmath>

#include "ntseg/loss.hpp"
#include "ntseg/ops.hpp"
#include "ntseg/rng.hpp"
#include "ntseg/unet.hpp"

namespace ntseg {

namespace {

constexpr double kPrimitiveTol = 1e-4;
constexpr double kEndToEndTol = 1e-3;

TensorD random_tensor(std::vector<size_t> shape, Rng& rng) {
  TensorD t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

// Distinct values with gaps far larger than the finite-difference step, so
// ReLU masks and pooling winners cannot flip during probing.
TensorD spread_tensor(std::vector<size_t> shape, double keep_away_from_zero) {
  TensorD t(std::move(shape));
  const size_t n = t.size();
  for (size_t i = 0; i < n; ++i) {
    const size_t k = (i * 2654435761u) % n;
    double v = (static_cast<double>(k) / static_cast<double>(n) - 0.5) * 2.0;
    if (keep_away_from_zero > 0)
      v += v >= 0 ? keep_away_from_zero : -keep_away_from_zero;
    t[i] = v;
  }
  return t;
}

TensorD scalar_tensor(double v) {
  TensorD t({1});
  t[0] = v;
  return t;
}

TensorD one_hot_target(size_t n, size_t h, size_t w, Rng& rng) {
  TensorD t({n, kNumClasses, h, w});
  for (size_t i = 0; i < n * h * w; ++i) {
    const size_t img = i / (h * w), pix = i % (h * w);
    const size_t c = rng.next_u64() % kNumClasses;
    t[(img * kNumClasses + c) * h * w + pix] = 1.0;
  }
  return t;
}

GradSuiteEntry run_entry(std::string name, double tol,
                         const GradCheckProblem& problem, uint64_t seed,
                         size_t max_probes = 400) {
  GradSuiteEntry entry;
  entry.name = std::move(name);
  entry.tolerance = tol;
  entry.result = grad_check(problem, 1e-5, seed, max_probes);
  entry.passed = entry.result.pass(tol);
  return entry;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(uint64_t seed, bool inject_bug) {
  std::vector<GradSuiteEntry> out;
  Rng rng(derive_seed(seed, "gradient-suite"));

  {  // conv2d: input, weight, bias
    TensorD in = random_tensor({2, 2, 5, 6}, rng);
    TensorD w = random_tensor({3, 2, 3, 3}, rng);
    TensorD b = random_tensor({3}, rng);
    GradCheckProblem p;
    p.inputs = {&in, &w, &b};
    p.forward = [&] { return conv2d(in, w, b); };
    p.backward = [&, inject_bug](const TensorD& g) {
      TensorD gi, gw, gb;
      conv2d_backward(in, w, g, &gi, &gw, &gb);
      if (inject_bug)
        for (size_t i = 0; i < gw.size(); ++i) gw[i] = -gw[i];
      return std::vector<TensorD>{gi, gw, gb};
    };
    out.push_back(run_entry("conv2d", kPrimitiveTol, p, seed + 1));
  }

  {  // conv1x1
    TensorD in = random_tensor({2, 3, 4, 4}, rng);
    TensorD w = random_tensor({2, 3, 1, 1}, rng);
    TensorD b = random_tensor({2}, rng);
    GradCheckProblem p;
    p.inputs = {&in, &w, &b};
    p.forward = [&] { return conv1x1(in, w, b); };
    p.backward = [&](const TensorD& g) {
      TensorD gi, gw, gb;
      conv1x1_backward(in, w, g, &gi, &gw, &gb);
      return std::vector<TensorD>{gi, gw, gb};
    };
    out.push_back(run_entry("conv1x1", kPrimitiveTol, p, seed + 2));
  }

  {  // relu, probed away from the kink
    TensorD in = spread_tensor({2, 2, 5, 5}, 0.05);
    GradCheckProblem p;
    p.inputs = {&in};
    p.forward = [&] { return relu(in); };
    p.backward = [&](const TensorD& g) {
      return std::vector<TensorD>{relu_backward(in, g)};
    };
    out.push_back(run_entry("relu", kPrimitiveTol, p, seed + 3));
  }

  {  // maxpool2, distinct values so winners are stable under probing
    TensorD in = spread_tensor({2, 2, 6, 6}, 0.0);
    GradCheckProblem p;
    p.inputs = {&in};
    p.forward = [&] { return maxpool2(in); };
    p.backward = [&](const TensorD& g) {
      MaxPoolContext ctx;
      maxpool2(in, &ctx);
      return std::vector<TensorD>{maxpool2_backward(ctx, g)};
    };
    out.push_back(run_entry("maxpool2", kPrimitiveTol, p, seed + 4));
  }

  {  // upconv2
    TensorD in = random_tensor({2, 3, 3, 4}, rng);
    TensorD w = random_tensor({3, 2, 2, 2}, rng);
    TensorD b = random_tensor({2}, rng);
    GradCheckProblem p;
    p.inputs = {&in, &w, &b};
    p.forward = [&] { return upconv2(in, w, b); };
    p.backward = [&](const TensorD& g) {
      TensorD gi, gw, gb;
      upconv2_backward(in, w, g, &gi, &gw, &gb);
      return std::vector<TensorD>{gi, gw, gb};
    };
    out.push_back(run_entry("upconv2", kPrimitiveTol, p, seed + 5));
  }

  {  // concat_channels
    TensorD a = random_tensor({2, 2, 4, 4}, rng);
    TensorD b = random_tensor({2, 3, 4, 4}, rng);
    GradCheckProblem p;
    p.inputs = {&a, &b};
    p.forward = [&] { return concat_channels(a, b); };
    p.backward = [&](const TensorD& g) {
      auto [ga, gb] = split_channels(g, a.dim(1));
      return std::vector<TensorD>{ga, gb};
    };
    out.push_back(run_entry("concat_channels", kPrimitiveTol, p, seed + 6));
  }

  {  // softmax_channels
    TensorD in = random_tensor({2, 4, 3, 3}, rng);
    GradCheckProblem p;
    p.inputs = {&in};
    p.forward = [&] { return softmax_channels(in); };
    p.backward = [&](const TensorD& g) {
      TensorD probs = softmax_channels(in);
      return std::vector<TensorD>{softmax_channels_backward(probs, g)};
    };
    out.push_back(run_entry("softmax_channels", kPrimitiveTol, p, seed + 7));
  }

  {  // dice loss with respect to the predictions
    TensorD logits = random_tensor({1, kNumClasses, 6, 6}, rng);
    TensorD pred = softmax_channels(logits);
    TensorD target = one_hot_target(1, 6, 6, rng);
    GradCheckProblem p;
    p.inputs = {&pred};
    p.forward = [&] { return scalar_tensor(dice_loss(pred, target)); };
    p.backward = [&](const TensorD& g) {
      TensorD grad = dice_loss_backward(pred, target);
      for (size_t i = 0; i < grad.size(); ++i) grad[i] *= g[0];
      return std::vector<TensorD>{grad};
    };
    out.push_back(run_entry("dice_loss", kPrimitiveTol, p, seed + 8));
  }

  {  // dice loss through softmax, with respect to the logits
    TensorD logits = random_tensor({1, kNumClasses, 6, 6}, rng);
    TensorD target = one_hot_target(1, 6, 6, rng);
    GradCheckProblem p;
    p.inputs = {&logits};
    p.forward = [&] {
      return scalar_tensor(dice_loss(softmax_channels(logits), target));
    };
    p.backward = [&](const TensorD& g) {
      TensorD probs = softmax_channels(logits);
      TensorD gp = dice_loss_backward(probs, target);
      TensorD gz = softmax_channels_backward(probs, gp);
      for (size_t i = 0; i < gz.size(); ++i) gz[i] *= g[0];
      return std::vector<TensorD>{gz};
    };
    out.push_back(run_entry("softmax_dice", kPrimitiveTol, p, seed + 9));
  }

  {  // end to end: dice loss of a tiny network, every parameter probed
    UNetConfig cfg;
    cfg.in_channels = 1;
    cfg.num_classes = kNumClasses;
    cfg.base_channels = 2;
    cfg.depth = 2;
    cfg.seed = derive_seed(seed, "gradient-suite/unet");
    UNetParams<double> params = unet_build<double>(cfg);
    TensorD input = random_tensor({1, 1, 16, 16}, rng);
    TensorD target = one_hot_target(1, 16, 16, rng);

    GradCheckProblem p;
    for (auto& e : params.entries()) p.inputs.push_back(&e.value);
    p.forward = [&] {
      return scalar_tensor(dice_loss(unet_forward(params, input), target));
    };
    p.backward = [&](const TensorD& g) {
      UNetCache<double> cache;
      unet_forward(params, input, &cache);
      TensorD gp = dice_loss_backward(cache.probs, target);
      for (size_t i = 0; i < gp.size(); ++i) gp[i] *= g[0];
      UNetParams<double> grads = unet_backward(params, cache, gp);
      std::vector<TensorD> gs;
      gs.reserve(grads.entries().size());
      for (auto& e : grads.entries()) gs.push_back(std::move(e.value));
      return gs;
    };
    // Probe every coordinate: the largest tensor here has 576 entries.
    out.push_back(
        run_entry("unet_tiny", kEndToEndTol, p, seed + 10, params.scalar_count()));
  }

  return out;
}

bool all_passed(const std::vector<GradSuiteEntry>& entries) {
  for (const auto& e : entries)
    if (!e.passed) return false;
  return !entries.empty();
}

}  // namespace ntseg
