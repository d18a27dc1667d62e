#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ntseg/loss.hpp"
#include "ntseg/ops.hpp"
#include "ntseg/rng.hpp"
#include "ntseg/tensor.hpp"

// The segmentation network: an encoder/decoder ladder with skip connections.
// Encoder level l maps to base*2^(l-1) channels through two 3x3 conv+ReLU
// blocks and halves resolution with 2x2 max pooling; the bottleneck doubles
// once more; each decoder level upsamples with a 2x2 stride-2 upconvolution,
// concatenates the equal-resolution skip (skip first, upsampled second), and
// applies another double conv block; a final 1x1 convolution maps to class
// logits and softmax produces per-pixel probabilities.

namespace ntseg {

struct UNetConfig {
  size_t in_channels = 1;
  size_t num_classes = 4;
  size_t base_channels = 64;
  size_t depth = 4;  // number of pooling steps
  uint64_t seed = 0;

  void validate() const {
    check(base_channels >= 1, "UNetConfig: base_channels must be >= 1");
    check(depth >= 1, "UNetConfig: depth must be >= 1");
    check(num_classes >= 2, "UNetConfig: num_classes must be >= 2");
    check(in_channels >= 1, "UNetConfig: in_channels must be >= 1");
  }
  bool operator==(const UNetConfig&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

// Ordered name -> tensor store; the order is the checkpoint payload order.
template <typename T>
class UNetParams {
 public:
  UNetParams() = default;
  explicit UNetParams(UNetConfig cfg) : config_(cfg) {}

  const UNetConfig& config() const { return config_; }
  std::vector<NamedTensor<T>>& entries() { return entries_; }
  const std::vector<NamedTensor<T>>& entries() const { return entries_; }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  Tensor<T>& at(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return e.value;
    throw std::invalid_argument("no parameter named '" + name + "'");
  }
  const Tensor<T>& at(const std::string& name) const {
    const Tensor<T>* t = find(name);
    if (!t) throw std::invalid_argument("no parameter named '" + name + "'");
    return *t;
  }

  void add(std::string name, Tensor<T> value) {
    check(!has(name), "duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  // Same names and shapes, zero values.
  static UNetParams like(const UNetParams& other) {
    UNetParams out(other.config_);
    out.entries_.reserve(other.entries_.size());
    for (const auto& e : other.entries_)
      out.entries_.push_back({e.name, Tensor<T>(e.value.shape())});
    return out;
  }

  template <typename U>
  UNetParams<U> cast() const {
    UNetParams<U> out;
    out.set_config(config_);
    for (const auto& e : entries_)
      out.entries().push_back({e.name, e.value.template cast<U>()});
    return out;
  }

  void set_config(const UNetConfig& cfg) { config_ = cfg; }

 private:
  const Tensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.value;
    return nullptr;
  }

  UNetConfig config_;
  std::vector<NamedTensor<T>> entries_;
};

template <typename T>
size_t param_count(const UNetParams<T>& params) {
  return params.scalar_count();
}

// Canonical layer plan: names, shapes, and Glorot fans, in checkpoint order.
struct LayerPlanEntry {
  std::string name;
  std::vector<size_t> shape;
  size_t fan_in = 0, fan_out = 0;  // zero for biases
};

inline std::vector<LayerPlanEntry> unet_layer_plan(const UNetConfig& cfg) {
  cfg.validate();
  std::vector<LayerPlanEntry> plan;
  auto conv = [&plan](const std::string& prefix, size_t in_ch, size_t out_ch,
                      size_t k) {
    plan.push_back({prefix + ".weight",
                    {out_ch, in_ch, k, k},
                    in_ch * k * k,
                    out_ch * k * k});
    plan.push_back({prefix + ".bias", {out_ch}, 0, 0});
  };
  auto block = [&conv](const std::string& prefix, size_t in_ch, size_t out_ch) {
    conv(prefix + ".conv1", in_ch, out_ch, 3);
    conv(prefix + ".conv2", out_ch, out_ch, 3);
  };

  const size_t base = cfg.base_channels;
  for (size_t l = 1; l <= cfg.depth; ++l) {
    size_t in_ch = l == 1 ? cfg.in_channels : base << (l - 2);
    block("enc" + std::to_string(l), in_ch, base << (l - 1));
  }
  block("bottleneck", base << (cfg.depth - 1), base << cfg.depth);
  for (size_t l = cfg.depth; l >= 1; --l) {
    size_t deep_ch = base << l;
    size_t out_ch = base << (l - 1);
    // upconvolution weight is inC,outC,2,2
    plan.push_back({"up" + std::to_string(l) + ".weight",
                    {deep_ch, out_ch, 2, 2},
                    deep_ch * 4,
                    out_ch * 4});
    plan.push_back({"up" + std::to_string(l) + ".bias", {out_ch}, 0, 0});
    block("dec" + std::to_string(l), 2 * out_ch, out_ch);
  }
  conv("final", base, cfg.num_classes, 1);
  return plan;
}

// Glorot-uniform weights, zero biases, one deterministic stream in canonical
// order. Values are drawn in double and cast, so a float build equals the
// rounded double build.
template <typename T>
UNetParams<T> unet_build(const UNetConfig& cfg) {
  UNetParams<T> params(cfg);
  Rng rng(cfg.seed);
  for (const auto& entry : unet_layer_plan(cfg)) {
    Tensor<T> t(entry.shape);
    if (entry.fan_in > 0) {
      const double a =
          std::sqrt(6.0 / static_cast<double>(entry.fan_in + entry.fan_out));
      for (size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(a * (2.0 * rng.uniform() - 1.0));
    }
    params.add(entry.name, std::move(t));
  }
  return params;
}

template <typename T>
struct ConvBlockCache {
  Tensor<T> in, pre1, act1, pre2;
};

template <typename T>
struct UNetCache {
  std::vector<ConvBlockCache<T>> enc;
  std::vector<MaxPoolContext> pools;
  ConvBlockCache<T> bottleneck;
  std::vector<Tensor<T>> up_in;          // indexed by decoder level - 1
  std::vector<ConvBlockCache<T>> dec;    // indexed by decoder level - 1
  std::vector<size_t> skip_channels;     // indexed by decoder level - 1
  Tensor<T> final_in;
  Tensor<T> probs;
};

namespace detail {

template <typename T>
Tensor<T> conv_block_forward(const UNetParams<T>& params,
                             const std::string& prefix, Tensor<T> input,
                             ConvBlockCache<T>* cache) {
  Tensor<T> pre1 = conv2d(input, params.at(prefix + ".conv1.weight"),
                          params.at(prefix + ".conv1.bias"));
  Tensor<T> act1 = relu(pre1);
  Tensor<T> pre2 = conv2d(act1, params.at(prefix + ".conv2.weight"),
                          params.at(prefix + ".conv2.bias"));
  Tensor<T> out = relu(pre2);
  if (cache) {
    cache->in = std::move(input);
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->pre2 = std::move(pre2);
  }
  return out;
}

template <typename T>
Tensor<T> conv_block_backward(const UNetParams<T>& params,
                              UNetParams<T>& grads, const std::string& prefix,
                              const ConvBlockCache<T>& cache,
                              const Tensor<T>& grad_out) {
  Tensor<T> g2 = relu_backward(cache.pre2, grad_out);
  Tensor<T> g_act1;
  conv2d_backward(cache.act1, params.at(prefix + ".conv2.weight"), g2, &g_act1,
                  &grads.at(prefix + ".conv2.weight"),
                  &grads.at(prefix + ".conv2.bias"));
  Tensor<T> g1 = relu_backward(cache.pre1, g_act1);
  Tensor<T> g_in;
  conv2d_backward(cache.in, params.at(prefix + ".conv1.weight"), g1, &g_in,
                  &grads.at(prefix + ".conv1.weight"),
                  &grads.at(prefix + ".conv1.bias"));
  return g_in;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  check(dst.same_shape(src), "tensor add: shape mismatch " +
                                 dst.shape_string() + " vs " +
                                 src.shape_string());
  T* d = dst.data();
  const T* s = src.data();
  for (size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// Runs the network and returns per-pixel class probabilities. Accepts any
// spatial size divisible by 2^depth (the network is fully convolutional).
// Pass a cache to keep the values the backward pass needs.
template <typename T>
Tensor<T> unet_forward(const UNetParams<T>& params, const Tensor<T>& input,
                       UNetCache<T>* cache = nullptr) {
  const UNetConfig& cfg = params.config();
  check(input.rank() == 4, "unet_forward: input must be N,C,H,W, got " +
                               input.shape_string());
  check(input.dim(1) == cfg.in_channels,
        "unet_forward: input channels (" + std::to_string(input.dim(1)) +
            ") do not match model in_channels (" +
            std::to_string(cfg.in_channels) + ")");
  const size_t divisor = size_t(1) << cfg.depth;
  check(input.dim(2) % divisor == 0 && input.dim(3) % divisor == 0,
        "unet_forward: spatial dims must be multiples of " +
            std::to_string(divisor) + ", got " +
            std::to_string(input.dim(2)) + "x" + std::to_string(input.dim(3)));

  if (cache) {
    cache->enc.resize(cfg.depth);
    cache->pools.resize(cfg.depth);
    cache->up_in.resize(cfg.depth);
    cache->dec.resize(cfg.depth);
    cache->skip_channels.resize(cfg.depth);
  }

  std::vector<Tensor<T>> skips(cfg.depth);
  Tensor<T> x = input;
  for (size_t l = 1; l <= cfg.depth; ++l) {
    skips[l - 1] = detail::conv_block_forward(
        params, "enc" + std::to_string(l), std::move(x),
        cache ? &cache->enc[l - 1] : nullptr);
    MaxPoolContext local_ctx;
    MaxPoolContext* ctx = cache ? &cache->pools[l - 1] : &local_ctx;
    x = maxpool2(skips[l - 1], ctx);
  }
  x = detail::conv_block_forward(params, "bottleneck", std::move(x),
                                 cache ? &cache->bottleneck : nullptr);
  for (size_t l = cfg.depth; l >= 1; --l) {
    const std::string up_name = "up" + std::to_string(l);
    Tensor<T> up = upconv2(x, params.at(up_name + ".weight"),
                           params.at(up_name + ".bias"));
    if (cache) cache->up_in[l - 1] = std::move(x);
    Tensor<T> merged = concat_channels(skips[l - 1], up);
    if (cache) cache->skip_channels[l - 1] = skips[l - 1].dim(1);
    skips[l - 1] = Tensor<T>();  // release
    x = detail::conv_block_forward(params, "dec" + std::to_string(l),
                                   std::move(merged),
                                   cache ? &cache->dec[l - 1] : nullptr);
  }
  Tensor<T> logits =
      conv1x1(x, params.at("final.weight"), params.at("final.bias"));
  if (cache) cache->final_in = std::move(x);
  Tensor<T> probs = softmax_channels(logits);
  if (cache) cache->probs = probs;
  return probs;
}

// Parameter gradients for d(loss)/d(probabilities). Same names and order as
// the parameters themselves.
template <typename T>
UNetParams<T> unet_backward(const UNetParams<T>& params,
                            const UNetCache<T>& cache,
                            const Tensor<T>& grad_probs) {
  const UNetConfig& cfg = params.config();
  UNetParams<T> grads = UNetParams<T>::like(params);

  Tensor<T> g = softmax_channels_backward(cache.probs, grad_probs);
  Tensor<T> g_final_in;
  conv1x1_backward(cache.final_in, params.at("final.weight"), g, &g_final_in,
                   &grads.at("final.weight"), &grads.at("final.bias"));

  std::vector<Tensor<T>> skip_grads(cfg.depth);
  g = std::move(g_final_in);
  for (size_t l = 1; l <= cfg.depth; ++l) {
    g = detail::conv_block_backward(params, grads, "dec" + std::to_string(l),
                                    cache.dec[l - 1], g);
    auto [g_skip, g_up] = split_channels(g, cache.skip_channels[l - 1]);
    skip_grads[l - 1] = std::move(g_skip);
    const std::string up_name = "up" + std::to_string(l);
    Tensor<T> g_deeper;
    upconv2_backward(cache.up_in[l - 1], params.at(up_name + ".weight"), g_up,
                     &g_deeper, &grads.at(up_name + ".weight"),
                     &grads.at(up_name + ".bias"));
    g = std::move(g_deeper);
  }

  g = detail::conv_block_backward(params, grads, "bottleneck",
                                  cache.bottleneck, g);
  for (size_t l = cfg.depth; l >= 1; --l) {
    g = maxpool2_backward(cache.pools[l - 1], g);
    detail::add_into(g, skip_grads[l - 1]);
    g = detail::conv_block_backward(params, grads, "enc" + std::to_string(l),
                                    cache.enc[l - 1], g);
  }
  return grads;
}

}  // namespace ntseg
