#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ntseg/tensor.hpp"

// Training loss: per-class soft Dice over the whole batch,
//   dsc_i = (2 * sum(p_i t_i) + s) / (sum(p_i) + sum(t_i) + s),
// and loss = 4 - sum_{i=0..3} dsc_i (background included). The smoothing
// constant keeps classes absent from a patch from dividing by zero.

namespace ntseg {

inline constexpr size_t kNumClasses = 4;
inline constexpr double kDefaultDiceSmooth = 1.0;

namespace detail {

template <typename T>
void check_dice_shapes(const Tensor<T>& pred, const Tensor<T>& target) {
  check(pred.rank() == 4 && pred.dim(1) == kNumClasses,
        "soft_dice: prediction must be N,4,H,W, got " + pred.shape_string());
  check(pred.same_shape(target),
        "soft_dice: target shape " + target.shape_string() +
            " does not match prediction " + pred.shape_string());
}

// Batch-summed intersection and mass terms per class, accumulated in double.
struct DiceTerms {
  std::array<double, kNumClasses> inter{}, psum{}, tsum{};
};

template <typename T>
DiceTerms dice_terms(const Tensor<T>& pred, const Tensor<T>& target) {
  DiceTerms terms;
  const size_t N = pred.dim(0), plane = pred.dim(2) * pred.dim(3);
  for (size_t n = 0; n < N; ++n) {
    for (size_t c = 0; c < kNumClasses; ++c) {
      const T* p = pred.data() + (n * kNumClasses + c) * plane;
      const T* t = target.data() + (n * kNumClasses + c) * plane;
      double inter = 0, psum = 0, tsum = 0;
      for (size_t i = 0; i < plane; ++i) {
        inter += static_cast<double>(p[i]) * static_cast<double>(t[i]);
        psum += static_cast<double>(p[i]);
        tsum += static_cast<double>(t[i]);
      }
      terms.inter[c] += inter;
      terms.psum[c] += psum;
      terms.tsum[c] += tsum;
    }
  }
  return terms;
}

}  // namespace detail

template <typename T>
std::array<double, kNumClasses> soft_dice(const Tensor<T>& pred,
                                          const Tensor<T>& target,
                                          double smooth = kDefaultDiceSmooth) {
  detail::check_dice_shapes(pred, target);
  auto terms = detail::dice_terms(pred, target);
  std::array<double, kNumClasses> dsc;
  for (size_t c = 0; c < kNumClasses; ++c)
    dsc[c] = (2.0 * terms.inter[c] + smooth) /
             (terms.psum[c] + terms.tsum[c] + smooth);
  return dsc;
}

template <typename T>
double dice_loss(const Tensor<T>& pred, const Tensor<T>& target,
                 double smooth = kDefaultDiceSmooth) {
  auto dsc = soft_dice(pred, target, smooth);
  double loss = static_cast<double>(kNumClasses);
  for (double d : dsc) loss -= d;
  return loss;
}

// d(loss)/d(pred). With D_c = sum(p_c) + sum(t_c) + s and
// I_c = 2 sum(p_c t_c) + s:  d(dsc_c)/d(p_c(x)) = (2 t_c(x) D_c - I_c) / D_c^2.
template <typename T>
Tensor<T> dice_loss_backward(const Tensor<T>& pred, const Tensor<T>& target,
                             double smooth = kDefaultDiceSmooth) {
  detail::check_dice_shapes(pred, target);
  auto terms = detail::dice_terms(pred, target);
  std::array<double, kNumClasses> inter, denom;
  for (size_t c = 0; c < kNumClasses; ++c) {
    inter[c] = 2.0 * terms.inter[c] + smooth;
    denom[c] = terms.psum[c] + terms.tsum[c] + smooth;
  }
  Tensor<T> grad(pred.shape());
  const size_t N = pred.dim(0), plane = pred.dim(2) * pred.dim(3);
  for (size_t n = 0; n < N; ++n) {
    for (size_t c = 0; c < kNumClasses; ++c) {
      const T* t = target.data() + (n * kNumClasses + c) * plane;
      T* g = grad.data() + (n * kNumClasses + c) * plane;
      const double inv = 1.0 / denom[c];
      const double ratio = inter[c] * inv * inv;
      for (size_t i = 0; i < plane; ++i)
        g[i] = static_cast<T>(-(2.0 * static_cast<double>(t[i]) * inv - ratio));
    }
  }
  return grad;
}

// One-hot encoding of label patches into an N,4,H,W tensor.
template <typename T>
Tensor<T> one_hot_labels(const std::vector<const uint8_t*>& patches, size_t h,
                         size_t w) {
  Tensor<T> out({patches.size(), kNumClasses, h, w});
  const size_t plane = h * w;
  for (size_t n = 0; n < patches.size(); ++n) {
    T* base = out.data() + n * kNumClasses * plane;
    for (size_t i = 0; i < plane; ++i) base[patches[n][i] * plane + i] = T(1);
  }
  return out;
}

// Per-pixel argmax over the four class channels; ties go to the lowest index.
template <typename T>
std::vector<uint8_t> reconstruct_labels(const Tensor<T>& probs) {
  check(probs.rank() == 4 && probs.dim(1) == kNumClasses,
        "reconstruct_labels: input must be N,4,H,W, got " +
            probs.shape_string());
  const size_t N = probs.dim(0), plane = probs.dim(2) * probs.dim(3);
  std::vector<uint8_t> labels(N * plane);
  for (size_t n = 0; n < N; ++n) {
    const T* base = probs.data() + n * kNumClasses * plane;
    uint8_t* out = labels.data() + n * plane;
    for (size_t i = 0; i < plane; ++i) {
      uint8_t best = 0;
      T bv = base[i];
      for (uint8_t c = 1; c < kNumClasses; ++c) {
        if (base[c * plane + i] > bv) {
          bv = base[c * plane + i];
          best = c;
        }
      }
      out[i] = best;
    }
  }
  return labels;
}

}  // namespace ntseg
