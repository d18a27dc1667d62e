#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "ntseg/parallel.hpp"
#include "ntseg/tensor.hpp"

// Layer primitives with explicit adjoints. Every backward routine consumes
// only values saved from the forward pass (inputs, weights, pool winners,
// softmax outputs); none of them re-runs the forward computation.
//
// Reduction order inside one output cell is fixed and independent of the
// worker split, so sequential and parallel runs are bit-identical.

namespace ntseg {

namespace detail {

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& weight,
                       const Tensor<T>& bias, size_t kernel, const char* op) {
  check(input.rank() == 4, std::string(op) + ": input must be N,C,H,W, got " +
                               input.shape_string());
  check(weight.rank() == 4,
        std::string(op) + ": weight must be K,C,kh,kw, got " +
            weight.shape_string());
  check(weight.dim(2) == kernel && weight.dim(3) == kernel,
        std::string(op) + ": kernel must be " + std::to_string(kernel) + "x" +
            std::to_string(kernel) + ", got " + std::to_string(weight.dim(2)) +
            "x" + std::to_string(weight.dim(3)));
  check(input.dim(1) == weight.dim(1),
        std::string(op) + ": input channels (C=" + std::to_string(input.dim(1)) +
            ") do not match weight in-channels (" +
            std::to_string(weight.dim(1)) + ")");
  check(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
        std::string(op) + ": bias length must equal out-channels (K=" +
            std::to_string(weight.dim(0)) + "), got " + bias.shape_string());
}

// Same-padding cross-correlation with an odd square kernel (1x1 and 3x3 are
// the instances the network uses).
template <typename T>
Tensor<T> conv_same(const Tensor<T>& input, const Tensor<T>& weight,
                    const Tensor<T>& bias) {
  const size_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
               W = input.dim(3);
  const size_t K = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const size_t ph = kh / 2, pw = kw / 2;
  Tensor<T> out({N, K, H, W});

  parallel_for(N * K, [&](size_t nk) {
    const size_t n = nk / K, k = nk % K;
    T* out_plane = out.data() + (n * K + k) * H * W;
    const T bk = bias[k];
    for (size_t i = 0; i < H * W; ++i) out_plane[i] = bk;
    for (size_t c = 0; c < C; ++c) {
      const T* in_plane = input.data() + (n * C + c) * H * W;
      const T* w_cell = weight.data() + (k * C + c) * kh * kw;
      for (size_t ky = 0; ky < kh; ++ky) {
        const ptrdiff_t dy = static_cast<ptrdiff_t>(ky) - static_cast<ptrdiff_t>(ph);
        const size_t y0 = dy < 0 ? static_cast<size_t>(-dy) : 0;
        const size_t y1 = dy > 0 ? H - static_cast<size_t>(dy) : H;
        for (size_t kx = 0; kx < kw; ++kx) {
          const ptrdiff_t dx = static_cast<ptrdiff_t>(kx) - static_cast<ptrdiff_t>(pw);
          const size_t x0 = dx < 0 ? static_cast<size_t>(-dx) : 0;
          const size_t x1 = dx > 0 ? W - static_cast<size_t>(dx) : W;
          const T wv = w_cell[ky * kw + kx];
          for (size_t y = y0; y < y1; ++y) {
            T* __restrict__ orow = out_plane + y * W;
            const T* __restrict__ irow =
                in_plane + static_cast<size_t>(static_cast<ptrdiff_t>(y) + dy) * W;
            for (size_t x = x0; x < x1; ++x)
              orow[x] += wv * irow[static_cast<size_t>(static_cast<ptrdiff_t>(x) + dx)];
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
void conv_same_backward(const Tensor<T>& input, const Tensor<T>& weight,
                        const Tensor<T>& grad_out, Tensor<T>* grad_input,
                        Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
  const size_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
               W = input.dim(3);
  const size_t K = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const size_t ph = kh / 2, pw = kw / 2;

  if (grad_bias) {
    *grad_bias = Tensor<T>({K});
    parallel_for(K, [&](size_t k) {
      T acc = 0;
      for (size_t n = 0; n < N; ++n) {
        const T* g = grad_out.data() + (n * K + k) * H * W;
        for (size_t i = 0; i < H * W; ++i) acc += g[i];
      }
      (*grad_bias)[k] = acc;
    });
  }

  if (grad_input) {
    *grad_input = Tensor<T>(input.shape());
    parallel_for(N * C, [&](size_t nc) {
      const size_t n = nc / C, c = nc % C;
      T* gin_plane = grad_input->data() + (n * C + c) * H * W;
      for (size_t k = 0; k < K; ++k) {
        const T* g_plane = grad_out.data() + (n * K + k) * H * W;
        const T* w_cell = weight.data() + (k * C + c) * kh * kw;
        for (size_t ky = 0; ky < kh; ++ky) {
          // input row iy receives grad rows iy - ky + ph
          const ptrdiff_t dy = static_cast<ptrdiff_t>(ph) - static_cast<ptrdiff_t>(ky);
          const size_t y0 = dy < 0 ? static_cast<size_t>(-dy) : 0;
          const size_t y1 = dy > 0 ? H - static_cast<size_t>(dy) : H;
          for (size_t kx = 0; kx < kw; ++kx) {
            const ptrdiff_t dx = static_cast<ptrdiff_t>(pw) - static_cast<ptrdiff_t>(kx);
            const size_t x0 = dx < 0 ? static_cast<size_t>(-dx) : 0;
            const size_t x1 = dx > 0 ? W - static_cast<size_t>(dx) : W;
            const T wv = w_cell[ky * kw + kx];
            for (size_t y = y0; y < y1; ++y) {
              T* __restrict__ grow = gin_plane + y * W;
              const T* __restrict__ orow =
                  g_plane + static_cast<size_t>(static_cast<ptrdiff_t>(y) + dy) * W;
              for (size_t x = x0; x < x1; ++x)
                grow[x] += wv * orow[static_cast<size_t>(static_cast<ptrdiff_t>(x) + dx)];
            }
          }
        }
      }
    });
  }

  if (grad_weight) {
    *grad_weight = Tensor<T>(weight.shape());
    parallel_for(K * C, [&](size_t kc) {
      const size_t k = kc / C, c = kc % C;
      std::vector<T> lane(W);
      for (size_t ky = 0; ky < kh; ++ky) {
        const ptrdiff_t dy = static_cast<ptrdiff_t>(ky) - static_cast<ptrdiff_t>(ph);
        const size_t y0 = dy < 0 ? static_cast<size_t>(-dy) : 0;
        const size_t y1 = dy > 0 ? H - static_cast<size_t>(dy) : H;
        for (size_t kx = 0; kx < kw; ++kx) {
          const ptrdiff_t dx = static_cast<ptrdiff_t>(kx) - static_cast<ptrdiff_t>(pw);
          const size_t x0 = dx < 0 ? static_cast<size_t>(-dx) : 0;
          const size_t x1 = dx > 0 ? W - static_cast<size_t>(dx) : W;
          std::fill(lane.begin(), lane.end(), T(0));
          for (size_t n = 0; n < N; ++n) {
            const T* in_plane = input.data() + (n * C + c) * H * W;
            const T* g_plane = grad_out.data() + (n * K + k) * H * W;
            for (size_t y = y0; y < y1; ++y) {
              const T* __restrict__ irow =
                  in_plane + static_cast<size_t>(static_cast<ptrdiff_t>(y) + dy) * W;
              const T* __restrict__ grow = g_plane + y * W;
              T* __restrict__ acc = lane.data();
              for (size_t x = x0; x < x1; ++x)
                acc[x] += irow[static_cast<size_t>(static_cast<ptrdiff_t>(x) + dx)] * grow[x];
            }
          }
          T total = 0;
          for (size_t x = 0; x < W; ++x) total += lane[x];
          (*grad_weight)[(k * C + c) * kh * kw + ky * kw + kx] = total;
        }
      }
    });
  }
}

}  // namespace detail

// --- 3x3 same-padding convolution -----------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::check_conv_shapes(input, weight, bias, 3, "conv2d");
  return detail::conv_same(input, weight, bias);
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight,
                     const Tensor<T>& grad_out, Tensor<T>* grad_input,
                     Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
  detail::check_conv_shapes(input, weight,
                            Tensor<T>({weight.dim(0)}), 3, "conv2d_backward");
  check(grad_out.rank() == 4 && grad_out.dim(0) == input.dim(0) &&
            grad_out.dim(1) == weight.dim(0) &&
            grad_out.dim(2) == input.dim(2) && grad_out.dim(3) == input.dim(3),
        "conv2d_backward: grad shape " + grad_out.shape_string() +
            " does not match output of " + input.shape_string());
  detail::conv_same_backward(input, weight, grad_out, grad_input, grad_weight,
                             grad_bias);
}

// --- 1x1 convolution (per-pixel channel mix) -------------------------------

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& input, const Tensor<T>& weight,
                  const Tensor<T>& bias) {
  detail::check_conv_shapes(input, weight, bias, 1, "conv1x1");
  return detail::conv_same(input, weight, bias);
}

template <typename T>
void conv1x1_backward(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& grad_out, Tensor<T>* grad_input,
                      Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
  detail::check_conv_shapes(input, weight,
                            Tensor<T>({weight.dim(0)}), 1, "conv1x1_backward");
  detail::conv_same_backward(input, weight, grad_out, grad_input, grad_weight,
                             grad_bias);
}

// --- ReLU -------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T* in = input.data();
  T* o = out.data();
  for (size_t i = 0; i < input.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  return out;
}

// Gradient passes where the saved pre-activation is positive; zero elsewhere
// (including exactly at zero).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  check(input.same_shape(grad_out),
        "relu_backward: grad shape " + grad_out.shape_string() +
            " does not match input " + input.shape_string());
  Tensor<T> out(input.shape());
  const T* in = input.data();
  const T* g = grad_out.data();
  T* o = out.data();
  for (size_t i = 0; i < input.size(); ++i) o[i] = in[i] > T(0) ? g[i] : T(0);
  return out;
}

// --- 2x2 max pooling, stride 2 ----------------------------------------------

// Winning input index per output cell; the adjoint routes gradient only there.
struct MaxPoolContext {
  std::vector<size_t> in_shape;
  std::vector<uint32_t> winner;  // flat index into the input plane pair
};

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input, MaxPoolContext* ctx = nullptr) {
  check(input.rank() == 4, "maxpool2: input must be N,C,H,W, got " +
                               input.shape_string());
  const size_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
               W = input.dim(3);
  check(H % 2 == 0 && W % 2 == 0,
        "maxpool2: spatial dims must be even, got H=" + std::to_string(H) +
            " W=" + std::to_string(W));
  const size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> out({N, C, Ho, Wo});
  if (ctx) {
    ctx->in_shape = input.shape();
    ctx->winner.assign(N * C * Ho * Wo, 0);
  }
  parallel_for(N * C, [&](size_t nc) {
    const T* in_plane = input.data() + nc * H * W;
    T* out_plane = out.data() + nc * Ho * Wo;
    uint32_t* win = ctx ? ctx->winner.data() + nc * Ho * Wo : nullptr;
    for (size_t y = 0; y < Ho; ++y) {
      for (size_t x = 0; x < Wo; ++x) {
        size_t base = (2 * y) * W + 2 * x;
        size_t best = base;
        T bv = in_plane[base];
        const size_t cand[3] = {base + 1, base + W, base + W + 1};
        for (size_t j = 0; j < 3; ++j) {
          if (in_plane[cand[j]] > bv) {
            bv = in_plane[cand[j]];
            best = cand[j];
          }
        }
        out_plane[y * Wo + x] = bv;
        if (win) win[y * Wo + x] = static_cast<uint32_t>(best);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> maxpool2_backward(const MaxPoolContext& ctx,
                            const Tensor<T>& grad_out) {
  const size_t N = ctx.in_shape[0], C = ctx.in_shape[1], H = ctx.in_shape[2],
               W = ctx.in_shape[3];
  const size_t Ho = H / 2, Wo = W / 2;
  check(grad_out.rank() == 4 && grad_out.dim(0) == N && grad_out.dim(1) == C &&
            grad_out.dim(2) == Ho && grad_out.dim(3) == Wo,
        "maxpool2_backward: grad shape " + grad_out.shape_string() +
            " does not match pooled output");
  Tensor<T> gin(ctx.in_shape);
  parallel_for(N * C, [&](size_t nc) {
    T* gin_plane = gin.data() + nc * H * W;
    const T* g_plane = grad_out.data() + nc * Ho * Wo;
    const uint32_t* win = ctx.winner.data() + nc * Ho * Wo;
    for (size_t i = 0; i < Ho * Wo; ++i) gin_plane[win[i]] += g_plane[i];
  });
  return gin;
}

// --- 2x2 upconvolution (transposed convolution), stride 2 -------------------

// Weight layout inC,outC,2,2. Each input pixel paints one disjoint 2x2
// output block, so output is exactly 2H x 2W.
template <typename T>
Tensor<T> upconv2(const Tensor<T>& input, const Tensor<T>& weight,
                  const Tensor<T>& bias) {
  check(input.rank() == 4, "upconv2: input must be N,C,H,W, got " +
                               input.shape_string());
  check(weight.rank() == 4 && weight.dim(2) == 2 && weight.dim(3) == 2,
        "upconv2: weight must be C,K,2,2, got " + weight.shape_string());
  check(input.dim(1) == weight.dim(0),
        "upconv2: input channels (C=" + std::to_string(input.dim(1)) +
            ") do not match weight in-channels (" +
            std::to_string(weight.dim(0)) + ")");
  const size_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
               W = input.dim(3);
  const size_t K = weight.dim(1);
  check(bias.rank() == 1 && bias.dim(0) == K,
        "upconv2: bias length must equal out-channels (K=" + std::to_string(K) +
            "), got " + bias.shape_string());
  const size_t Ho = 2 * H, Wo = 2 * W;
  Tensor<T> out({N, K, Ho, Wo});
  parallel_for(N * K, [&](size_t nk) {
    const size_t n = nk / K, k = nk % K;
    T* out_plane = out.data() + (n * K + k) * Ho * Wo;
    const T bk = bias[k];
    for (size_t i = 0; i < Ho * Wo; ++i) out_plane[i] = bk;
    for (size_t c = 0; c < C; ++c) {
      const T* in_plane = input.data() + (n * C + c) * H * W;
      const T* w_cell = weight.data() + (c * K + k) * 4;
      for (size_t dy = 0; dy < 2; ++dy) {
        for (size_t dx = 0; dx < 2; ++dx) {
          const T wv = w_cell[dy * 2 + dx];
          for (size_t y = 0; y < H; ++y) {
            const T* __restrict__ irow = in_plane + y * W;
            T* __restrict__ orow = out_plane + (2 * y + dy) * Wo + dx;
            for (size_t x = 0; x < W; ++x) orow[2 * x] += wv * irow[x];
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
void upconv2_backward(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& grad_out, Tensor<T>* grad_input,
                      Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
  const size_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
               W = input.dim(3);
  const size_t K = weight.dim(1);
  const size_t Ho = 2 * H, Wo = 2 * W;
  check(grad_out.rank() == 4 && grad_out.dim(0) == N && grad_out.dim(1) == K &&
            grad_out.dim(2) == Ho && grad_out.dim(3) == Wo,
        "upconv2_backward: grad shape " + grad_out.shape_string() +
            " does not match upsampled output");

  if (grad_bias) {
    *grad_bias = Tensor<T>({K});
    parallel_for(K, [&](size_t k) {
      T acc = 0;
      for (size_t n = 0; n < N; ++n) {
        const T* g = grad_out.data() + (n * K + k) * Ho * Wo;
        for (size_t i = 0; i < Ho * Wo; ++i) acc += g[i];
      }
      (*grad_bias)[k] = acc;
    });
  }

  if (grad_input) {
    *grad_input = Tensor<T>(input.shape());
    parallel_for(N * C, [&](size_t nc) {
      const size_t n = nc / C, c = nc % C;
      T* gin_plane = grad_input->data() + (n * C + c) * H * W;
      for (size_t k = 0; k < K; ++k) {
        const T* g_plane = grad_out.data() + (n * K + k) * Ho * Wo;
        const T* w_cell = weight.data() + (c * K + k) * 4;
        for (size_t dy = 0; dy < 2; ++dy) {
          for (size_t dx = 0; dx < 2; ++dx) {
            const T wv = w_cell[dy * 2 + dx];
            for (size_t y = 0; y < H; ++y) {
              T* __restrict__ grow = gin_plane + y * W;
              const T* __restrict__ orow = g_plane + (2 * y + dy) * Wo + dx;
              for (size_t x = 0; x < W; ++x) grow[x] += wv * orow[2 * x];
            }
          }
        }
      }
    });
  }

  if (grad_weight) {
    *grad_weight = Tensor<T>(weight.shape());
    parallel_for(C * K, [&](size_t ck) {
      const size_t c = ck / K, k = ck % K;
      std::vector<T> lane(W);
      for (size_t dy = 0; dy < 2; ++dy) {
        for (size_t dx = 0; dx < 2; ++dx) {
          std::fill(lane.begin(), lane.end(), T(0));
          for (size_t n = 0; n < N; ++n) {
            const T* in_plane = input.data() + (n * C + c) * H * W;
            const T* g_plane = grad_out.data() + (n * K + k) * Ho * Wo;
            for (size_t y = 0; y < H; ++y) {
              const T* __restrict__ irow = in_plane + y * W;
              const T* __restrict__ orow = g_plane + (2 * y + dy) * Wo + dx;
              T* __restrict__ acc = lane.data();
              for (size_t x = 0; x < W; ++x) acc[x] += irow[x] * orow[2 * x];
            }
          }
          T total = 0;
          for (size_t x = 0; x < W; ++x) total += lane[x];
          (*grad_weight)[(c * K + k) * 4 + dy * 2 + dx] = total;
        }
      }
    });
  }
}

// --- channel concatenation ---------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.empty() && b.rank() == 0) return a;  // concat with nothing
  check(a.rank() == 4 && b.rank() == 4,
        "concat_channels: inputs must be N,C,H,W");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
        "concat_channels: spatial/batch mismatch " + a.shape_string() +
            " vs " + b.shape_string());
  const size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2),
               W = a.dim(3);
  Tensor<T> out({N, Ca + Cb, H, W});
  const size_t plane = H * W;
  for (size_t n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * Ca * plane, Ca * plane,
                out.data() + n * (Ca + Cb) * plane);
    std::copy_n(b.data() + n * Cb * plane, Cb * plane,
                out.data() + (n * (Ca + Cb) + Ca) * plane);
  }
  return out;
}

// Adjoint of concat_channels: splits back into the two channel blocks.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& y, size_t ca) {
  check(y.rank() == 4 && y.dim(1) >= ca,
        "split_channels: cannot take " + std::to_string(ca) +
            " channels from " + y.shape_string());
  const size_t N = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
  const size_t cb = C - ca;
  Tensor<T> a({N, ca, H, W});
  Tensor<T> b({N, cb, H, W});
  const size_t plane = H * W;
  for (size_t n = 0; n < N; ++n) {
    std::copy_n(y.data() + n * C * plane, ca * plane, a.data() + n * ca * plane);
    std::copy_n(y.data() + (n * C + ca) * plane, cb * plane,
                b.data() + n * cb * plane);
  }
  return {std::move(a), std::move(b)};
}

// --- per-pixel softmax over channels -----------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  check(logits.rank() == 4, "softmax_channels: input must be N,K,H,W, got " +
                                logits.shape_string());
  const size_t N = logits.dim(0), K = logits.dim(1), H = logits.dim(2),
               W = logits.dim(3);
  Tensor<T> out(logits.shape());
  const size_t plane = H * W;
  parallel_for(N, [&](size_t n) {
    const T* in = logits.data() + n * K * plane;
    T* o = out.data() + n * K * plane;
    for (size_t i = 0; i < plane; ++i) {
      T mx = in[i];
      for (size_t k = 1; k < K; ++k) mx = std::max(mx, in[k * plane + i]);
      T sum = 0;
      for (size_t k = 0; k < K; ++k) {
        T e = std::exp(in[k * plane + i] - mx);
        o[k * plane + i] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (size_t k = 0; k < K; ++k) o[k * plane + i] *= inv;
    }
  });
  return out;
}

// Adjoint from saved probabilities: g_z[k] = p[k] * (g_p[k] - sum_j g_p[j] p[j]).
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs,
                                    const Tensor<T>& grad_probs) {
  check(probs.same_shape(grad_probs),
        "softmax_channels_backward: grad shape " + grad_probs.shape_string() +
            " does not match probs " + probs.shape_string());
  const size_t N = probs.dim(0), K = probs.dim(1), H = probs.dim(2),
               W = probs.dim(3);
  Tensor<T> out(probs.shape());
  const size_t plane = H * W;
  parallel_for(N, [&](size_t n) {
    const T* p = probs.data() + n * K * plane;
    const T* g = grad_probs.data() + n * K * plane;
    T* o = out.data() + n * K * plane;
    for (size_t i = 0; i < plane; ++i) {
      T dot = 0;
      for (size_t k = 0; k < K; ++k) dot += g[k * plane + i] * p[k * plane + i];
      for (size_t k = 0; k < K; ++k)
        o[k * plane + i] = p[k * plane + i] * (g[k * plane + i] - dot);
    }
  });
  return out;
}

}  // namespace ntseg
