#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "exvt/tensor.hpp"

// Forward primitives with reverse-mode rules. Every op checks its shapes,
// records itself on the thread's current tape when an input needs a
// gradient, and throws NumericError if its output holds NaN or Inf.
namespace exvt {

enum class Activation { identity, relu, silu };

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// input [B,Cin,H,W], weight [Cout,Cin/groups,kh,kw], bias [Cout].
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const std::optional<TensorT<T>>& bias, ConvGeometry geometry);

// input [..., Din], weight [Dout, Din], bias [Dout].
template <class T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight,
                  const std::optional<TensorT<T>>& bias);

// In training mode normalizes with batch statistics and folds them into the
// running buffers with `momentum`; the running variance uses the unbiased
// estimate. In eval mode the running buffers are used as-is.
template <class T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean,
                      TensorT<T>& running_var, bool training, T momentum = T(0.1),
                      T eps = T(1e-5));

template <class T>
TensorT<T> layer_norm(const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps = T(1e-5));

template <class T>
TensorT<T> activation(const TensorT<T>& input, Activation kind);

template <class T>
TensorT<T> silu(const TensorT<T>& input) {
  return activation(input, Activation::silu);
}

template <class T>
TensorT<T> relu(const TensorT<T>& input) {
  return activation(input, Activation::relu);
}

// Softmax over the last axis.
template <class T>
TensorT<T> softmax(const TensorT<T>& input);

// q, k, v: [B,T,D]. Heads split D into contiguous slices of D/heads.
template <class T>
TensorT<T> scaled_dot_product_attention(const TensorT<T>& q, const TensorT<T>& k,
                                        const TensorT<T>& v, std::size_t heads);

template <class T>
struct AttentionWeights {
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Self-attention over input [B,T,D].
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& input,
                                const AttentionWeights<T>& weights,
                                std::size_t heads);

// [B,C,H,W] -> [B*ph*pw, (H/ph)*(W/pw), C]. Row b*ph*pw + (i*pw + j) holds
// the pixel at offset (i, j) of every patch, in raster patch order.
template <class T>
TensorT<T> unfold_patches(const TensorT<T>& input, std::size_t ph, std::size_t pw);

// Inverse of unfold_patches for a target spatial size H x W.
template <class T>
TensorT<T> fold_patches(const TensorT<T>& input, std::size_t height,
                        std::size_t width, std::size_t ph, std::size_t pw);

// [B,C,H,W] -> [B,C]
template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& input);

// Concatenates along axis 1. Parts must agree on every other axis.
template <class T>
TensorT<T> concat_channels(std::span<const TensorT<T>> parts);

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);

template <class T>
TensorT<T> scale(const TensorT<T>& input, T factor);

// Sum of all elements as a rank-0 tensor.
template <class T>
TensorT<T> sum(const TensorT<T>& input);

// Mean over the batch of the cross-entropy against (1 - s) one-hot + s / K.
template <class T>
TensorT<T> label_smoothing_ce(const TensorT<T>& logits, std::span<const int> labels,
                              T smoothing);

}  // namespace exvt
