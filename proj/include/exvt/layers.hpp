#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "exvt/ops.hpp"
#include "exvt/tensor.hpp"

namespace exvt {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

enum class LayerKind {
  conv,
  depthwise_conv,
  pointwise_conv,
  batch_norm,
  layer_norm,
  linear,
  shortcut_conv,
  classifier,
};

std::string_view layer_kind_name(LayerKind kind);

enum class ParamRole { weight, bias, norm_scale, norm_shift, buffer };

struct ParamInfo {
  std::string name;   // fully qualified, e.g. "backbone.block3.1.fusion.conv.weight"
  std::string layer;  // owning layer path
  LayerKind kind;
  ParamRole role;
};

// Trainable parameters and buffers are both visited; buffers carry
// ParamRole::buffer.
template <class T>
using TensorVisitor = std::function<void(const ParamInfo&, const TensorT<T>&)>;

// One row of a symbolic shape trace.
struct TraceRow {
  std::string name;
  std::string kind;
  Shape out_shape;
  std::uint64_t macs = 0;
};
using Trace = std::vector<TraceRow>;

std::string join_path(std::string_view prefix, std::string_view leaf);

template <class T>
void kaiming_normal_fan_out(TensorT<T>& weight, Rng& rng);
template <class T>
void trunc_normal(TensorT<T>& weight, double stddev, Rng& rng);

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, ConvGeometry geometry,
         bool with_bias, LayerKind kind, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const TensorT<T>& weight() const { return weight_; }
  const std::optional<TensorT<T>>& bias() const { return bias_; }
  const ConvGeometry& geometry() const { return geometry_; }
  LayerKind kind() const { return kind_; }
  std::size_t in_channels() const { return weight_.dim(1) * geometry_.groups; }
  std::size_t out_channels() const { return weight_.dim(0); }

 private:
  TensorT<T> weight_;
  std::optional<TensorT<T>> bias_;
  ConvGeometry geometry_;
  LayerKind kind_ = LayerKind::conv;
};

template <class T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;

  const TensorT<T>& gamma() const { return gamma_; }
  const TensorT<T>& beta() const { return beta_; }
  const TensorT<T>& running_mean() const { return running_mean_; }
  const TensorT<T>& running_var() const { return running_var_; }

 private:
  TensorT<T> gamma_, beta_;
  // Handles share storage, so forward() can update running stats while const.
  mutable TensorT<T> running_mean_, running_var_;
};

// conv -> optional batch norm -> activation
template <class T>
class ConvBnAct {
 public:
  ConvBnAct() = default;
  ConvBnAct(std::size_t in, std::size_t out, std::size_t kernel, ConvGeometry geometry,
            bool norm, Activation act, LayerKind kind, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const Conv2d<T>& conv() const { return conv_; }
  const std::optional<BatchNorm2d<T>>& norm() const { return norm_; }
  Activation activation() const { return act_; }

 private:
  Conv2d<T> conv_;
  std::optional<BatchNorm2d<T>> norm_;
  Activation act_ = Activation::identity;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, LayerKind kind, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const TensorT<T>& weight() const { return weight_; }
  const TensorT<T>& bias() const { return bias_; }

 private:
  TensorT<T> weight_, bias_;
  LayerKind kind_ = LayerKind::linear;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  TensorT<T> forward(const TensorT<T>& x) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;

  const TensorT<T>& gamma() const { return gamma_; }
  const TensorT<T>& beta() const { return beta_; }

 private:
  TensorT<T> gamma_, beta_;
};

template <class T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  AttentionWeights<T> weights() const;
  std::size_t heads() const { return heads_; }

 private:
  Linear<T> q_, k_, v_, o_;
  std::size_t heads_ = 1;
};

// Pre-norm encoder layer: x + attn(ln(x)), then y + ffn(ln(y)) with a SiLU
// hidden activation.
template <class T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::size_t dim, std::size_t heads, std::size_t ffn_dim, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const LayerNorm<T>& norm1() const { return norm1_; }
  const MultiHeadAttention<T>& attention() const { return attn_; }
  const LayerNorm<T>& norm2() const { return norm2_; }
  const Linear<T>& ffn1() const { return ffn1_; }
  const Linear<T>& ffn2() const { return ffn2_; }

 private:
  LayerNorm<T> norm1_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> norm2_;
  Linear<T> ffn1_, ffn2_;
};

}  // namespace exvt
