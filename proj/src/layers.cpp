#include "exvt/layers.hpp"

#include <cmath>

namespace exvt {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_conv: return "depthwise_conv";
    case LayerKind::pointwise_conv: return "pointwise_conv";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::layer_norm: return "layer_norm";
    case LayerKind::linear: return "linear";
    case LayerKind::shortcut_conv: return "shortcut_conv";
    case LayerKind::classifier: return "classifier";
  }
  return "unknown";
}

std::string join_path(std::string_view prefix, std::string_view leaf) {
  if (prefix.empty()) return std::string(leaf);
  std::string out(prefix);
  out += '.';
  out += leaf;
  return out;
}

template <class T>
void kaiming_normal_fan_out(TensorT<T>& weight, Rng& rng) {
  // fan_out = out_channels * receptive field
  std::size_t fan_out = weight.dim(0);
  for (std::size_t a = 2; a < weight.rank(); ++a) fan_out *= weight.dim(a);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_out)));
  for (auto& v : weight.data()) v = static_cast<T>(dist(rng));
}

template <class T>
void trunc_normal(TensorT<T>& weight, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : weight.data()) {
    double x;
    do {
      x = dist(rng);
    } while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
}

namespace {

template <class T>
TensorT<T> param(Shape shape, T fill = T{0}) {
  TensorT<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

template <class T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, ConvGeometry geometry,
                  bool with_bias, LayerKind kind, Rng& rng)
    : geometry_(geometry), kind_(kind) {
  if (in % geometry.groups != 0 || out % geometry.groups != 0) {
    throw ShapeError("Conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                     " not divisible by groups " + std::to_string(geometry.groups));
  }
  weight_ = param<T>(Shape{out, in / geometry.groups, kernel, kernel});
  kaiming_normal_fan_out(weight_, rng);
  if (with_bias) bias_ = param<T>(Shape{out});
}

template <class T>
TensorT<T> Conv2d<T>::forward(const TensorT<T>& x) const {
  return conv2d(x, weight_, bias_, geometry_);
}

template <class T>
void Conv2d<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  fn({join_path(prefix, "weight"), prefix, kind_, ParamRole::weight}, weight_);
  if (bias_) fn({join_path(prefix, "bias"), prefix, kind_, ParamRole::bias}, *bias_);
}

template <class T>
Shape Conv2d<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  const std::size_t kh = weight_.dim(2), kw = weight_.dim(3);
  const std::size_t p = geometry_.padding, s = geometry_.stride;
  if (in.size() != 4 || in[1] != in_channels()) {
    throw ShapeError(prefix + ": expected [B," + std::to_string(in_channels()) +
                     ",H,W] input, got " + to_string(in));
  }
  if (kh > in[2] + 2 * p || kw > in[3] + 2 * p) {
    throw ShapeError(prefix + ": kernel exceeds padded input " + to_string(in));
  }
  Shape out{in[0], out_channels(), (in[2] + 2 * p - kh) / s + 1, (in[3] + 2 * p - kw) / s + 1};
  const std::uint64_t macs = numel(out) * kh * kw * weight_.dim(1);
  rows.push_back({prefix, std::string(layer_kind_name(kind_)), out, macs});
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma_(param<T>(Shape{channels}, T{1})),
      beta_(param<T>(Shape{channels}, T{0})),
      running_mean_(Shape{channels}, T{0}),
      running_var_(Shape{channels}, T{1}) {}

template <class T>
TensorT<T> BatchNorm2d<T>::forward(const TensorT<T>& x, Mode mode) const {
  return batch_norm(x, gamma_, beta_, running_mean_, running_var_, mode == Mode::train);
}

template <class T>
void BatchNorm2d<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  fn({join_path(prefix, "gamma"), prefix, LayerKind::batch_norm, ParamRole::norm_scale}, gamma_);
  fn({join_path(prefix, "beta"), prefix, LayerKind::batch_norm, ParamRole::norm_shift}, beta_);
  fn({join_path(prefix, "running_mean"), prefix, LayerKind::batch_norm, ParamRole::buffer},
     running_mean_);
  fn({join_path(prefix, "running_var"), prefix, LayerKind::batch_norm, ParamRole::buffer},
     running_var_);
}

// ---------------------------------------------------------------------------

template <class T>
ConvBnAct<T>::ConvBnAct(std::size_t in, std::size_t out, std::size_t kernel,
                        ConvGeometry geometry, bool norm, Activation act, LayerKind kind,
                        Rng& rng)
    : conv_(in, out, kernel, geometry, /*with_bias=*/!norm, kind, rng), act_(act) {
  if (norm) norm_.emplace(out);
}

template <class T>
TensorT<T> ConvBnAct<T>::forward(const TensorT<T>& x, Mode mode) const {
  TensorT<T> y = conv_.forward(x);
  if (norm_) y = norm_->forward(y, mode);
  return exvt::activation(y, act_);
}

template <class T>
void ConvBnAct<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  conv_.visit(join_path(prefix, "conv"), fn);
  if (norm_) norm_->visit(join_path(prefix, "bn"), fn);
}

template <class T>
Shape ConvBnAct<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  return conv_.trace(in, join_path(prefix, "conv"), rows);
}

// ---------------------------------------------------------------------------

template <class T>
Linear<T>::Linear(std::size_t in, std::size_t out, LayerKind kind, Rng& rng)
    : weight_(param<T>(Shape{out, in})), bias_(param<T>(Shape{out})), kind_(kind) {
  trunc_normal(weight_, 0.02, rng);
}

template <class T>
TensorT<T> Linear<T>::forward(const TensorT<T>& x) const {
  return linear(x, weight_, std::optional<TensorT<T>>(bias_));
}

template <class T>
void Linear<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  fn({join_path(prefix, "weight"), prefix, kind_, ParamRole::weight}, weight_);
  fn({join_path(prefix, "bias"), prefix, kind_, ParamRole::bias}, bias_);
}

template <class T>
Shape Linear<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  if (in.empty() || in.back() != weight_.dim(1)) {
    throw ShapeError(prefix + ": expected last extent " + std::to_string(weight_.dim(1)) +
                     ", got " + to_string(in));
  }
  Shape out = in;
  out.back() = weight_.dim(0);
  rows.push_back({prefix, std::string(layer_kind_name(kind_)), out, numel(out) * weight_.dim(1)});
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : gamma_(param<T>(Shape{dim}, T{1})), beta_(param<T>(Shape{dim}, T{0})) {}

template <class T>
TensorT<T> LayerNorm<T>::forward(const TensorT<T>& x) const {
  return layer_norm(x, gamma_, beta_);
}

template <class T>
void LayerNorm<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  fn({join_path(prefix, "gamma"), prefix, LayerKind::layer_norm, ParamRole::norm_scale}, gamma_);
  fn({join_path(prefix, "beta"), prefix, LayerKind::layer_norm, ParamRole::norm_shift}, beta_);
}

// ---------------------------------------------------------------------------

template <class T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng)
    : q_(dim, dim, LayerKind::linear, rng),
      k_(dim, dim, LayerKind::linear, rng),
      v_(dim, dim, LayerKind::linear, rng),
      o_(dim, dim, LayerKind::linear, rng),
      heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("attention dim " + std::to_string(dim) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
}

template <class T>
AttentionWeights<T> MultiHeadAttention<T>::weights() const {
  return {q_.weight(), q_.bias(), k_.weight(), k_.bias(),
          v_.weight(), v_.bias(), o_.weight(), o_.bias()};
}

template <class T>
TensorT<T> MultiHeadAttention<T>::forward(const TensorT<T>& x) const {
  return multi_head_attention(x, weights(), heads_);
}

template <class T>
void MultiHeadAttention<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  q_.visit(join_path(prefix, "q"), fn);
  k_.visit(join_path(prefix, "k"), fn);
  v_.visit(join_path(prefix, "v"), fn);
  o_.visit(join_path(prefix, "o"), fn);
}

template <class T>
Shape MultiHeadAttention<T>::trace(const Shape& in, const std::string& prefix,
                                   Trace& rows) const {
  q_.trace(in, join_path(prefix, "q"), rows);
  k_.trace(in, join_path(prefix, "k"), rows);
  Shape ctx = v_.trace(in, join_path(prefix, "v"), rows);
  // scores and weighted sum: 2 * B * T * T * D
  rows.push_back({join_path(prefix, "sdpa"), "attention", ctx, 2 * in[0] * in[1] * in[1] * in[2]});
  return o_.trace(ctx, join_path(prefix, "o"), rows);
}

// ---------------------------------------------------------------------------

template <class T>
TransformerLayer<T>::TransformerLayer(std::size_t dim, std::size_t heads, std::size_t ffn_dim,
                                      Rng& rng)
    : norm1_(dim),
      attn_(dim, heads, rng),
      norm2_(dim),
      ffn1_(dim, ffn_dim, LayerKind::linear, rng),
      ffn2_(ffn_dim, dim, LayerKind::linear, rng) {}

template <class T>
TensorT<T> TransformerLayer<T>::forward(const TensorT<T>& x) const {
  TensorT<T> y = add(x, attn_.forward(norm1_.forward(x)));
  TensorT<T> h = silu(ffn1_.forward(norm2_.forward(y)));
  return add(y, ffn2_.forward(h));
}

template <class T>
void TransformerLayer<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  norm1_.visit(join_path(prefix, "norm1"), fn);
  attn_.visit(join_path(prefix, "attn"), fn);
  norm2_.visit(join_path(prefix, "norm2"), fn);
  ffn1_.visit(join_path(prefix, "ffn1"), fn);
  ffn2_.visit(join_path(prefix, "ffn2"), fn);
}

template <class T>
Shape TransformerLayer<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  Shape y = attn_.trace(in, join_path(prefix, "attn"), rows);
  Shape h = ffn1_.trace(y, join_path(prefix, "ffn1"), rows);
  return ffn2_.trace(h, join_path(prefix, "ffn2"), rows);
}

#define EXVT_INSTANTIATE_LAYERS(T)                                    \
  template void kaiming_normal_fan_out<T>(TensorT<T>&, Rng&);         \
  template void trunc_normal<T>(TensorT<T>&, double, Rng&);           \
  template class Conv2d<T>;                                           \
  template class BatchNorm2d<T>;                                      \
  template class ConvBnAct<T>;                                        \
  template class Linear<T>;                                           \
  template class LayerNorm<T>;                                        \
  template class MultiHeadAttention<T>;                               \
  template class TransformerLayer<T>;

EXVT_INSTANTIATE_LAYERS(float)
EXVT_INSTANTIATE_LAYERS(double)

}  // namespace exvt
