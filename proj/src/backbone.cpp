#include "exvt/backbone.hpp"

namespace exvt {

template <class T>
Mv2Block<T>::Mv2Block(const Mv2Spec& spec, Rng& rng) : spec_(spec) {
  const std::size_t hidden = spec.in_channels * spec.expansion_factor;
  if (spec.expansion_factor != 1) {
    expand_.emplace(spec.in_channels, hidden, 1, ConvGeometry{}, true, Activation::silu,
                    LayerKind::pointwise_conv, rng);
  }
  depthwise_ = ConvBnAct<T>(hidden, hidden, 3, ConvGeometry{spec.stride, 1, hidden}, true,
                            Activation::silu, LayerKind::depthwise_conv, rng);
  project_ = ConvBnAct<T>(hidden, spec.out_channels, 1, ConvGeometry{}, true,
                          Activation::identity, LayerKind::pointwise_conv, rng);
}

template <class T>
TensorT<T> Mv2Block<T>::forward(const TensorT<T>& x, Mode mode) const {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
    throw ShapeError("mv2_block: expected " + std::to_string(spec_.in_channels) +
                     " input channels, got " + to_string(x.shape()));
  }
  TensorT<T> y = expand_ ? expand_->forward(x, mode) : x;
  y = depthwise_.forward(y, mode);
  y = project_.forward(y, mode);
  return spec_.residual() ? add(x, y) : y;
}

template <class T>
void Mv2Block<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  if (expand_) expand_->visit(join_path(prefix, "expand"), fn);
  depthwise_.visit(join_path(prefix, "depthwise"), fn);
  project_.visit(join_path(prefix, "project"), fn);
}

template <class T>
Shape Mv2Block<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  Shape s = expand_ ? expand_->trace(in, join_path(prefix, "expand"), rows) : in;
  s = depthwise_.trace(s, join_path(prefix, "depthwise"), rows);
  return project_.trace(s, join_path(prefix, "project"), rows);
}

// ---------------------------------------------------------------------------

template <class T>
MobileVitBlock<T>::MobileVitBlock(const MobileVitBlockSpec& spec, Rng& rng) : spec_(spec) {
  const std::size_t c = spec.channels, d = spec.transformer_dim;
  local_conv_ = ConvBnAct<T>(c, c, 3, ConvGeometry{1, 1, 1}, true, Activation::silu,
                             LayerKind::conv, rng);
  local_proj_ = Conv2d<T>(c, d, 1, ConvGeometry{}, false, LayerKind::pointwise_conv, rng);
  for (std::size_t l = 0; l < spec.transformer_depth; ++l) {
    layers_.emplace_back(d, spec.heads, spec.ffn_dim, rng);
  }
  if (spec.transformer_depth > 0) norm_.emplace(d);
  proj_ = ConvBnAct<T>(d, c, 1, ConvGeometry{}, true, Activation::silu,
                       LayerKind::pointwise_conv, rng);
  fusion_ = ConvBnAct<T>(2 * c, c, 3, ConvGeometry{1, 1, 1}, true, Activation::silu,
                         LayerKind::conv, rng);
}

template <class T>
TensorT<T> MobileVitBlock<T>::forward(const TensorT<T>& x, Mode mode) const {
  if (x.rank() != 4 || x.dim(1) != spec_.channels) {
    throw ShapeError("mobilevit_block: expected " + std::to_string(spec_.channels) +
                     " input channels, got " + to_string(x.shape()));
  }
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h % spec_.patch_h != 0 || w % spec_.patch_w != 0) {
    throw ShapeError("mobilevit_block: spatial " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(spec_.patch_h) + "x" +
                     std::to_string(spec_.patch_w));
  }
  TensorT<T> y = local_proj_.forward(local_conv_.forward(x, mode));
  TensorT<T> seq = unfold_patches(y, spec_.patch_h, spec_.patch_w);
  for (const auto& layer : layers_) seq = layer.forward(seq);
  if (norm_) seq = norm_->forward(seq);
  y = fold_patches(seq, h, w, spec_.patch_h, spec_.patch_w);
  y = proj_.forward(y, mode);
  const std::array<TensorT<T>, 2> parts{x, y};
  return fusion_.forward(concat_channels<T>(parts), mode);
}

template <class T>
void MobileVitBlock<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  local_conv_.visit(join_path(prefix, "local_conv"), fn);
  local_proj_.visit(join_path(prefix, "local_proj"), fn);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].visit(join_path(prefix, "transformer." + std::to_string(l)), fn);
  }
  if (norm_) norm_->visit(join_path(prefix, "norm"), fn);
  proj_.visit(join_path(prefix, "proj"), fn);
  fusion_.visit(join_path(prefix, "fusion"), fn);
}

template <class T>
Shape MobileVitBlock<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  Shape s = local_conv_.trace(in, join_path(prefix, "local_conv"), rows);
  s = local_proj_.trace(s, join_path(prefix, "local_proj"), rows);
  const std::size_t ph = spec_.patch_h, pw = spec_.patch_w;
  if (s[2] % ph != 0 || s[3] % pw != 0) {
    throw ShapeError(prefix + ": spatial " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
  }
  Shape seq{s[0] * ph * pw, (s[2] / ph) * (s[3] / pw), s[1]};
  rows.push_back({join_path(prefix, "unfold"), "unfold", seq, 0});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    seq = layers_[l].trace(seq, join_path(prefix, "transformer." + std::to_string(l)), rows);
  }
  rows.push_back({join_path(prefix, "fold"), "fold", s, 0});
  Shape p = proj_.trace(s, join_path(prefix, "proj"), rows);
  Shape cat{p[0], p[1] + in[1], p[2], p[3]};
  rows.push_back({join_path(prefix, "concat"), "concat", cat, 0});
  return fusion_.trace(cat, join_path(prefix, "fusion"), rows);
}

// ---------------------------------------------------------------------------

template <class T>
Backbone<T>::Backbone(const BackboneSpec& spec, Rng& rng) : spec_(spec) {
  const auto ch = [&](std::size_t k) { return static_cast<std::size_t>(spec.block_channels[k]); };
  const auto expansion = static_cast<std::size_t>(spec.expansion);
  const auto stem = static_cast<std::size_t>(spec.stem_channels);

  blocks_[0].emplace_back(ConvBnAct<T>(3, stem, 3, ConvGeometry{2, 1, 1}, true, Activation::silu,
                                       LayerKind::conv, rng));
  blocks_[0].emplace_back(Mv2Block<T>(Mv2Spec{stem, ch(0), 1, expansion}, rng));

  blocks_[1].emplace_back(Mv2Block<T>(Mv2Spec{ch(0), ch(1), 2, expansion}, rng));
  blocks_[1].emplace_back(Mv2Block<T>(Mv2Spec{ch(1), ch(1), 1, expansion}, rng));
  blocks_[1].emplace_back(Mv2Block<T>(Mv2Spec{ch(1), ch(1), 1, expansion}, rng));

  for (std::size_t k = 2; k < kBlockCount; ++k) {
    blocks_[k].emplace_back(Mv2Block<T>(Mv2Spec{ch(k - 1), ch(k), 2, expansion}, rng));
    const auto d = static_cast<std::size_t>(spec.transformer_dim[k - 2]);
    MobileVitBlockSpec mv;
    mv.channels = ch(k);
    mv.transformer_dim = d;
    mv.transformer_depth = static_cast<std::size_t>(spec.transformer_depth[k - 2]);
    mv.heads = static_cast<std::size_t>(spec.heads);
    mv.ffn_dim = d * static_cast<std::size_t>(spec.ffn_multiplier);
    mv.patch_h = mv.patch_w = static_cast<std::size_t>(spec.patch);
    blocks_[k].emplace_back(MobileVitBlock<T>(mv, rng));
  }
}

template <class T>
BlockOutputs<T> Backbone<T>::forward_collect(const TensorT<T>& input, Mode mode) const {
  if (input.rank() != 4 || input.dim(1) != 3) {
    throw ShapeError("backbone: expected [B,3,H,W] input, got " + to_string(input.shape()));
  }
  if (input.dim(2) % 32 != 0 || input.dim(3) % 32 != 0 || input.dim(2) == 0 ||
      input.dim(3) == 0) {
    throw ShapeError("backbone: input spatial size " + std::to_string(input.dim(2)) + "x" +
                     std::to_string(input.dim(3)) + " must be divisible by 32");
  }
  BlockOutputs<T> out;
  TensorT<T> x = input;
  for (std::size_t k = 0; k < kBlockCount; ++k) {
    for (const auto& unit : blocks_[k]) {
      x = std::visit([&](const auto& u) { return u.forward(x, mode); }, unit);
    }
    out.features[k] = x;
  }
  return out;
}

template <class T>
void Backbone<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  for (std::size_t k = 0; k < kBlockCount; ++k) {
    for (std::size_t i = 0; i < blocks_[k].size(); ++i) {
      const std::string path =
          join_path(prefix, "block" + std::to_string(k + 1) + "." + std::to_string(i));
      std::visit([&](const auto& u) { u.visit(path, fn); }, blocks_[k][i]);
    }
  }
}

template <class T>
std::array<Shape, kBlockCount> Backbone<T>::trace(const Shape& in, const std::string& prefix,
                                                  Trace& rows) const {
  if (in.size() != 4 || in[1] != 3 || in[2] % 32 != 0 || in[3] % 32 != 0) {
    throw ShapeError("backbone: input " + to_string(in) +
                     " must be [B,3,H,W] with H and W divisible by 32");
  }
  std::array<Shape, kBlockCount> outs;
  Shape s = in;
  for (std::size_t k = 0; k < kBlockCount; ++k) {
    const std::string block = join_path(prefix, "block" + std::to_string(k + 1));
    for (std::size_t i = 0; i < blocks_[k].size(); ++i) {
      const std::string path = block + "." + std::to_string(i);
      s = std::visit([&](const auto& u) { return u.trace(s, path, rows); }, blocks_[k][i]);
    }
    rows.push_back({block, "block", s, 0});
    outs[k] = s;
  }
  return outs;
}

template class Mv2Block<float>;
template class Mv2Block<double>;
template class MobileVitBlock<float>;
template class MobileVitBlock<double>;
template class Backbone<float>;
template class Backbone<double>;

}  // namespace exvt
