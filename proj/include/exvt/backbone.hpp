#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "exvt/config.hpp"
#include "exvt/layers.hpp"

namespace exvt {

// MobileNetV2 inverted residual.
struct Mv2Spec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t expansion_factor = 4;

  bool residual() const { return stride == 1 && in_channels == out_channels; }
};

struct MobileVitBlockSpec {
  std::size_t channels = 0;
  std::size_t transformer_dim = 0;
  std::size_t transformer_depth = 0;
  std::size_t heads = 4;
  std::size_t ffn_dim = 0;
  std::size_t patch_h = 2;
  std::size_t patch_w = 2;
};

template <class T>
class Mv2Block {
 public:
  Mv2Block() = default;
  Mv2Block(const Mv2Spec& spec, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const Mv2Spec& spec() const { return spec_; }
  bool has_residual() const { return spec_.residual(); }
  const std::optional<ConvBnAct<T>>& expand() const { return expand_; }
  const ConvBnAct<T>& depthwise() const { return depthwise_; }
  const ConvBnAct<T>& project() const { return project_; }

 private:
  Mv2Spec spec_;
  std::optional<ConvBnAct<T>> expand_;  // absent when expansion_factor == 1
  ConvBnAct<T> depthwise_;
  ConvBnAct<T> project_;
};

// Local-global-local operator: 3x3 conv and 1x1 projection to the
// transformer width, transformer layers over unfolded patches, fold, 1x1
// projection back, then a 3x3 fusion conv over [input, projection].
template <class T>
class MobileVitBlock {
 public:
  MobileVitBlock() = default;
  MobileVitBlock(const MobileVitBlockSpec& spec, Rng& rng);

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const MobileVitBlockSpec& spec() const { return spec_; }
  const ConvBnAct<T>& local_conv() const { return local_conv_; }
  const Conv2d<T>& local_proj() const { return local_proj_; }
  const std::vector<TransformerLayer<T>>& transformer() const { return layers_; }
  const std::optional<LayerNorm<T>>& final_norm() const { return norm_; }
  const ConvBnAct<T>& proj() const { return proj_; }
  const ConvBnAct<T>& fusion() const { return fusion_; }

 private:
  MobileVitBlockSpec spec_;
  ConvBnAct<T> local_conv_;
  Conv2d<T> local_proj_;
  std::vector<TransformerLayer<T>> layers_;
  std::optional<LayerNorm<T>> norm_;  // present when depth > 0
  ConvBnAct<T> proj_;
  ConvBnAct<T> fusion_;
};

template <class T>
using BackboneUnit = std::variant<ConvBnAct<T>, Mv2Block<T>, MobileVitBlock<T>>;

template <class T>
struct BlockOutputs {
  std::array<TensorT<T>, kBlockCount> features;
};

// Five blocks, each starting with its 2x downsampling module:
//   1: 3x3 conv/2 stem, MV2        2: MV2/2, MV2 x2
//   3..5: MV2/2, MobileViT
template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneSpec& spec, Rng& rng);

  BlockOutputs<T> forward_collect(const TensorT<T>& input, Mode mode) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  // Appends leaf rows plus one "block" row per block output.
  std::array<Shape, kBlockCount> trace(const Shape& in, const std::string& prefix,
                                       Trace& rows) const;

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<BackboneUnit<T>>& block(std::size_t k) const { return blocks_.at(k); }

 private:
  BackboneSpec spec_;
  std::array<std::vector<BackboneUnit<T>>, kBlockCount> blocks_;
};

}  // namespace exvt
