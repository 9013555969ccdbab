#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "exvt/backbone.hpp"
#include "exvt/config.hpp"
#include "exvt/layers.hpp"
#include "exvt/rational.hpp"

namespace exvt {

// Classifier input width: the sum over blocks of rho_k * C_k. Throws
// ConfigError when lengths differ, a ratio is negative, or a term is not an
// integer.
int expand_width(std::span<const Rational> rho, std::span<const int> channels);

struct ShortcutSpec {
  int block_index = 0;  // 1-based
  Rational rho;
  int in_channels = 0;

  // rho * in_channels; throws ConfigError when fractional.
  int out_channels() const;
};

struct ClassifierSpec {
  int input_width = 0;
  int class_count = 0;
};

// Specs for every block with rho_k > 0, ascending block index.
std::vector<ShortcutSpec> shortcut_specs(const VariantConfig& config);

// Pointwise conv from C_k to rho_k * C_k with bias, activation, then global
// average pooling: [B,C_k,H,W] -> [B, rho_k * C_k].
template <class T>
class ExShortcut {
 public:
  ExShortcut() = default;
  ExShortcut(const ShortcutSpec& spec, Rng& rng, Activation act = Activation::silu);

  TensorT<T> forward(const TensorT<T>& feature) const;
  void visit(const std::string& prefix, const TensorVisitor<T>& fn) const;
  Shape trace(const Shape& in, const std::string& prefix, Trace& rows) const;

  const ShortcutSpec& spec() const { return spec_; }
  const Conv2d<T>& conv() const { return conv_; }

 private:
  ShortcutSpec spec_;
  Conv2d<T> conv_;
  Activation act_ = Activation::silu;
};

template <class T>
TensorT<T> make_shortcut(const TensorT<T>& feature, const ExShortcut<T>& shortcut) {
  return shortcut.forward(feature);
}

// Runs each shortcut on its block's feature map and concatenates the
// results in ascending block order. Throws if the list is empty or unsorted.
template <class T>
TensorT<T> assemble_classifier_input(const BlockOutputs<T>& outputs,
                                     std::span<const ExShortcut<T>> shortcuts);

template <class T>
TensorT<T> classify(const TensorT<T>& classifier_input, const ClassifierSpec& spec,
                    const Linear<T>& fc);

template <class T>
class ExMobileViT {
 public:
  using value_type = T;

  // Validates the config (ConfigError on violations) and initializes every
  // parameter from `seed`: backbone, shortcuts by block, classifier.
  ExMobileViT(const VariantConfig& config, std::uint64_t seed,
              bool allow_early_shortcuts = false);

  const VariantConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  bool allows_early_shortcuts() const { return allow_early_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const std::vector<ExShortcut<T>>& shortcuts() const { return shortcuts_; }
  const Linear<T>& classifier() const { return classifier_; }
  const ClassifierSpec& classifier_spec() const { return classifier_spec_; }
  int classifier_width() const { return classifier_spec_.input_width; }

  BlockOutputs<T> forward_collect(const TensorT<T>& input, Mode mode) const;
  TensorT<T> classifier_input(const BlockOutputs<T>& outputs) const;
  TensorT<T> classify(const TensorT<T>& classifier_input) const;
  TensorT<T> forward(const TensorT<T>& input, Mode mode) const;

  void visit(const TensorVisitor<T>& fn) const;
  Trace trace(std::size_t input_size) const;

 private:
  VariantConfig config_;
  std::uint64_t seed_;
  bool allow_early_;
  Backbone<T> backbone_;
  std::vector<ExShortcut<T>> shortcuts_;
  Linear<T> classifier_;
  ClassifierSpec classifier_spec_;
};

// MobileViT-S assembled directly: backbone, 1x1 expansion conv to
// 4 * C_5 with SiLU, global average pooling, linear classifier.
template <class T>
class MobileVitS {
 public:
  using value_type = T;

  MobileVitS(const VariantConfig& config, std::uint64_t seed);

  const VariantConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const Conv2d<T>& head() const { return head_; }
  const Linear<T>& classifier() const { return classifier_; }
  int classifier_width() const { return static_cast<int>(head_.out_channels()); }
  TensorT<T> forward(const TensorT<T>& input, Mode mode) const;
  void visit(const TensorVisitor<T>& fn) const;
  Trace trace(std::size_t input_size) const;

 private:
  VariantConfig config_;
  Backbone<T> backbone_;
  Conv2d<T> head_;
  Linear<T> classifier_;
};

template <class T>
struct NamedTensor {
  ParamInfo info;
  TensorT<T> tensor;
};

// Depth-first list of every parameter and buffer.
template <class M>
std::vector<NamedTensor<typename M::value_type>> named_tensors(const M& model) {
  using T = typename M::value_type;
  std::vector<NamedTensor<T>> out;
  model.visit([&](const ParamInfo& info, const TensorT<T>& t) { out.push_back({info, t}); });
  return out;
}

// Copies every tensor of `from` into the same-named tensor of `to`,
// converting the scalar type. Throws ShapeError on any name or shape mismatch.
template <class From, class To>
void copy_tensors(const From& from, const To& to) {
  auto src = named_tensors(from);
  auto dst = named_tensors(to);
  if (src.size() != dst.size()) {
    throw ShapeError("copy_tensors: tensor counts differ (" + std::to_string(src.size()) +
                     " vs " + std::to_string(dst.size()) + ")");
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].info.name != dst[i].info.name ||
        src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ShapeError("copy_tensors: " + src[i].info.name + " " +
                       to_string(src[i].tensor.shape()) + " does not match " +
                       dst[i].info.name + " " + to_string(dst[i].tensor.shape()));
    }
    auto out = dst[i].tensor;
    auto in = src[i].tensor.data();
    for (std::size_t j = 0; j < in.size(); ++j) {
      out.data()[j] = static_cast<typename decltype(out)::value_type>(in[j]);
    }
  }
}

// Same architecture and values in another scalar type.
template <class U, class T>
ExMobileViT<U> convert_model(const ExMobileViT<T>& model) {
  ExMobileViT<U> out(model.config(), model.seed(), model.allows_early_shortcuts());
  copy_tensors(model, out);
  return out;
}

}  // namespace exvt
