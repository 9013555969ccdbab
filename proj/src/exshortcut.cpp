#include "exvt/exshortcut.hpp"

namespace exvt {

int expand_width(std::span<const Rational> rho, std::span<const int> channels) {
  if (rho.size() != channels.size()) {
    throw ConfigError("expand_width: " + std::to_string(rho.size()) + " ratios for " +
                      std::to_string(channels.size()) + " blocks");
  }
  std::int64_t total = 0;
  for (std::size_t k = 0; k < rho.size(); ++k) {
    if (rho[k].is_negative()) {
      throw ConfigError("expand_width: rho" + std::to_string(k + 1) + " is negative");
    }
    auto term = rho[k].times(channels[k]);
    if (!term) {
      throw ConfigError("expand_width: rho" + std::to_string(k + 1) + " = " +
                        rho[k].to_string() + " times " + std::to_string(channels[k]) +
                        " channels is not an integer");
    }
    total += *term;
  }
  return static_cast<int>(total);
}

int ShortcutSpec::out_channels() const {
  auto w = rho.times(in_channels);
  if (!w || *w <= 0) {
    throw ConfigError("shortcut for block " + std::to_string(block_index) + ": rho " +
                      rho.to_string() + " times " + std::to_string(in_channels) +
                      " is not a positive integer");
  }
  return static_cast<int>(*w);
}

std::vector<ShortcutSpec> shortcut_specs(const VariantConfig& config) {
  std::vector<ShortcutSpec> out;
  for (std::size_t k = 0; k < kBlockCount; ++k) {
    if (config.rho[k].is_zero()) continue;
    out.push_back({static_cast<int>(k + 1), config.rho[k], config.block_channels[k]});
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
ExShortcut<T>::ExShortcut(const ShortcutSpec& spec, Rng& rng, Activation act)
    : spec_(spec),
      conv_(static_cast<std::size_t>(spec.in_channels),
            static_cast<std::size_t>(spec.out_channels()), 1, ConvGeometry{}, true,
            LayerKind::shortcut_conv, rng),
      act_(act) {}

template <class T>
TensorT<T> ExShortcut<T>::forward(const TensorT<T>& feature) const {
  if (feature.rank() != 4 || feature.dim(1) != static_cast<std::size_t>(spec_.in_channels)) {
    throw ShapeError("shortcut " + std::to_string(spec_.block_index) + ": expected " +
                     std::to_string(spec_.in_channels) + " channels, got " +
                     to_string(feature.shape()));
  }
  return global_avg_pool(activation(conv_.forward(feature), act_));
}

template <class T>
void ExShortcut<T>::visit(const std::string& prefix, const TensorVisitor<T>& fn) const {
  conv_.visit(join_path(prefix, "conv"), fn);
}

template <class T>
Shape ExShortcut<T>::trace(const Shape& in, const std::string& prefix, Trace& rows) const {
  Shape s = conv_.trace(in, join_path(prefix, "conv"), rows);
  Shape pooled{s[0], s[1]};
  rows.push_back({join_path(prefix, "gap"), "global_avg_pool", pooled, 0});
  return pooled;
}

template <class T>
TensorT<T> assemble_classifier_input(const BlockOutputs<T>& outputs,
                                     std::span<const ExShortcut<T>> shortcuts) {
  if (shortcuts.empty()) {
    throw ConfigError("assemble_classifier_input: no active shortcut");
  }
  std::vector<TensorT<T>> parts;
  int previous = 0;
  for (const auto& sc : shortcuts) {
    const int k = sc.spec().block_index;
    if (k <= previous || k < 1 || k > static_cast<int>(kBlockCount)) {
      throw ConfigError("assemble_classifier_input: shortcuts must have ascending block "
                        "indices in 1..5");
    }
    previous = k;
    parts.push_back(sc.forward(outputs.features[static_cast<std::size_t>(k - 1)]));
  }
  return concat_channels<T>(parts);
}

template <class T>
TensorT<T> classify(const TensorT<T>& classifier_input, const ClassifierSpec& spec,
                    const Linear<T>& fc) {
  if (classifier_input.rank() != 2 ||
      classifier_input.dim(1) != static_cast<std::size_t>(spec.input_width)) {
    throw ShapeError("classify: expected [B," + std::to_string(spec.input_width) +
                     "] input, got " + to_string(classifier_input.shape()));
  }
  if (fc.weight().dim(0) != static_cast<std::size_t>(spec.class_count) ||
      fc.weight().dim(1) != static_cast<std::size_t>(spec.input_width)) {
    throw ShapeError("classify: classifier weight " + to_string(fc.weight().shape()) +
                     " does not match spec");
  }
  return fc.forward(classifier_input);
}

// ---------------------------------------------------------------------------

namespace {

void require_valid(const VariantConfig& config, bool allow_early) {
  auto violations = validate(config, allow_early);
  if (violations.empty()) return;
  std::string msg = "invalid configuration for '" + config.name + "':";
  for (const auto& v : violations) msg += "\n  - " + v;
  throw ConfigError(msg);
}

}  // namespace

template <class T>
ExMobileViT<T>::ExMobileViT(const VariantConfig& config, std::uint64_t seed,
                            bool allow_early_shortcuts)
    : config_(config), seed_(seed), allow_early_(allow_early_shortcuts) {
  require_valid(config, allow_early_shortcuts);
  Rng rng(seed);
  backbone_ = Backbone<T>(backbone_spec(config), rng);
  int width = 0;
  for (const auto& spec : shortcut_specs(config)) {
    shortcuts_.emplace_back(spec, rng);
    width += spec.out_channels();
  }
  const int expected = expand_width(config.rho, config.block_channels);
  if (width != expected) {
    throw ConfigError("classifier width " + std::to_string(width) +
                      " disagrees with expand_width " + std::to_string(expected));
  }
  classifier_spec_ = {width, config.class_count};
  classifier_ = Linear<T>(static_cast<std::size_t>(width),
                          static_cast<std::size_t>(config.class_count), LayerKind::classifier,
                          rng);
}

template <class T>
BlockOutputs<T> ExMobileViT<T>::forward_collect(const TensorT<T>& input, Mode mode) const {
  return backbone_.forward_collect(input, mode);
}

template <class T>
TensorT<T> ExMobileViT<T>::classifier_input(const BlockOutputs<T>& outputs) const {
  return assemble_classifier_input<T>(outputs, shortcuts_);
}

template <class T>
TensorT<T> ExMobileViT<T>::classify(const TensorT<T>& x) const {
  return exvt::classify(x, classifier_spec_, classifier_);
}

template <class T>
TensorT<T> ExMobileViT<T>::forward(const TensorT<T>& input, Mode mode) const {
  return classify(classifier_input(forward_collect(input, mode)));
}

template <class T>
void ExMobileViT<T>::visit(const TensorVisitor<T>& fn) const {
  backbone_.visit("backbone", fn);
  for (const auto& sc : shortcuts_) {
    sc.visit("shortcut" + std::to_string(sc.spec().block_index), fn);
  }
  classifier_.visit("classifier", fn);
}

template <class T>
Trace ExMobileViT<T>::trace(std::size_t input_size) const {
  Trace rows;
  auto blocks = backbone_.trace(Shape{1, 3, input_size, input_size}, "backbone", rows);
  std::size_t width = 0;
  for (const auto& sc : shortcuts_) {
    const auto k = static_cast<std::size_t>(sc.spec().block_index);
    width += sc.trace(blocks[k - 1], "shortcut" + std::to_string(k), rows)[1];
  }
  rows.push_back({"concat", "concat", Shape{1, width}, 0});
  classifier_.trace(Shape{1, width}, "classifier", rows);
  return rows;
}

// ---------------------------------------------------------------------------

template <class T>
MobileVitS<T>::MobileVitS(const VariantConfig& config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  backbone_ = Backbone<T>(backbone_spec(config), rng);
  const auto c5 = static_cast<std::size_t>(config.block_channels[kBlockCount - 1]);
  head_ = Conv2d<T>(c5, 4 * c5, 1, ConvGeometry{}, true, LayerKind::pointwise_conv, rng);
  classifier_ = Linear<T>(4 * c5, static_cast<std::size_t>(config.class_count),
                          LayerKind::classifier, rng);
}

template <class T>
TensorT<T> MobileVitS<T>::forward(const TensorT<T>& input, Mode mode) const {
  auto blocks = backbone_.forward_collect(input, mode);
  auto pooled = global_avg_pool(silu(head_.forward(blocks.features[kBlockCount - 1])));
  return classifier_.forward(pooled);
}

template <class T>
void MobileVitS<T>::visit(const TensorVisitor<T>& fn) const {
  backbone_.visit("backbone", fn);
  head_.visit("head", fn);
  classifier_.visit("classifier", fn);
}

template <class T>
Trace MobileVitS<T>::trace(std::size_t input_size) const {
  Trace rows;
  auto blocks = backbone_.trace(Shape{1, 3, input_size, input_size}, "backbone", rows);
  Shape s = head_.trace(blocks[kBlockCount - 1], "head", rows);
  rows.push_back({"head.gap", "global_avg_pool", Shape{1, s[1]}, 0});
  classifier_.trace(Shape{1, s[1]}, "classifier", rows);
  return rows;
}

#define EXVT_INSTANTIATE_EXSHORTCUT(T)                                                  \
  template class ExShortcut<T>;                                                         \
  template TensorT<T> assemble_classifier_input<T>(const BlockOutputs<T>&,              \
                                                   std::span<const ExShortcut<T>>);     \
  template TensorT<T> classify<T>(const TensorT<T>&, const ClassifierSpec&,             \
                                  const Linear<T>&);                                    \
  template class ExMobileViT<T>;                                                        \
  template class MobileVitS<T>;

EXVT_INSTANTIATE_EXSHORTCUT(float)
EXVT_INSTANTIATE_EXSHORTCUT(double)

}  // namespace exvt
