#include <gtest/gtest.h>

#include <cstring>

#include "exvt/backbone.hpp"
#include "exvt/exshortcut.hpp"
#include "support.hpp"

using namespace exvt;
using exvt::testing::random_tensor;

namespace {

std::size_t trainable_count(const auto& layer) {
  std::size_t n = 0;
  layer.visit("", [&](const ParamInfo& info, const Tensor& t) {
    if (info.role != ParamRole::buffer) n += t.numel();
  });
  return n;
}

void zero_weights(const auto& layer) {
  layer.visit("", [](const ParamInfo& info, const Tensor& t) {
    if (info.role == ParamRole::weight) {
      Tensor h = t;
      std::fill(h.data().begin(), h.data().end(), 0.0f);
    }
  });
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST(Mv2, ZeroBranchIsPureResidual) {
  Rng rng(1);
  Mv2Block<float> block(Mv2Spec{8, 8, 1, 4}, rng);
  ASSERT_TRUE(block.has_residual());
  zero_weights(block);
  Tensor x = random_tensor(Shape{2, 8, 6, 6}, 2);
  for (Mode mode : {Mode::train, Mode::eval}) {
    Tensor y = block.forward(x, mode);
    EXPECT_TRUE(bitwise_equal(x, y));
  }
}

TEST(Mv2, StrideTwoHalvesSpatial) {
  Rng rng(3);
  Mv2Block<float> block(Mv2Spec{16, 24, 2, 4}, rng);
  EXPECT_FALSE(block.has_residual());
  Tensor y = block.forward(random_tensor(Shape{1, 16, 64, 64}, 4), Mode::eval);
  EXPECT_EQ(y.shape(), (Shape{1, 24, 32, 32}));
}

TEST(Mv2, ParameterCountMatchesLayerEnumeration) {
  Rng rng(5);
  Mv2Block<float> block(Mv2Spec{64, 96, 1, 4}, rng);
  const std::size_t hidden = 64 * 4;
  const std::size_t expand = 64 * hidden + 2 * hidden;
  const std::size_t depthwise = hidden * 9 + 2 * hidden;
  const std::size_t project = hidden * 96 + 2 * 96;
  EXPECT_EQ(trainable_count(block), expand + depthwise + project);
}

TEST(Mv2, ResidualEligibilityRule) {
  EXPECT_TRUE((Mv2Spec{8, 8, 1, 4}.residual()));
  EXPECT_FALSE((Mv2Spec{8, 8, 2, 4}.residual()));
  EXPECT_FALSE((Mv2Spec{8, 16, 1, 4}.residual()));
}

TEST(Mv2, ChannelMismatchThrows) {
  Rng rng(6);
  Mv2Block<float> block(Mv2Spec{8, 8, 1, 4}, rng);
  EXPECT_THROW(block.forward(Tensor(Shape{1, 4, 4, 4}), Mode::eval), ShapeError);
}

// ---------------------------------------------------------------------------

namespace {

Tensor conv_bn_act(const ConvBnAct<float>& l, const Tensor& x) {
  const auto& c = l.conv();
  Tensor y = conv2d<float>(x, c.weight(), c.bias(), c.geometry());
  if (l.norm()) {
    const auto& n = *l.norm();
    Tensor rm = n.running_mean().clone(), rv = n.running_var().clone();
    y = batch_norm<float>(y, n.gamma(), n.beta(), rm, rv, false);
  }
  return activation(y, l.activation());
}

Tensor lin(const Linear<float>& l, const Tensor& x) { return linear<float>(x, l.weight(), l.bias()); }

Tensor ln(const LayerNorm<float>& l, const Tensor& x) {
  return layer_norm<float>(x, l.gamma(), l.beta());
}

// Randomizes norms, biases and running statistics so the eval path is not
// close to an identity.
void perturb_non_weights(const auto& layer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  layer.visit("", [&](const ParamInfo& info, const Tensor& t) {
    if (info.role == ParamRole::weight) return;
    const bool positive = info.role == ParamRole::norm_scale || info.name.ends_with("running_var");
    Tensor h = t;
    for (auto& v : h.data()) v = positive ? 1.0f + u(rng) : u(rng);
  });
}

}  // namespace

TEST(MobileVitBlock, MatchesPrimitiveComposition) {
  MobileVitBlockSpec spec;
  spec.channels = 8;
  spec.transformer_dim = 12;
  spec.transformer_depth = 1;
  spec.heads = 4;
  spec.ffn_dim = 24;
  Rng rng(7);
  MobileVitBlock<float> block(spec, rng);
  perturb_non_weights(block, 8);
  const Tensor x = random_tensor(Shape{2, 8, 4, 4}, 9);

  // Straight-line evaluation from the block's own weights.
  Tensor y = conv_bn_act(block.local_conv(), x);
  y = conv2d<float>(y, block.local_proj().weight(), std::nullopt, {});
  Tensor seq = unfold_patches<float>(y, 2, 2);
  ASSERT_EQ(seq.shape(), (Shape{8, 4, 12}));
  const auto& t = block.transformer().at(0);
  Tensor a = multi_head_attention<float>(ln(t.norm1(), seq), t.attention().weights(), 4);
  Tensor r = add(seq, a);
  Tensor f = lin(t.ffn2(), silu<float>(lin(t.ffn1(), ln(t.norm2(), r))));
  seq = ln(*block.final_norm(), add(r, f));
  y = fold_patches<float>(seq, 4, 4, 2, 2);
  y = conv_bn_act(block.proj(), y);
  const std::array<Tensor, 2> parts{x, y};
  const Tensor expected = conv_bn_act(block.fusion(), concat_channels<float>(parts));

  const Tensor got = block.forward(x, Mode::eval);
  ASSERT_EQ(got.shape(), x.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-5) << i;
}

TEST(MobileVitBlock, PreservesShape) {
  MobileVitBlockSpec spec{12, 16, 1, 4, 32, 2, 2};
  Rng rng(10);
  MobileVitBlock<float> block(spec, rng);
  for (std::size_t side : {2, 4, 8}) {
    Shape s{2, 12, side, side};
    EXPECT_EQ(block.forward(random_tensor(s, side), Mode::train).shape(), s);
  }
}

TEST(MobileVitBlock, UnitPatchNoTransformerIsConvolutional) {
  MobileVitBlockSpec spec{4, 6, 0, 2, 12, 1, 1};
  Rng rng(11);
  MobileVitBlock<float> block(spec, rng);
  EXPECT_TRUE(block.transformer().empty());
  EXPECT_FALSE(block.final_norm().has_value());
  const Tensor x = random_tensor(Shape{1, 4, 3, 5}, 12);

  Tensor y = conv_bn_act(block.local_conv(), x);
  y = conv2d<float>(y, block.local_proj().weight(), std::nullopt, {});
  y = conv_bn_act(block.proj(), y);
  const std::array<Tensor, 2> parts{x, y};
  const Tensor expected = conv_bn_act(block.fusion(), concat_channels<float>(parts));
  const Tensor got = block.forward(x, Mode::eval);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-5);
}

TEST(MobileVitBlock, IndivisibleSpatialThrows) {
  MobileVitBlockSpec spec{4, 8, 1, 2, 16, 2, 2};
  Rng rng(13);
  MobileVitBlock<float> block(spec, rng);
  EXPECT_THROW(block.forward(Tensor(Shape{1, 4, 3, 4}), Mode::eval), ShapeError);
}

// ---------------------------------------------------------------------------

namespace {

Backbone<float> make_backbone(const std::string& variant, std::uint64_t seed = 0) {
  Rng rng(seed);
  return Backbone<float>(backbone_spec(resolve_variant(variant)), rng);
}

std::array<std::size_t, 5> sides(const BlockOutputs<float>& out) {
  std::array<std::size_t, 5> s{};
  for (std::size_t k = 0; k < 5; ++k) s[k] = out.features[k].dim(2);
  return s;
}

}  // namespace

TEST(Backbone, ImagenetStructure) {
  const auto bb = make_backbone("mobilevit-s");
  const auto& s = bb.spec();
  EXPECT_EQ(s.block_channels, (std::array<int, 5>{32, 64, 96, 128, 160}));
  EXPECT_EQ(s.stem_channels, 16);
  EXPECT_EQ(s.transformer_dim, (std::array<int, 3>{144, 192, 240}));
  EXPECT_EQ(s.transformer_depth, (std::array<int, 3>{2, 4, 3}));

  // Block 1: stem conv/2 then MV2; block 2: MV2/2 then two MV2;
  // blocks 3..5: MV2/2 then MobileViT.
  const auto& b1 = bb.block(0);
  ASSERT_EQ(b1.size(), 2u);
  const auto& stem = std::get<ConvBnAct<float>>(b1[0]);
  EXPECT_EQ(stem.conv().geometry().stride, 2u);
  EXPECT_EQ(stem.conv().out_channels(), 16u);
  EXPECT_FALSE(stem.conv().bias().has_value());
  EXPECT_TRUE(stem.norm().has_value());
  EXPECT_EQ(std::get<Mv2Block<float>>(b1[1]).spec().out_channels, 32u);

  ASSERT_EQ(bb.block(1).size(), 3u);
  EXPECT_EQ(std::get<Mv2Block<float>>(bb.block(1)[0]).spec().stride, 2u);
  for (std::size_t k = 2; k < 5; ++k) {
    const auto& units = bb.block(k);
    ASSERT_EQ(units.size(), 2u);
    EXPECT_EQ(std::get<Mv2Block<float>>(units[0]).spec().stride, 2u);
    const auto& mv = std::get<MobileVitBlock<float>>(units[1]);
    EXPECT_EQ(mv.spec().transformer_depth, static_cast<std::size_t>(s.transformer_depth[k - 2]));
    EXPECT_EQ(mv.spec().ffn_dim, 2 * mv.spec().transformer_dim);
    EXPECT_EQ(mv.spec().heads, 4u);
  }
}

TEST(Backbone, ResidualRuleHoldsForEveryBlock) {
  for (const auto& name : {"mobilevit-s", "exmvit-928-tiny"}) {
    const auto bb = make_backbone(name);
    std::size_t residuals = 0;
    for (std::size_t k = 0; k < 5; ++k)
      for (const auto& unit : bb.block(k))
        if (const auto* mv2 = std::get_if<Mv2Block<float>>(&unit)) {
          const auto& sp = mv2->spec();
          EXPECT_EQ(mv2->has_residual(), sp.stride == 1 && sp.in_channels == sp.out_channels);
          residuals += mv2->has_residual();
        }
    EXPECT_EQ(residuals, 2u) << name;  // the two trailing MV2 units of block 2
  }
}

TEST(Backbone, TinySidesAndChannels) {
  const auto bb = make_backbone("exmvit-928-tiny", 1);
  const auto cfg = resolve_variant("exmvit-928-tiny");
  for (auto [size, expect] : {std::pair<std::size_t, std::array<std::size_t, 5>>{
                                  64, {32, 16, 8, 4, 2}},
                              {256, {128, 64, 32, 16, 8}}}) {
    const auto out = bb.forward_collect(random_tensor(Shape{1, 3, size, size}, size), Mode::eval);
    EXPECT_EQ(sides(out), expect);
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_EQ(out.features[k].dim(1), static_cast<std::size_t>(cfg.block_channels[k]));
    }
  }
}

TEST(Backbone, ImagenetSidesAt256) {
  const auto bb = make_backbone("mobilevit-s", 2);
  const auto out = bb.forward_collect(random_tensor(Shape{1, 3, 256, 256}, 3), Mode::eval);
  EXPECT_EQ(sides(out), (std::array<std::size_t, 5>{128, 64, 32, 16, 8}));
  const std::array<std::size_t, 5> channels{32, 64, 96, 128, 160};
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(out.features[k].dim(1), channels[k]);
}

TEST(Backbone, RejectsIndivisibleInput) {
  const auto bb = make_backbone("mobilevit-s-tiny");
  EXPECT_THROW(bb.forward_collect(Tensor(Shape{1, 3, 48, 48}), Mode::eval), ShapeError);
  EXPECT_THROW(bb.forward_collect(Tensor(Shape{1, 1, 64, 64}), Mode::eval), ShapeError);
}

TEST(Backbone, BatchRowsIndependentAndRepeatable) {
  const auto bb = make_backbone("exmvit-640-tiny", 4);
  const Tensor img = random_tensor(Shape{1, 3, 64, 64}, 5);
  Tensor pair(Shape{2, 3, 64, 64});
  std::copy(img.data().begin(), img.data().end(), pair.data().begin());
  std::copy(img.data().begin(), img.data().end(), pair.data().begin() + img.numel());
  const auto a = bb.forward_collect(pair, Mode::eval);
  const auto b = bb.forward_collect(pair, Mode::eval);
  for (std::size_t k = 0; k < 5; ++k) {
    const Tensor& f = a.features[k];
    const std::size_t half = f.numel() / 2;
    EXPECT_EQ(std::memcmp(f.data().data(), f.data().data() + half, half * sizeof(float)), 0);
    EXPECT_TRUE(bitwise_equal(f, b.features[k]));
  }
}

TEST(Backbone, ParameterTotalFitsBaselineBudget) {
  const auto bb = make_backbone("mobilevit-s");
  const std::size_t head = 160 * 640 + 640, fc = 640 * 1000 + 1000;
  const double total = static_cast<double>(trainable_count(bb) + head + fc);
  EXPECT_NEAR(total / 5.579e6, 1.0, 0.015);
}
