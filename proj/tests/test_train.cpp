#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "exvt/train.hpp"
#include "support.hpp"

using namespace exvt;
using exvt::testing::random_tensor;

namespace {

TrainConfig short_config(int epochs, int iters_per_epoch) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.total_iters = epochs * iters_per_epoch;
  c.warmup_iters = 2;
  c.seed = 3;
  return c;
}

SyntheticDataset small_data(std::uint64_t seed = 3) {
  return SyntheticDataset(SyntheticSpec{8, 4, 64, seed, 0.05});
}

std::vector<Tensor> snapshot_all(const ExMobileViT<float>& m) {
  std::vector<Tensor> out;
  m.visit([&](const ParamInfo&, const Tensor& t) { out.push_back(t.clone()); });
  return out;
}

bool same_bits(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape() ||
        std::memcmp(a[i].data().data(), b[i].data().data(), a[i].numel() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// label-smoothing cross-entropy

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  for (float s : {0.0f, 0.1f, 0.5f, 0.9f}) {
    const Tensor logits(Shape{3, 5}, 0.7f);
    const std::vector<int> y{0, 2, 4};
    EXPECT_NEAR(label_smoothing_ce<float>(logits, y, s).item(), std::log(5.0), 1e-6) << s;
  }
}

TEST(CrossEntropy, ConfidentCorrectApproachesZero) {
  Tensor logits(Shape{1, 4}, 0.0f);
  logits[2] = 50.0f;
  EXPECT_LT(label_smoothing_ce<float>(logits, std::vector<int>{2}, 0.0f).item(), 1e-6);
}

TEST(CrossEntropy, DirectFormula) {
  Tensor logits(Shape{1, 4}, 0.0f);
  logits[0] = 2.0f;
  const double z = std::exp(2.0) + 3.0;
  const double lp0 = 2.0 - std::log(z), lpo = -std::log(z);
  const double s = 0.1, K = 4;
  const double expected = -((1 - s + s / K) * lp0 + 3 * (s / K) * lpo);
  EXPECT_NEAR(label_smoothing_ce<float>(logits, std::vector<int>{0}, 0.1f).item(), expected, 1e-6);
}

TEST(CrossEntropy, RejectsBadLabelsAndSmoothing) {
  const Tensor logits(Shape{2, 3});
  EXPECT_THROW(label_smoothing_ce<float>(logits, std::vector<int>{0, 3}, 0.1f), std::out_of_range);
  EXPECT_THROW(label_smoothing_ce<float>(logits, std::vector<int>{0, -1}, 0.1f), std::out_of_range);
  EXPECT_THROW(label_smoothing_ce<float>(logits, std::vector<int>{0, 1}, 1.0f),
               std::invalid_argument);
  EXPECT_THROW(label_smoothing_ce<float>(logits, std::vector<int>{0}, 0.1f), ShapeError);
}

// ---------------------------------------------------------------------------
// schedule

TEST(LrSchedule, EndpointsAndJunction) {
  TrainConfig c;
  c.warmup_iters = 3000;
  c.total_iters = 30000;
  EXPECT_EQ(lr_schedule(0, c), 2e-4);
  EXPECT_EQ(lr_schedule(3000, c), 2e-3);
  EXPECT_EQ(lr_schedule(30000, c), 2e-4);
  EXPECT_NEAR(lr_schedule(1500, c), 1.1e-3, 1e-15);
  EXPECT_NEAR(lr_schedule(2999, c), 2e-3, 1e-6);
  EXPECT_NEAR(lr_schedule(3001, c), 2e-3, 1e-9);
  const double mid = lr_schedule(3000 + 13500, c);
  EXPECT_NEAR(mid, 1.1e-3, 1e-15);
  EXPECT_THROW(lr_schedule(-1, c), std::out_of_range);
  EXPECT_THROW(lr_schedule(30001, c), std::out_of_range);
}

TEST(LrSchedule, MonotoneSegments) {
  TrainConfig c;
  c.warmup_iters = 10;
  c.total_iters = 100;
  for (int i = 0; i < 10; ++i) EXPECT_LT(lr_schedule(i, c), lr_schedule(i + 1, c));
  for (int i = 10; i < 100; ++i) EXPECT_GT(lr_schedule(i, c), lr_schedule(i + 1, c));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.total_iters = 100;
  c.warmup_iters = 10;
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.warmup_iters = 100;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.lr_start = 1e-2;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.ema_decay = 1.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// AdamW

namespace {

struct ScalarAdam {
  double m = 0, v = 0, p;
  int t = 0;
  explicit ScalarAdam(double p0) : p(p0) {}
  void step(double g, double lr, double wd) {
    ++t;
    p -= lr * wd * p;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    p -= lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

template <class T>
void adam_run(TensorT<T>& p, const std::vector<double>& grads, double lr, double wd,
              AdamWState<T>& state) {
  for (double g : grads) {
    std::array<TensorT<T>, 1> ps{p};
    std::array<TensorT<T>, 1> gs{TensorT<T>(Shape{1}, static_cast<T>(g))};
    adamw_step<T>(ps, gs, state, lr, wd);
  }
}

}  // namespace

TEST(AdamW, ZeroGradZeroDecayIsNoOp) {
  Tensor p = random_tensor(Shape{5}, 1);
  const Tensor before = p.clone();
  AdamWState<float> st;
  std::array<Tensor, 1> ps{p};
  std::array<Tensor, 1> gs{Tensor(Shape{5})};
  adamw_step<float>(ps, gs, st, 1e-2, 0.0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(p[i], before[i]);
}

TEST(AdamW, ZeroGradScalesByDecay) {
  TensorT<double> p = random_tensor<double>(Shape{4}, 2);
  const auto before = p.clone();
  AdamWState<double> st;
  std::array<TensorT<double>, 1> ps{p};
  std::array<TensorT<double>, 1> gs{TensorT<double>(Shape{4})};
  adamw_step<double>(ps, gs, st, 0.1, 0.01);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p[i], before[i] * (1 - 0.1 * 0.01));
}

TEST(AdamW, TwoStepScalarRecursion) {
  for (double wd : {0.0, 0.01}) {
    TensorT<double> p(Shape{1}, 0.5);
    AdamWState<double> st;
    adam_run(p, {1.0, 1.0}, 1e-2, wd, st);
    ScalarAdam ref(0.5);
    ref.step(1.0, 1e-2, wd);
    ref.step(1.0, 1e-2, wd);
    EXPECT_NEAR(p[0], ref.p, 1e-7) << wd;
    EXPECT_EQ(st.step, 2);
  }
}

TEST(AdamW, DecayZeroIsAdamOverTenSteps) {
  const std::vector<double> grads{0.3, -1.2, 0.5, 2.0, -0.1, 0.0, 0.7, -0.4, 1.1, -2.5};
  TensorT<double> p(Shape{1}, 1.0);
  AdamWState<double> st;
  adam_run(p, grads, 3e-3, 0.0, st);
  ScalarAdam ref(1.0);
  for (double g : grads) ref.step(g, 3e-3, 0.0);
  EXPECT_NEAR(p[0], ref.p, 1e-7);

  Tensor pf(Shape{1}, 1.0f);
  AdamWState<float> sf;
  adam_run(pf, grads, 3e-3, 0.0, sf);
  EXPECT_NEAR(pf[0], ref.p, 1e-7);
}

TEST(AdamW, DecayMaskSkipsTensors) {
  Tensor w(Shape{2}, 1.0f), b(Shape{2}, 1.0f);
  AdamWState<float> st;
  std::array<Tensor, 2> ps{w, b};
  std::array<Tensor, 2> gs{Tensor(Shape{2}), Tensor(Shape{2})};
  adamw_step<float>(ps, gs, st, 0.5, 0.1, std::vector<bool>{true, false});
  EXPECT_FLOAT_EQ(w[0], 0.95f);
  EXPECT_EQ(b[0], 1.0f);
}

TEST(AdamW, ShapeMismatchThrows) {
  AdamWState<float> st;
  std::array<Tensor, 1> ps{Tensor(Shape{3})};
  std::array<Tensor, 1> gs{Tensor(Shape{2})};
  EXPECT_THROW(adamw_step<float>(ps, gs, st, 0.1, 0.0), ShapeError);
  std::array<Tensor, 1> ok{Tensor(Shape{3})};
  adamw_step<float>(ps, ok, st, 0.1, 0.0);
  std::array<Tensor, 1> grown{Tensor(Shape{4})}, grown_g{Tensor(Shape{4})};
  EXPECT_THROW(adamw_step<float>(grown, grown_g, st, 0.1, 0.0), ShapeError);
}

// ---------------------------------------------------------------------------
// EMA

TEST(Ema, DecayExtremesAndRecursion) {
  Tensor shadow(Shape{3}, 0.0f), params(Shape{3}, 2.0f);
  std::array<Tensor, 1> s{shadow};
  std::array<Tensor, 1> p{params};
  ema_update<float>(s, p, 1.0);
  EXPECT_EQ(shadow[0], 0.0f);
  ema_update<float>(s, p, 0.5);
  ema_update<float>(s, p, 0.5);
  EXPECT_EQ(shadow[1], 1.5f);
  ema_update<float>(s, p, 0.0);
  EXPECT_EQ(shadow[2], 2.0f);
  std::array<Tensor, 1> bad{Tensor(Shape{4})};
  EXPECT_THROW(ema_update<float>(s, bad, 0.5), ShapeError);
}

// ---------------------------------------------------------------------------
// gradient checking

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

namespace {

struct LinearToy {
  TensorT<double> w = exvt::testing::param_tensor<double>(Shape{5, 7}, 20, 0.5);
  TensorT<double> b = exvt::testing::param_tensor<double>(Shape{5}, 21, 0.5);
  TensorT<double> x = random_tensor<double>(Shape{6, 7}, 22);
  std::vector<int> y{0, 1, 2, 3, 4, 0};

  std::vector<NamedTensor<double>> params() const {
    return {{{"fc.weight", "fc", LayerKind::linear, ParamRole::weight}, w},
            {{"fc.bias", "fc", LayerKind::linear, ParamRole::bias}, b}};
  }
  TensorT<double> loss() const { return label_smoothing_ce<double>(linear<double>(x, w, b), y, 0.1); }
};

}  // namespace

TEST(GradCheck, LinearToyBothStencils) {
  LinearToy toy;
  for (Stencil s : {Stencil::three_point, Stencil::five_point}) {
    GradCheckOptions o;
    o.samples = 40;
    o.stencil = s;
    const auto r = check_gradients(toy.params(), [&] { return toy.loss(); }, o);
    EXPECT_EQ(r.entries.size(), 40u);
    EXPECT_LT(r.max_rel_err, 1e-5);
    EXPECT_TRUE(r.passed);
  }
}

TEST(GradCheck, FrozenTensorsAreExcluded) {
  LinearToy toy;
  toy.b.set_requires_grad(false);
  GradCheckOptions o;
  o.samples = 30;
  const auto r = check_gradients(toy.params(), [&] { return toy.loss(); }, o);
  ASSERT_FALSE(r.entries.empty());
  for (const auto& e : r.entries) EXPECT_EQ(e.param, "fc.weight");
}

TEST(GradCheck, DetectsAWrongGradient) {
  // d/dw of w^3 computed as mul(w, w) * w with one factor detached.
  TensorT<double> w = exvt::testing::param_tensor<double>(Shape{4}, 23);
  std::vector<NamedTensor<double>> ps{{{"w", "w", LayerKind::linear, ParamRole::weight}, w}};
  auto loss = [&] {
    TensorT<double> frozen = w.clone();
    return sum(mul(mul(w, w), frozen));
  };
  GradCheckOptions o;
  o.samples = 4;
  const auto r = check_gradients(ps, loss, o);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_err, 0.1);
}

TEST(GradCheck, TinyModelAllKindsWithinTolerance) {
  ExMobileViT<float> m(resolve_variant("exmvit-928-tiny"), 0);
  SyntheticDataset data(SyntheticSpec{8, 1, 64, 0, 0.05});
  const std::array<std::size_t, 2> idx{0, 5};
  GradCheckOptions o;
  o.samples = 220;
  const auto r = grad_check(m, data.batch_images(idx), data.batch_labels(idx), o);
  EXPECT_GE(r.entries.size(), 200u);
  EXPECT_LE(r.max_rel_err, 1e-3);
  EXPECT_TRUE(r.passed);
  for (const char* kind : {"conv", "depthwise_conv", "pointwise_conv", "batch_norm", "layer_norm",
                           "linear", "shortcut_conv", "classifier"}) {
    EXPECT_NE(std::find(r.kinds.begin(), r.kinds.end(), kind), r.kinds.end()) << kind;
  }
  const auto worst = r.worst(3);
  ASSERT_EQ(worst.size(), 3u);
  EXPECT_GE(worst[0].rel_err, worst[1].rel_err);
  EXPECT_EQ(worst[0].rel_err, r.max_rel_err);
}

TEST(GradCheck, NonFiniteLossThrows) {
  LinearToy toy;
  auto loss = [&] {
    TensorT<double> l = sum(toy.w);
    return scale(l, std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(check_gradients(toy.params(), loss, {}), NumericError);
}

// ---------------------------------------------------------------------------
// data

TEST(Synthetic, DeterministicAndBalanced) {
  const SyntheticDataset a(SyntheticSpec{8, 5, 64, 11, 0.05});
  const SyntheticDataset b(SyntheticSpec{8, 5, 64, 11, 0.05});
  const SyntheticDataset c(SyntheticSpec{8, 5, 64, 12, 0.05});
  ASSERT_EQ(a.size(), 40u);
  EXPECT_EQ(a.images().shape(), (Shape{40, 3, 64, 64}));
  EXPECT_EQ(std::memcmp(a.images().data().data(), b.images().data().data(),
                        a.images().numel() * sizeof(float)),
            0);
  EXPECT_NE(std::memcmp(a.images().data().data(), c.images().data().data(),
                        a.images().numel() * sizeof(float)),
            0);
  std::vector<int> counts(8, 0);
  for (int y : a.labels()) ++counts.at(static_cast<std::size_t>(y));
  for (int n : counts) EXPECT_EQ(n, 5);
}

TEST(Synthetic, BatchGather) {
  const SyntheticDataset d(SyntheticSpec{4, 2, 64, 1, 0.0});
  const std::array<std::size_t, 2> idx{5, 2};
  const Tensor batch = d.batch_images(idx);
  const std::size_t per = 3 * 64 * 64;
  EXPECT_EQ(batch.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(std::memcmp(batch.data().data(), d.images().data().data() + 5 * per, per * sizeof(float)), 0);
  EXPECT_EQ(d.batch_labels(idx), (std::vector<int>{d.labels()[5], d.labels()[2]}));
}

// ---------------------------------------------------------------------------
// training loop

TEST(Trainer, StepReportsShortcutGradientNorms) {
  ExMobileViT<float> m(resolve_variant("exmvit-928-tiny"), 5);
  Trainer t(m, short_config(1, 4));
  const auto data = small_data();
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  const auto r = t.step(data.batch_images(idx), data.batch_labels(idx), 1e-3);
  int shortcut_tensors = 0;
  for (const auto& [name, norm] : r.grad_norms) {
    if (name.starts_with("shortcut") && name.ends_with("weight")) {
      EXPECT_GT(norm, 0.0) << name;
      ++shortcut_tensors;
    }
  }
  EXPECT_EQ(shortcut_tensors, 3);
}

TEST(TrainLoop, HistoryWiringAndFirstLoss) {
  ExMobileViT<float> m(resolve_variant("exmvit-928-tiny"), 3);
  const auto data = small_data();
  const TrainConfig c = short_config(2, 4);
  const auto r = train_loop(m, data, c);
  ASSERT_EQ(r.history.size(), 8u);
  ASSERT_EQ(r.epochs.size(), 2u);
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    EXPECT_EQ(r.history[i].iter, static_cast<int>(i));
    EXPECT_EQ(r.history[i].lr, lr_schedule(static_cast<int>(i), c));
  }
  EXPECT_NEAR(r.history[0].loss, std::log(8.0), 0.1);
  EXPECT_GE(r.final_accuracy, 0.0);
  EXPECT_LE(r.final_accuracy, 1.0);
}

TEST(TrainLoop, BitwiseDeterministic) {
  const auto data = small_data();
  const TrainConfig c = short_config(2, 4);
  ExMobileViT<float> a(resolve_variant("exmvit-640-tiny"), 9);
  ExMobileViT<float> b(resolve_variant("exmvit-640-tiny"), 9);
  const auto ra = train_loop(a, data, c);
  const auto rb = train_loop(b, data, c);
  EXPECT_EQ(ra.history, rb.history);
  EXPECT_TRUE(same_bits(snapshot_all(a), snapshot_all(b)));
}

TEST(TrainLoop, StopAfterEpochsIsPrefix) {
  const auto data = small_data();
  const TrainConfig c = short_config(3, 4);
  ExMobileViT<float> a(resolve_variant("exmvit-576-tiny"), 2);
  ExMobileViT<float> b(resolve_variant("exmvit-576-tiny"), 2);
  const auto full = train_loop(a, data, c);
  TrainHooks h;
  h.stop_after_epochs = 1;
  const auto part = train_loop(b, data, c, h);
  ASSERT_EQ(part.history.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(part.history[i], full.history[i]);
}

TEST(TrainLoop, EmaDecayOneKeepsInitialWeights) {
  ExMobileViT<float> m(resolve_variant("exmvit-928-tiny"), 4);
  const auto initial = snapshot_all(m);
  TrainConfig c = short_config(1, 4);
  c.ema_decay = 1.0;
  train_loop(m, small_data(), c);
  EXPECT_TRUE(same_bits(initial, snapshot_all(m)));
}

TEST(TrainLoop, DivergenceIsReported) {
  ExMobileViT<float> m(resolve_variant("exmvit-928-tiny"), 6);
  TrainConfig c = short_config(2, 4);
  c.lr_start = 1e30;
  c.lr_peak = 1e38;
  try {
    train_loop(m, small_data(), c);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at iteration"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, RejectsInconsistentIterationBudget) {
  ExMobileViT<float> m(resolve_variant("exmvit-928-tiny"), 6);
  TrainConfig c = short_config(2, 4);
  c.total_iters = 7;
  EXPECT_THROW(train_loop(m, small_data(), c), std::invalid_argument);
}

TEST(History, CsvFormat) {
  std::ostringstream out;
  write_history_csv(out, {{0, 2.0794415, 0.125, 2e-4}, {1, 1.5, 1.0, 0.002}});
  EXPECT_EQ(out.str(),
            "iter,loss,acc,lr\n"
            "0,2.079442,0.125000,0.000200\n"
            "1,1.500000,1.000000,0.002000\n");
}
