#include "exvt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "exvt/io.hpp"

namespace exvt {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(lr_start > 0.0) || !(lr_start <= lr_peak)) fail("need 0 < lr_start <= lr_peak");
  if (warmup_iters < 0) fail("warmup_iters must be >= 0");
  if (total_iters > 0 && warmup_iters >= total_iters) fail("warmup_iters must be < total_iters");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) fail("smoothing must be in [0,1)");
  if (ema_decay && !(*ema_decay >= 0.0 && *ema_decay <= 1.0)) fail("ema_decay must be in [0,1]");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (epochs <= 0) fail("epochs must be positive");
}

double lr_schedule(int iter, const TrainConfig& c) {
  if (iter < 0 || iter > c.total_iters) {
    throw std::out_of_range("lr_schedule: iter " + std::to_string(iter) + " outside [0, " +
                            std::to_string(c.total_iters) + "]");
  }
  if (iter < c.warmup_iters) {
    return std::lerp(c.lr_start, c.lr_peak,
                     static_cast<double>(iter) / static_cast<double>(c.warmup_iters));
  }
  const double progress = static_cast<double>(iter - c.warmup_iters) /
                          static_cast<double>(c.total_iters - c.warmup_iters);
  const double t = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return std::lerp(c.lr_start, c.lr_peak, t);
}

// ---------------------------------------------------------------------------

SyntheticDataset::SyntheticDataset(const SyntheticSpec& spec) : spec_(spec) {
  if (spec.class_count <= 0 || spec.samples_per_class <= 0 || spec.image_size <= 0) {
    throw std::invalid_argument("synthetic dataset: counts and size must be positive");
  }
  static constexpr float kColors[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
  const auto n = static_cast<std::size_t>(spec.class_count * spec.samples_per_class);
  const auto s = static_cast<std::size_t>(spec.image_size);
  images_ = Tensor(Shape{n, 3, s, s});
  labels_.resize(n);

  Rng rng(spec.seed);
  std::uniform_real_distribution<double> pos(0.3 * s, 0.7 * s);
  std::normal_distribution<double> noise(0.0, spec.noise);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(spec.class_count));
    labels_[i] = c;
    const float* color = kColors[c % 4];
    const double sigma = static_cast<double>(s) * (0.06 + 0.06 * (c / 4));
    const double cy = pos(rng), cx = pos(rng);
    float* img = images_.data().data() + i * 3 * s * s;
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double blob = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        for (std::size_t ch = 0; ch < 3; ++ch) {
          img[(ch * s + y) * s + x] = static_cast<float>(color[ch] * blob + noise(rng));
        }
      }
    }
  }
}

Tensor SyntheticDataset::batch_images(std::span<const std::size_t> indices) const {
  const std::size_t per = 3 * static_cast<std::size_t>(spec_.image_size * spec_.image_size);
  Shape shape = images_.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto src = images_.data().subspan(indices[b] * per, per);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

std::vector<int> SyntheticDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels_.at(i));
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
void adamw_step(std::span<TensorT<T>> params, std::span<const TensorT<T>> grads,
                AdamWState<T>& state, double lr, double weight_decay,
                const std::vector<bool>& decay, const AdamWOptions& o) {
  if (params.size() != grads.size() || (!decay.empty() && decay.size() != params.size())) {
    throw ShapeError("adamw_step: params, grads and decay mask differ in length");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state holds " + std::to_string(state.m.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.m[i].size() != params[i].numel()) {
      throw ShapeError("adamw_step: tensor " + std::to_string(i) + " shape mismatch " +
                       to_string(params[i].shape()) + " vs grad " + to_string(grads[i].shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double shrink = (decay.empty() || decay[i]) ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + o.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) * shrink - lr * update);
    }
  }
}

template <class T>
void ema_update(std::span<TensorT<T>> shadow, std::span<const TensorT<T>> params, double decay) {
  if (shadow.size() != params.size()) {
    throw ShapeError("ema_update: " + std::to_string(shadow.size()) + " shadow tensors for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    if (shadow[i].shape() != params[i].shape()) {
      throw ShapeError("ema_update: shape mismatch at tensor " + std::to_string(i));
    }
    auto s = shadow[i].data();
    auto p = params[i].data();
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] = static_cast<T>(decay * static_cast<double>(s[j]) +
                            (1.0 - decay) * static_cast<double>(p[j]));
    }
  }
}

template void adamw_step<float>(std::span<Tensor>, std::span<const Tensor>, AdamWState<float>&,
                                double, double, const std::vector<bool>&, const AdamWOptions&);
template void adamw_step<double>(std::span<TensorT<double>>, std::span<const TensorT<double>>,
                                 AdamWState<double>&, double, double, const std::vector<bool>&,
                                 const AdamWOptions&);
template void ema_update<float>(std::span<Tensor>, std::span<const Tensor>, double);
template void ema_update<double>(std::span<TensorT<double>>, std::span<const TensorT<double>>,
                                 double);

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

std::vector<GradCheckEntry> GradCheckReport::worst(std::size_t n) const {
  auto sorted = entries;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.rel_err > b.rel_err; });
  if (sorted.size() > n) sorted.resize(n);
  return sorted;
}

GradCheckReport check_gradients(const std::vector<NamedTensor<double>>& params,
                                const std::function<TensorT<double>()>& loss,
                                const GradCheckOptions& options) {
  std::vector<NamedTensor<double>> trainable;
  for (const auto& p : params) {
    if (p.tensor.requires_grad() && p.tensor.numel() > 0) trainable.push_back(p);
  }
  if (trainable.empty()) throw std::invalid_argument("check_gradients: nothing to check");

  for (auto& p : trainable) p.tensor.drop_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto l = loss();
    if (!std::isfinite(l.item())) throw NumericError("check_gradients: loss is not finite");
    tape.backward(l);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : trainable) {
    analytic.emplace_back(p.tensor.has_grad()
                              ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                              : std::vector<double>(p.tensor.numel(), 0.0));
    p.tensor.drop_grad();
  }

  // Stratified sample: a per-tensor quota, then uniform draws over all scalars.
  Rng rng(options.seed);
  std::set<std::pair<std::size_t, std::size_t>> chosen;
  std::vector<std::pair<std::size_t, std::size_t>> order;
  auto take = [&](std::size_t t, std::size_t i) {
    const bool fresh = chosen.emplace(t, i).second;
    if (fresh) order.emplace_back(t, i);
    return fresh;
  };
  const std::size_t quota = std::max<std::size_t>(1, options.samples / trainable.size());
  std::size_t total_scalars = 0;
  for (std::size_t t = 0; t < trainable.size(); ++t) {
    const std::size_t n = trainable[t].tensor.numel();
    total_scalars += n;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t have = 0, want = std::min(quota, n); have < want;) {
      have += take(t, pick(rng));
    }
  }
  const std::size_t target = std::min(options.samples, total_scalars);
  std::uniform_int_distribution<std::size_t> flat(0, total_scalars - 1);
  while (order.size() < target) {
    std::size_t k = flat(rng), t = 0;
    while (k >= trainable[t].tensor.numel()) k -= trainable[t++].tensor.numel();
    take(t, k);
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::set<std::string> kinds;
  const double h = options.step;
  for (const auto& [t, i] : order) {
    auto& tensor = trainable[t].tensor;
    const double original = tensor[i];
    auto at = [&](double offset) {
      tensor[i] = original + offset;
      return loss().item();
    };
    double numeric = 0.0;
    if (options.stencil == Stencil::three_point) {
      numeric = (at(h) - at(-h)) / (2 * h);
    } else {
      numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    }
    tensor[i] = original;
    const double a = analytic[t][i];
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      throw NumericError("check_gradients: non-finite gradient for " + trainable[t].info.name);
    }
    GradCheckEntry e{trainable[t].info.name, i, trainable[t].info.kind, a, numeric,
                     relative_error(a, numeric)};
    report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    kinds.insert(std::string(layer_kind_name(e.kind)));
    report.entries.push_back(std::move(e));
  }
  report.kinds.assign(kinds.begin(), kinds.end());
  report.passed = report.max_rel_err <= options.tolerance;
  return report;
}

// ---------------------------------------------------------------------------

namespace {

double accuracy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = logits.data().subspan(b * k, k);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    hits += best == labels[b];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace

Trainer::Trainer(const ExMobileViT<float>& model, const TrainConfig& config)
    : model_(model), config_(config), all_(named_tensors(model)) {
  config.validate();
  for (const auto& [info, tensor] : all_) {
    if (!tensor.requires_grad()) continue;
    params_.push_back(tensor);
    names_.push_back(info.name);
    decay_.push_back(info.role == ParamRole::weight);
  }
  if (config_.ema_decay) {
    for (const auto& nt : all_) shadow_.push_back(nt.tensor.clone());
  }
}

StepResult Trainer::step(const Tensor& images, std::span<const int> labels, double lr) {
  StepResult result;
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    const Tensor logits = model_.forward(images, Mode::train);
    const Tensor loss =
        label_smoothing_ce<float>(logits, labels, static_cast<float>(config_.smoothing));
    tape.backward(loss);
    result.loss = loss.item();
    result.acc = accuracy(logits, labels);
  }
  std::vector<Tensor> grads;
  grads.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    Tensor g(p.shape());
    double sq = 0.0;
    if (p.has_grad()) {
      std::copy(p.grad().begin(), p.grad().end(), g.data().begin());
      for (float v : p.grad()) sq += static_cast<double>(v) * v;
    }
    result.grad_norms.emplace_back(names_[i], std::sqrt(sq));
    grads.push_back(std::move(g));
    p.drop_grad();
  }
  adamw_step<float>(params_, grads, adam_, lr, config_.weight_decay, decay_);
  if (config_.ema_decay) {
    std::vector<Tensor> current;
    for (const auto& nt : all_) current.push_back(nt.tensor);
    ema_update<float>(shadow_, current, *config_.ema_decay);
  }
  return result;
}

void Trainer::finalize() {
  if (!config_.ema_decay) return;
  for (std::size_t i = 0; i < all_.size(); ++i) {
    auto dst = all_[i].tensor;
    std::copy(shadow_[i].data().begin(), shadow_[i].data().end(), dst.data().begin());
  }
}

TrainResult train_loop(const ExMobileViT<float>& model, const SyntheticDataset& data,
                       const TrainConfig& config, const TrainHooks& hooks) {
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t per_epoch = data.size() / batch;
  if (per_epoch == 0) {
    throw std::invalid_argument("train_loop: dataset of " + std::to_string(data.size()) +
                                " samples is smaller than one batch");
  }
  TrainConfig cfg = config;
  const int planned = config.epochs * static_cast<int>(per_epoch);
  if (cfg.total_iters == 0) cfg.total_iters = planned;
  if (cfg.total_iters != planned) {
    throw std::invalid_argument("train_loop: total_iters " + std::to_string(cfg.total_iters) +
                                " disagrees with epochs * batches = " + std::to_string(planned));
  }
  cfg.validate();

  Trainer trainer(model, cfg);
  TrainResult result;
  Rng order_rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  int iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0, hit_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++iter) {
      const std::span<const std::size_t> idx(order.data() + b * batch, batch);
      const auto labels = data.batch_labels(idx);
      const double lr = lr_schedule(iter, cfg);
      StepResult step;
      try {
        step = trainer.step(data.batch_images(idx), labels, lr);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at iteration " + std::to_string(iter) + " (lr " +
                           std::to_string(lr) + "): " + e.what());
      }
      if (!std::isfinite(step.loss)) {
        throw NumericError("training diverged at iteration " + std::to_string(iter) +
                           ": loss is not finite");
      }
      result.history.push_back({iter, step.loss, step.acc, lr});
      loss_sum += step.loss;
      hit_sum += step.acc;
    }
    EpochRow row{epoch + 1, loss_sum / per_epoch, hit_sum / per_epoch};
    result.epochs.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
    if (hooks.stop_after_epochs && epoch + 1 >= *hooks.stop_after_epochs) break;
  }
  trainer.finalize();
  result.final_accuracy = evaluate(model, data);
  if (hooks.checkpoint) save_weights(*hooks.checkpoint, snapshot(model));
  return result;
}

double evaluate(const ExMobileViT<float>& model, const SyntheticDataset& data,
                std::size_t batch) {
  std::size_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    const auto labels = data.batch_labels(idx);
    const Tensor logits = model.forward(data.batch_images(idx), Mode::eval);
    hits += static_cast<std::size_t>(std::lround(accuracy(logits, labels) * labels.size()));
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& history) {
  out << "iter,loss,acc,lr\n";
  char line[96];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f\n", r.iter, r.loss, r.acc, r.lr);
    out << line;
  }
}

}  // namespace exvt
