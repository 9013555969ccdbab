#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exvt/exshortcut.hpp"
#include "exvt/layers.hpp"

namespace exvt {

struct TrainConfig {
  double lr_start = 2e-4;
  double lr_peak = 2e-3;
  int warmup_iters = 3000;
  int total_iters = 0;
  double weight_decay = 0.01;
  double smoothing = 0.1;
  std::optional<double> ema_decay;  // 0.9995 when enabled without a value
  std::uint64_t seed = 0;
  int batch_size = 32;
  int epochs = 1;

  // Throws std::invalid_argument on the first violated invariant.
  void validate() const;
};

inline constexpr double kDefaultEmaDecay = 0.9995;

// Linear warm-up lr_start -> lr_peak over warmup_iters, then cosine decay
// lr_peak -> lr_start over the remaining iterations. Both ends and the
// junction are exact.
double lr_schedule(int iter, const TrainConfig& config);

// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int class_count = 8;
  int samples_per_class = 64;
  int image_size = 64;
  std::uint64_t seed = 0;
  double noise = 0.05;
};

// Class c is a Gaussian blob colored by c % 4 (red, green, blue, yellow) at
// size level c / 4, placed at a random position over a noisy background.
class SyntheticDataset {
 public:
  explicit SyntheticDataset(const SyntheticSpec& spec);

  const SyntheticSpec& spec() const { return spec_; }
  std::size_t size() const { return labels_.size(); }
  const std::vector<int>& labels() const { return labels_; }
  const Tensor& images() const { return images_; }  // [N,3,S,S]

  Tensor batch_images(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

 private:
  SyntheticSpec spec_;
  Tensor images_;
  std::vector<int> labels_;
};

// ---------------------------------------------------------------------------

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamWState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

// One AdamW update with decoupled decay: p <- p - lr * wd * p, then the
// bias-corrected Adam step. `decay` selects which tensors are decayed (all
// when empty). State is sized on first use; a later shape change throws.
template <class T>
void adamw_step(std::span<TensorT<T>> params, std::span<const TensorT<T>> grads,
                AdamWState<T>& state, double lr, double weight_decay,
                const std::vector<bool>& decay = {}, const AdamWOptions& options = {});

// shadow <- decay * shadow + (1 - decay) * params
template <class T>
void ema_update(std::span<TensorT<T>> shadow, std::span<const TensorT<T>> params, double decay);

// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  LayerKind kind = LayerKind::conv;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

// Central-difference stencils: (f(x+h) - f(x-h)) / 2h has O(h^2) error,
// the five-point form O(h^4).
enum class Stencil { three_point, five_point };

struct GradCheckOptions {
  std::size_t samples = 256;
  double step = 1e-3;
  Stencil stencil = Stencil::five_point;
  double tolerance = 1e-3;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;  // sampled order
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::vector<std::string> kinds;  // layer kinds covered, sorted

  // Entries sorted by descending rel_err.
  std::vector<GradCheckEntry> worst(std::size_t n) const;
};

double relative_error(double analytic, double numeric);

// Central differences on a stratified sample: every trainable tensor gets
// at least one scalar, the rest are drawn uniformly. Tensors with
// requires_grad == false are skipped.
GradCheckReport check_gradients(const std::vector<NamedTensor<double>>& params,
                                const std::function<TensorT<double>()>& loss,
                                const GradCheckOptions& options);

// Checks a model's training-mode loss in double precision.
template <class T>
GradCheckReport grad_check(const ExMobileViT<T>& model, const Tensor& input,
                           std::span<const int> labels, const GradCheckOptions& options,
                           double smoothing = 0.1) {
  const ExMobileViT<double> m = convert_model<double>(model);
  TensorT<double> x(input.shape());
  std::copy(input.data().begin(), input.data().end(), x.data().begin());
  const std::vector<int> y(labels.begin(), labels.end());
  return check_gradients(
      named_tensors(m),
      [&] { return label_smoothing_ce<double>(m.forward(x, Mode::train), y, smoothing); },
      options);
}

// ---------------------------------------------------------------------------

struct HistoryRow {
  int iter = 0;
  double loss = 0.0;
  double acc = 0.0;  // batch accuracy
  double lr = 0.0;

  friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

struct EpochRow {
  int epoch = 0;
  double loss = 0.0;
  double acc = 0.0;  // running accuracy over the epoch
};

struct StepResult {
  double loss = 0.0;
  double acc = 0.0;
  std::vector<std::pair<std::string, double>> grad_norms;  // trainable tensors
};

// Forward, backward and one AdamW update on a single batch.
class Trainer {
 public:
  Trainer(const ExMobileViT<float>& model, const TrainConfig& config);

  StepResult step(const Tensor& images, std::span<const int> labels, double lr);
  // Swaps EMA weights into the model when EMA is enabled.
  void finalize();

 private:
  const ExMobileViT<float>& model_;
  TrainConfig config_;
  std::vector<NamedTensor<float>> all_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<bool> decay_;
  AdamWState<float> adam_;
  std::vector<Tensor> shadow_;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::vector<EpochRow> epochs;
  double final_accuracy = 0.0;  // eval mode over the whole dataset
};

struct TrainHooks {
  std::function<void(const EpochRow&)> on_epoch;
  std::optional<std::filesystem::path> checkpoint;
  // Stop after this many epochs; the schedule still spans config.epochs.
  std::optional<int> stop_after_epochs;
};

// Fixed data order per seed. Throws NumericError naming the iteration when
// the loss stops being finite.
TrainResult train_loop(const ExMobileViT<float>& model, const SyntheticDataset& data,
                       const TrainConfig& config, const TrainHooks& hooks = {});

// Eval-mode top-1 accuracy in chunks of `batch`.
double evaluate(const ExMobileViT<float>& model, const SyntheticDataset& data,
                std::size_t batch = 64);

void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& history);

}  // namespace exvt
