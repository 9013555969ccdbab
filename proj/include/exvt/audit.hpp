#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "exvt/config.hpp"
#include "exvt/layers.hpp"

namespace exvt {

struct AuditRow {
  std::string name;  // layer path
  std::string kind;
  Shape shape;       // shape of the layer's first parameter
  std::uint64_t param_count = 0;
};

struct AuditReport {
  std::string variant;
  Profile profile = Profile::imagenet;
  int class_count = 0;
  int input_size = 0;
  std::vector<AuditRow> rows;
  std::uint64_t strict_total = 0;
  // strict_total minus the shortcut convs of blocks 1..4.
  std::uint64_t paper_convention_total = 0;
  std::uint64_t baseline_total = 0;
  int classifier_width = 0;
  double classifier_width_percent = 0.0;  // vs the baseline's 4 * C_5
  double overhead_vs_baseline_percent = 0.0;  // paper convention
  double strict_overhead_percent = 0.0;
  std::uint64_t flops_estimate = 0;  // multiply-accumulates, batch 1
};

// One tensor as seen by the audit: visit() metadata plus its shape.
struct ParamEntry {
  ParamInfo info;
  Shape shape;
};

// baseline_total is derived from the "backbone." entries plus the plain
// MobileViT-S head (1x1 conv to 4 * C_5 with bias) and classifier.
AuditReport build_report(const VariantConfig& config, const std::vector<ParamEntry>& params,
                         const Trace& trace, int classifier_width);

template <class M>
std::vector<ParamEntry> param_entries(const M& model) {
  using T = typename M::value_type;
  std::vector<ParamEntry> out;
  model.visit([&](const ParamInfo& info, const TensorT<T>& t) {
    out.push_back({info, t.shape()});
  });
  return out;
}

// Enumerates every weight, bias and norm parameter of a built model once.
// Running statistics are buffers and are not counted.
template <class M>
AuditReport count_params(const M& model) {
  const auto& config = model.config();
  return build_report(config, param_entries(model),
                      model.trace(static_cast<std::size_t>(config.input_size)),
                      model.classifier_width());
}

using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

// Symbolic forward at batch 1; no activations are allocated.
template <class M>
ShapeTrace trace_shapes(const M& model, int input_size) {
  if (input_size <= 0 || input_size % 32 != 0) {
    throw ShapeError("input size " + std::to_string(input_size) +
                     " must be a positive multiple of 32");
  }
  ShapeTrace out;
  for (const auto& row : model.trace(static_cast<std::size_t>(input_size))) {
    out.emplace_back(row.name, row.out_shape);
  }
  return out;
}

// Output spatial side of each of the five blocks, in order.
std::vector<std::size_t> block_sides(const ShapeTrace& trace);

struct OverheadRow {
  std::string variant;
  int classifier_width = 0;
  double width_percent = 0.0;  // relative to the baseline's 4 * C_5
  std::uint64_t strict_total = 0;
  std::uint64_t paper_convention_total = 0;
  std::uint64_t baseline_total = 0;
  double strict_delta_percent = 0.0;
  double paper_delta_percent = 0.0;
};

// Throws ConfigError for unknown names.
std::vector<OverheadRow> overhead_report(const std::vector<std::string>& variants);

// value / 1e6 with three decimals and an "M" suffix, e.g. "5.579M".
std::string format_millions(std::uint64_t count);
// Signed percentage with two decimals, e.g. "+5.16%".
std::string format_percent(double value);

std::string render_table(const AuditReport& report);
nlohmann::ordered_json to_json(const AuditReport& report);

std::string render_table(const std::vector<OverheadRow>& rows);
nlohmann::ordered_json to_json(const std::vector<OverheadRow>& rows);

std::string render_trace(const Trace& trace);
nlohmann::ordered_json trace_to_json(const Trace& trace);

}  // namespace exvt
