#include "exvt/audit.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "exvt/exshortcut.hpp"

namespace exvt {

namespace {

double percent_delta(std::uint64_t total, std::uint64_t baseline) {
  return (static_cast<double>(total) - static_cast<double>(baseline)) /
         static_cast<double>(baseline) * 100.0;
}

bool is_early_shortcut(const std::string& name) {
  // "shortcut<k>.", k < 5
  constexpr std::string_view prefix = "shortcut";
  if (!std::string_view(name).starts_with(prefix) || name.size() <= prefix.size()) return false;
  const char k = name[prefix.size()];
  return k >= '1' && k < static_cast<char>('0' + kBlockCount);
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

nlohmann::ordered_json shape_json(const Shape& s) {
  auto arr = nlohmann::ordered_json::array();
  for (auto v : s) arr.push_back(v);
  return arr;
}

// Fixed-precision number for JSON so output bytes do not depend on the
// shortest-round-trip float printer.
double rounded(double v, int digits) {
  const double scale = std::pow(10.0, digits);
  return std::round(v * scale) / scale;
}

std::string pct_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.0f", v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool right = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return right ? fill + s : s + fill;
}

}  // namespace

AuditReport build_report(const VariantConfig& config, const std::vector<ParamEntry>& params,
                         const Trace& trace, int classifier_width) {
  AuditReport r;
  r.variant = config.name;
  r.profile = config.profile;
  r.class_count = config.class_count;
  r.input_size = config.input_size;
  r.classifier_width = classifier_width;

  std::uint64_t backbone = 0, early_shortcuts = 0;
  for (const auto& p : params) {
    if (p.info.role == ParamRole::buffer) continue;
    const std::uint64_t n = numel(p.shape);
    if (r.rows.empty() || r.rows.back().name != p.info.layer) {
      r.rows.push_back({p.info.layer, std::string(layer_kind_name(p.info.kind)), p.shape, 0});
    }
    r.rows.back().param_count += n;
    r.strict_total += n;
    if (p.info.name.starts_with("backbone.")) backbone += n;
    if (is_early_shortcut(p.info.name)) early_shortcuts += n;
  }
  r.paper_convention_total = r.strict_total - early_shortcuts;

  const auto c5 = static_cast<std::uint64_t>(config.block_channels[kBlockCount - 1]);
  const auto k = static_cast<std::uint64_t>(config.class_count);
  r.baseline_total = backbone + (c5 * 4 * c5 + 4 * c5) + (4 * c5 * k + k);
  r.classifier_width_percent = 100.0 * classifier_width / static_cast<double>(4 * c5);
  r.overhead_vs_baseline_percent = percent_delta(r.paper_convention_total, r.baseline_total);
  r.strict_overhead_percent = percent_delta(r.strict_total, r.baseline_total);

  for (const auto& row : trace) r.flops_estimate += row.macs;
  return r;
}

std::vector<std::size_t> block_sides(const ShapeTrace& trace) {
  std::vector<std::size_t> sides;
  for (const auto& [name, shape] : trace) {
    // "backbone.block<k>" rows carry block outputs
    if (name.starts_with("backbone.block") && name.find('.', 9) == std::string::npos) {
      sides.push_back(shape.at(2));
    }
  }
  return sides;
}

std::vector<OverheadRow> overhead_report(const std::vector<std::string>& variants) {
  std::vector<OverheadRow> out;
  for (const auto& name : variants) {
    const VariantConfig config = resolve_variant(name);
    const ExMobileViT<float> model(config, 0);
    const AuditReport r = count_params(model);
    out.push_back({config.name, r.classifier_width, r.classifier_width_percent, r.strict_total,
                   r.paper_convention_total, r.baseline_total, r.strict_overhead_percent,
                   r.overhead_vs_baseline_percent});
  }
  return out;
}

std::string format_millions(std::uint64_t count) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3fM", static_cast<double>(count) / 1e6);
  return buf;
}

std::string format_percent(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f%%", value);
  return buf;
}

std::string render_table(const AuditReport& r) {
  std::size_t name_w = 5, kind_w = 4, shape_w = 5;
  for (const auto& row : r.rows) {
    name_w = std::max(name_w, row.name.size());
    kind_w = std::max(kind_w, row.kind.size());
    shape_w = std::max(shape_w, shape_text(row.shape).size());
  }
  std::ostringstream os;
  os << pad("layer", name_w) << "  " << pad("kind", kind_w) << "  " << pad("shape", shape_w)
     << "  " << pad("params", 10, true) << '\n';
  for (const auto& row : r.rows) {
    os << pad(row.name, name_w) << "  " << pad(row.kind, kind_w) << "  "
       << pad(shape_text(row.shape), shape_w) << "  "
       << pad(std::to_string(row.param_count), 10, true) << '\n';
  }
  os << '\n'
     << "variant                 " << r.variant << " (" << profile_name(r.profile) << ")\n"
     << "classifier width        " << r.classifier_width << " ("
     << pct_text(r.classifier_width_percent) << "% of baseline)\n"
     << "strict total            " << r.strict_total << " (" << format_millions(r.strict_total)
     << ", " << format_percent(r.strict_overhead_percent) << ")\n"
     << "paper-convention total  " << r.paper_convention_total << " ("
     << format_millions(r.paper_convention_total) << ", "
     << format_percent(r.overhead_vs_baseline_percent) << ")\n"
     << "baseline total          " << r.baseline_total << " ("
     << format_millions(r.baseline_total) << ")\n"
     << "MACs @" << r.input_size << pad("", 17 - std::to_string(r.input_size).size())
     << r.flops_estimate << '\n';
  return os.str();
}

nlohmann::ordered_json to_json(const AuditReport& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["profile"] = std::string(profile_name(r.profile));
  j["class_count"] = r.class_count;
  j["input_size"] = r.input_size;
  j["classifier_width"] = r.classifier_width;
  j["classifier_width_percent"] = rounded(r.classifier_width_percent, 4);
  j["strict_total"] = r.strict_total;
  j["paper_convention_total"] = r.paper_convention_total;
  j["baseline_total"] = r.baseline_total;
  j["strict_total_m"] = format_millions(r.strict_total);
  j["paper_convention_total_m"] = format_millions(r.paper_convention_total);
  j["overhead_vs_baseline_percent"] = rounded(r.overhead_vs_baseline_percent, 4);
  j["strict_overhead_percent"] = rounded(r.strict_overhead_percent, 4);
  j["flops_estimate"] = r.flops_estimate;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    nlohmann::ordered_json o;
    o["name"] = row.name;
    o["kind"] = row.kind;
    o["shape"] = shape_json(row.shape);
    o["param_count"] = row.param_count;
    rows.push_back(std::move(o));
  }
  j["rows"] = std::move(rows);
  return j;
}

std::string render_table(const std::vector<OverheadRow>& rows) {
  std::size_t name_w = 7;
  for (const auto& r : rows) name_w = std::max(name_w, r.variant.size());
  std::ostringstream os;
  os << pad("variant", name_w) << "  " << pad("width", 6, true) << "  " << pad("width%", 7, true)
     << "  " << pad("strict", 18, true) << "  " << pad("paper-convention", 18, true) << '\n';
  for (const auto& r : rows) {
    os << pad(r.variant, name_w) << "  " << pad(std::to_string(r.classifier_width), 6, true)
       << "  " << pad(pct_text(r.width_percent), 7, true) << "  "
       << pad(format_millions(r.strict_total) + "(" + format_percent(r.strict_delta_percent) +
                  ")",
              18, true)
       << "  "
       << pad(format_millions(r.paper_convention_total) + "(" +
                  format_percent(r.paper_delta_percent) + ")",
              18, true)
       << '\n';
  }
  return os.str();
}

nlohmann::ordered_json to_json(const std::vector<OverheadRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["variant"] = r.variant;
    o["classifier_width"] = r.classifier_width;
    o["width_percent"] = rounded(r.width_percent, 4);
    o["strict_total"] = r.strict_total;
    o["paper_convention_total"] = r.paper_convention_total;
    o["baseline_total"] = r.baseline_total;
    o["strict_delta_percent"] = rounded(r.strict_delta_percent, 4);
    o["paper_delta_percent"] = rounded(r.paper_delta_percent, 4);
    arr.push_back(std::move(o));
  }
  return arr;
}

std::string render_trace(const Trace& trace) {
  std::size_t name_w = 5, kind_w = 4;
  for (const auto& row : trace) {
    name_w = std::max(name_w, row.name.size());
    kind_w = std::max(kind_w, row.kind.size());
  }
  std::ostringstream os;
  os << pad("layer", name_w) << "  " << pad("kind", kind_w) << "  output\n";
  for (const auto& row : trace) {
    os << pad(row.name, name_w) << "  " << pad(row.kind, kind_w) << "  "
       << shape_text(row.out_shape) << '\n';
  }
  return os.str();
}

nlohmann::ordered_json trace_to_json(const Trace& trace) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& row : trace) {
    nlohmann::ordered_json o;
    o["name"] = row.name;
    o["kind"] = row.kind;
    o["shape"] = shape_json(row.out_shape);
    o["macs"] = row.macs;
    arr.push_back(std::move(o));
  }
  return arr;
}

}  // namespace exvt
