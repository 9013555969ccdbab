// exvt: build, inspect, train and run ExMobileViT models.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "exvt/audit.hpp"
#include "exvt/config.hpp"
#include "exvt/exshortcut.hpp"
#include "exvt/io.hpp"
#include "exvt/train.hpp"

namespace {

using namespace exvt;

struct ModelFlags {
  std::string variant;
  std::string profile;
  std::optional<int> classes;
  std::optional<int> input_size;
  std::string rho;
  bool allow_early = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f, bool with_rho) {
  cmd->add_option("--profile", f.profile, "imagenet or tiny (selects the variant's mirror)");
  cmd->add_option("--classes", f.classes, "override the class count");
  cmd->add_option("--input-size", f.input_size, "override the input side");
  if (with_rho) {
    cmd->add_option("--rho", f.rho, "five comma-separated ratios, e.g. 0,0,1/3,1,3");
    cmd->add_flag("--allow-early-shortcuts", f.allow_early, "permit rho_1 and rho_2");
  }
}

std::array<Rational, kBlockCount> parse_rho(const std::string& text) {
  std::array<Rational, kBlockCount> rho{};
  std::stringstream ss(text);
  std::string item;
  std::size_t k = 0;
  while (std::getline(ss, item, ',')) {
    if (k == kBlockCount) throw ConfigError("--rho takes exactly 5 values");
    rho[k++] = Rational::parse(item);
  }
  if (k != kBlockCount) throw ConfigError("--rho takes exactly 5 values");
  return rho;
}

VariantConfig resolve(const ModelFlags& f) {
  VariantOverrides o;
  o.class_count = f.classes;
  o.input_size = f.input_size;
  if (!f.profile.empty()) o.profile = parse_profile(f.profile);
  if (!f.rho.empty()) o.rho = parse_rho(f.rho);
  o.allow_early_shortcuts = f.allow_early;
  return resolve_variant(f.variant, o);
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_build(const ModelFlags& f, std::uint64_t seed, const std::string& out) {
  const VariantConfig config = resolve(f);
  const ExMobileViT<float> model(config, seed, f.allow_early);
  save_weights(out, snapshot(model));
  const AuditReport r = count_params(model);
  std::cout << "wrote " << out << ": " << config.name << " (" << profile_name(config.profile)
            << "), " << r.strict_total << " parameters, classifier width "
            << r.classifier_width << '\n';
  return 0;
}

int cmd_audit(const ModelFlags& f, const std::string& weights, const std::string& format,
              bool overhead) {
  const bool json = format == "json";
  if (overhead) {
    std::vector<std::string> names;
    if (!f.variant.empty()) {
      names.push_back(resolve(f).name);
    } else {
      const Profile p = f.profile.empty() ? Profile::imagenet : parse_profile(f.profile);
      for (const auto& n : registered_variants()) {
        if (resolve_variant(n).profile == p) names.push_back(n);
      }
    }
    const auto rows = overhead_report(names);
    std::cout << (json ? to_json(rows).dump(2) + "\n" : render_table(rows));
    return 0;
  }
  AuditReport report;
  if (!weights.empty()) {
    report = count_params(instantiate(load_weights(weights)));
  } else {
    const VariantConfig config = resolve(f);
    report = count_params(ExMobileViT<float>(config, 0, f.allow_early));
  }
  std::cout << (json ? to_json(report).dump(2) + "\n" : render_table(report));
  return 0;
}

int cmd_trace(const ModelFlags& f, int input_size, const std::string& format) {
  const VariantConfig config = resolve(f);
  const ExMobileViT<float> model(config, 0, f.allow_early);
  const int size = input_size > 0 ? input_size : config.input_size;
  const ShapeTrace shapes = trace_shapes(model, size);
  if (format == "json") {
    nlohmann::ordered_json j;
    j["variant"] = config.name;
    j["input_size"] = size;
    j["block_sides"] = block_sides(shapes);
    j["layers"] = trace_to_json(model.trace(static_cast<std::size_t>(size)));
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << render_trace(model.trace(static_cast<std::size_t>(size))) << "\nblock sides:";
    for (auto s : block_sides(shapes)) std::cout << ' ' << s;
    std::cout << '\n';
  }
  return 0;
}

struct TrainFlags {
  int epochs = 50;
  std::uint64_t seed = 0;
  std::string data = "synthetic";
  std::optional<double> ema;
  bool ema_flag = false;
  int batch_size = 32;
  int samples_per_class = 64;
  std::optional<int> warmup;
  std::string out;
  std::string history;
};

int cmd_train(const ModelFlags& f, const TrainFlags& t) {
  if (t.data != "synthetic") throw ConfigError("only --data synthetic is supported");
  const VariantConfig config = resolve(f);
  const ExMobileViT<float> model(config, t.seed, f.allow_early);
  const SyntheticDataset data(
      SyntheticSpec{config.class_count, t.samples_per_class, config.input_size, t.seed, 0.05});

  TrainConfig tc;
  tc.epochs = t.epochs;
  tc.seed = t.seed;
  tc.batch_size = t.batch_size;
  tc.total_iters = t.epochs * static_cast<int>(data.size() / static_cast<std::size_t>(t.batch_size));
  tc.warmup_iters = t.warmup.value_or(tc.total_iters / 10);
  if (t.ema) {
    tc.ema_decay = *t.ema;
  } else if (t.ema_flag) {
    tc.ema_decay = kDefaultEmaDecay;
  }

  TrainHooks hooks;
  hooks.checkpoint = t.out;
  hooks.on_epoch = [](const EpochRow& r) {
    std::cout << "epoch " << r.epoch << "  loss " << fixed(r.loss) << "  acc " << fixed(r.acc)
              << std::endl;
  };
  const TrainResult result = train_loop(model, data, tc, hooks);
  const std::string csv = t.history.empty() ? t.out + ".csv" : t.history;
  std::ofstream hist(csv);
  if (!hist) throw FormatError("cannot open " + csv + " for writing");
  write_history_csv(hist, result.history);
  std::cout << "final train accuracy (eval mode) " << fixed(result.final_accuracy) << '\n'
            << "wrote " << t.out << " and " << csv << '\n';
  return 0;
}

struct GradFlags {
  std::uint64_t seed = 0;
  double tolerance = 1e-3;
  std::size_t samples = 256;
  double step = 1e-3;
  int stencil = 5;
  std::size_t batch = 2;
  std::size_t top = 10;
};

int cmd_grad_check(const ModelFlags& f, const GradFlags& g) {
  const VariantConfig config = resolve(f);
  if (config.profile != Profile::tiny) {
    throw ConfigError("grad-check runs on tiny-profile variants only");
  }
  if (g.stencil != 3 && g.stencil != 5) throw ConfigError("--stencil must be 3 or 5");
  const ExMobileViT<float> model(config, g.seed, f.allow_early);
  const SyntheticDataset data(SyntheticSpec{config.class_count, 1, config.input_size, g.seed, 0.05});
  std::vector<std::size_t> idx(std::min(g.batch, data.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto labels = data.batch_labels(idx);

  GradCheckOptions o;
  o.samples = g.samples;
  o.step = g.step;
  o.tolerance = g.tolerance;
  o.seed = g.seed;
  o.stencil = g.stencil == 3 ? Stencil::three_point : Stencil::five_point;
  const GradCheckReport r = grad_check(model, data.batch_images(idx), labels, o);

  std::cout << "checked " << r.entries.size() << " scalars over kinds:";
  for (const auto& k : r.kinds) std::cout << ' ' << k;
  std::cout << "\nworst offenders:\n";
  for (const auto& e : r.worst(g.top)) {
    char line[256];
    std::snprintf(line, sizeof line, "  %-56s %6zu  % .6e  % .6e  %.3e\n", e.param.c_str(),
                  e.index, e.analytic, e.numeric, e.rel_err);
    std::cout << line;
  }
  char summary[128];
  std::snprintf(summary, sizeof summary, "max rel err %.3e (tolerance %.1e): %s\n",
                r.max_rel_err, r.tolerance, r.passed ? "PASS" : "FAIL");
  std::cout << summary;
  return r.passed ? 0 : 1;
}

int cmd_infer(const std::string& weights, const std::string& image, std::size_t top) {
  const ExMobileViT<float> model = instantiate(load_weights(weights));
  const Tensor input = image_to_input(read_pnm(image),
                                      static_cast<std::size_t>(model.config().input_size));
  const Tensor probs = softmax(model.forward(input, Mode::eval));
  std::vector<std::size_t> order(probs.numel());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  order.resize(std::min(top, order.size()));
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::cout << i + 1 << "  class " << order[i] << "  " << fixed(probs[order[i]]) << '\n';
  }
  return 0;
}

int cmd_export(const std::string& weights, const std::string& image, int block,
               bool classifier_input, const std::string& out) {
  if (!classifier_input && (block < 1 || block > static_cast<int>(kBlockCount))) {
    throw ConfigError("block " + std::to_string(block) + " out of range; valid blocks are 1..5");
  }
  const ExMobileViT<float> model = instantiate(load_weights(weights));
  const Tensor input = image_to_input(read_pnm(image),
                                      static_cast<std::size_t>(model.config().input_size));
  const BlockOutputs<float> blocks = model.forward_collect(input, Mode::eval);
  const Tensor t = classifier_input ? model.classifier_input(blocks)
                                    : blocks.features[static_cast<std::size_t>(block - 1)];
  write_raw_f32(out, t);
  nlohmann::ordered_json side;
  side["variant"] = model.config().name;
  if (classifier_input) {
    side["block"] = "classifier_input";
  } else {
    side["block"] = block;
  }
  side["shape"] = t.shape();
  side["dtype"] = "float32";
  side["byte_order"] = "little";
  side["input_size"] = model.config().input_size;
  write_json_file(sidecar_path(out), side);
  std::cout << "wrote " << out << " " << to_string(t.shape()) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ExMobileViT toolkit"};
  app.require_subcommand(1);

  ModelFlags build_mf, audit_mf, trace_mf, train_mf, grad_mf;
  std::uint64_t seed = 0;
  std::string out, weights, image, format = "table";

  auto* build = app.add_subcommand("build", "initialize a model and write a weights file");
  build->add_option("--variant", build_mf.variant, "registered variant name")->required();
  build->add_option("--seed", seed, "initialization seed");
  build->add_option("--out", out, "output weights file")->required();
  add_model_flags(build, build_mf, true);

  bool overhead = false;
  auto* audit = app.add_subcommand("audit", "parameter counts and overhead");
  auto* av = audit->add_option("--variant", audit_mf.variant, "registered variant name");
  auto* aw = audit->add_option("--weights", weights, "weights file")->check(CLI::ExistingFile);
  av->excludes(aw);
  audit->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));
  audit->add_flag("--overhead", overhead, "compare variants against the baseline");
  add_model_flags(audit, audit_mf, true);

  int trace_size = 0;
  auto* trace = app.add_subcommand("trace", "symbolic shape trace");
  trace->add_option("--variant", trace_mf.variant, "registered variant name")->required();
  trace->add_option("--input-size", trace_size, "input side (default: the variant's)");
  trace->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));
  trace->add_option("--profile", trace_mf.profile, "imagenet or tiny");
  trace->add_option("--classes", trace_mf.classes, "override the class count");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "toy training on synthetic data");
  train->add_option("--variant", train_mf.variant, "registered variant name")
      ->default_val("exmvit-928-tiny");
  train->add_option("--profile", train_mf.profile, "imagenet or tiny")->default_val("tiny");
  train->add_option("--epochs", tf.epochs)->check(CLI::PositiveNumber);
  train->add_option("--seed", tf.seed);
  train->add_option("--data", tf.data)->check(CLI::IsMember({"synthetic"}));
  auto* ema_value = train->add_option("--ema-decay", tf.ema, "EMA decay (enables EMA)");
  train->add_flag("--ema", tf.ema_flag, "enable EMA with decay 0.9995")->excludes(ema_value);
  train->add_option("--batch-size", tf.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--samples-per-class", tf.samples_per_class)->check(CLI::PositiveNumber);
  train->add_option("--warmup", tf.warmup, "warm-up iterations (default: total / 10)");
  train->add_option("--out", tf.out, "checkpoint path")->required();
  train->add_option("--history", tf.history, "CSV path (default: <out>.csv)");

  GradFlags gf;
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient check");
  grad->add_option("--variant", grad_mf.variant)->default_val("exmvit-928-tiny");
  grad->add_option("--seed", gf.seed);
  grad->add_option("--tolerance", gf.tolerance);
  grad->add_option("--samples", gf.samples);
  grad->add_option("--step", gf.step);
  grad->add_option("--stencil", gf.stencil, "3 or 5 point central difference");
  grad->add_option("--batch", gf.batch);
  grad->add_option("--top", gf.top, "offenders to list");

  std::size_t top = 5;
  auto* infer = app.add_subcommand("infer", "classify a PPM/PGM image");
  infer->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  infer->add_option("--image", image)->required();
  infer->add_option("--top", top)->check(CLI::PositiveNumber);

  int block = 0;
  bool classifier_input = false;
  auto* exp = app.add_subcommand("export-features", "dump a block output or classifier input");
  exp->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  exp->add_option("--image", image)->required();
  auto* eb = exp->add_option("--block", block, "block index 1..5");
  auto* ec = exp->add_flag("--export-classifier-input", classifier_input,
                           "dump the concatenated classifier input");
  eb->excludes(ec);
  exp->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*build) return cmd_build(build_mf, seed, out);
    if (*audit) {
      if (audit_mf.variant.empty() && weights.empty() && !overhead) {
        throw CLI::RequiredError("--variant or --weights");
      }
      return cmd_audit(audit_mf, weights, format, overhead);
    }
    if (*trace) return cmd_trace(trace_mf, trace_size, format);
    if (*train) return cmd_train(train_mf, tf);
    if (*grad) return cmd_grad_check(grad_mf, gf);
    if (*infer) return cmd_infer(weights, image, top);
    if (*exp) {
      if (eb->count() == 0 && !classifier_input) {
        throw CLI::RequiredError("--block or --export-classifier-input");
      }
      return cmd_export(weights, image, block, classifier_input, out);
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
