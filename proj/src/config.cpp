#include "exvt/config.hpp"

#include <algorithm>
#include <charconv>
#include <map>

#include "exvt/exshortcut.hpp"

namespace exvt {

std::string_view profile_name(Profile p) {
  return p == Profile::imagenet ? "imagenet" : "tiny";
}

Profile parse_profile(std::string_view text) {
  if (text == "imagenet") return Profile::imagenet;
  if (text == "tiny") return Profile::tiny;
  throw ConfigError("unknown profile '" + std::string(text) + "' (expected imagenet or tiny)");
}

namespace {

constexpr std::array<int, kBlockCount> kImagenetChannels{32, 64, 96, 128, 160};
constexpr int kTinyDivisor = 8;

struct BaseVariant {
  const char* name;
  std::array<Rational, kBlockCount> rho;
};

const std::vector<BaseVariant>& base_variants() {
  static const std::vector<BaseVariant> table = {
      {"mobilevit-s", {0, 0, 0, 0, 4}},
      {"exmvit-576", {0, 0, Rational(1, 3), Rational(1, 2), 3}},
      {"exmvit-640", {0, 0, Rational(1, 3), 1, 3}},
      {"exmvit-704", {0, 0, Rational(1, 3), Rational(1, 4), 4}},
      {"exmvit-864", {0, 0, 1, 1, 4}},
      {"exmvit-928", {0, 0, Rational(4, 3), Rational(5, 4), 4}},
  };
  return table;
}

constexpr std::string_view kTinySuffix = "-tiny";

VariantConfig make_variant(const BaseVariant& base, Profile profile) {
  VariantConfig c;
  c.rho = base.rho;
  c.profile = profile;
  if (profile == Profile::imagenet) {
    c.name = base.name;
    c.block_channels = kImagenetChannels;
    c.class_count = 1000;
    c.input_size = 256;
  } else {
    c.name = std::string(base.name) + std::string(kTinySuffix);
    for (std::size_t k = 0; k < kBlockCount; ++k) {
      c.block_channels[k] = kImagenetChannels[k] / kTinyDivisor;
    }
    c.class_count = 8;
    c.input_size = 64;
  }
  return c;
}

const std::map<std::string, VariantConfig, std::less<>>& registry() {
  static const auto table = [] {
    std::map<std::string, VariantConfig, std::less<>> m;
    for (Profile p : {Profile::imagenet, Profile::tiny}) {
      for (const auto& base : base_variants()) {
        auto c = make_variant(base, p);
        m.emplace(c.name, c);
      }
    }
    return m;
  }();
  return table;
}

std::string base_name(std::string_view name) {
  if (name.size() > kTinySuffix.size() && name.ends_with(kTinySuffix)) {
    name.remove_suffix(kTinySuffix.size());
  }
  return std::string(name);
}

// Numeric suffix of "exmvit-<n>" names (ignoring a trailing "-tiny").
std::optional<int> name_width(std::string_view name) {
  const std::string base = base_name(name);
  constexpr std::string_view prefix = "exmvit-";
  if (!std::string_view(base).starts_with(prefix)) return std::nullopt;
  int value = 0;
  const char* first = base.data() + prefix.size();
  const char* last = base.data() + base.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return value;
}

std::string join_names() {
  std::string out;
  for (const auto& n : registered_variants()) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

}  // namespace

BackboneSpec backbone_spec(const VariantConfig& config) {
  BackboneSpec s;
  s.block_channels = config.block_channels;
  s.stem_channels = std::max(1, config.block_channels[0] / 2);
  if (config.profile == Profile::imagenet) {
    s.transformer_dim = {144, 192, 240};
    s.transformer_depth = {2, 4, 3};
  } else {
    s.transformer_dim = {16, 16, 16};
    s.transformer_depth = {1, 1, 1};
  }
  return s;
}

const std::vector<std::string>& registered_variants() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (Profile p : {Profile::imagenet, Profile::tiny}) {
      for (const auto& base : base_variants()) out.push_back(make_variant(base, p).name);
    }
    return out;
  }();
  return names;
}

VariantConfig resolve_variant(std::string_view name, const VariantOverrides& overrides) {
  const auto& reg = registry();
  auto it = reg.find(name);
  if (it == reg.end()) {
    throw ConfigError("unknown variant '" + std::string(name) + "'; valid variants: " +
                      join_names());
  }
  VariantConfig config = it->second;
  if (overrides.profile && *overrides.profile != config.profile) {
    std::string target = base_name(name);
    if (*overrides.profile == Profile::tiny) target += kTinySuffix;
    config = reg.at(target);
  }
  if (overrides.class_count) config.class_count = *overrides.class_count;
  if (overrides.input_size) config.input_size = *overrides.input_size;
  if (overrides.rho && *overrides.rho != config.rho) {
    config.rho = *overrides.rho;
    config.name = "custom";
    if (config.profile == Profile::tiny) config.name += kTinySuffix;
  }
  auto violations = validate(config, overrides.allow_early_shortcuts);
  if (!violations.empty()) {
    std::string msg = "invalid configuration for '" + config.name + "':";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ConfigError(msg);
  }
  return config;
}

std::vector<std::string> validate(const VariantConfig& config, bool allow_early_shortcuts) {
  std::vector<std::string> out;
  bool widths_ok = true;
  bool any_active = false;
  for (std::size_t k = 0; k < kBlockCount; ++k) {
    const auto& rho = config.rho[k];
    const int ch = config.block_channels[k];
    const std::string label = "rho" + std::to_string(k + 1);
    if (ch <= 0) {
      out.push_back("block_channels[" + std::to_string(k) + "] must be positive");
      widths_ok = false;
      continue;
    }
    if (rho.is_negative()) {
      out.push_back(label + " = " + rho.to_string() + " is negative");
      widths_ok = false;
      continue;
    }
    if (!rho.is_zero()) {
      any_active = true;
      if (!rho.times(ch)) {
        out.push_back(label + " = " + rho.to_string() + " gives fractional width " +
                      std::to_string(rho.num() * ch) + "/" + std::to_string(rho.den()) +
                      " for " + std::to_string(ch) + " channels");
        widths_ok = false;
      }
      if (k < 2 && !allow_early_shortcuts) {
        out.push_back(label + " must be 0 (early shortcuts need --allow-early-shortcuts)");
      }
    }
  }
  if (!any_active) out.push_back("at least one rho must be positive");
  if (config.class_count <= 0) out.push_back("class_count must be positive");
  if (config.input_size <= 0 || config.input_size % 32 != 0) {
    out.push_back("input_size " + std::to_string(config.input_size) +
                  " must be a positive multiple of 32");
  } else {
    const int patch = backbone_spec(config).patch;
    if ((config.input_size / 32) % patch != 0) {
      out.push_back("input_size " + std::to_string(config.input_size) +
                    " leaves an 8x-downsampled map not divisible by patch " +
                    std::to_string(patch) + " (use a multiple of " + std::to_string(32 * patch) +
                    ")");
    }
  }
  if (widths_ok && any_active) {
    if (auto encoded = name_width(config.name)) {
      const int width = expand_width(config.rho, config.block_channels);
      const int expected = config.profile == Profile::tiny ? *encoded / kTinyDivisor : *encoded;
      if (width != expected) {
        out.push_back("name '" + config.name + "' encodes width " + std::to_string(expected) +
                      " but rho gives " + std::to_string(width));
      }
    }
  }
  return out;
}

nlohmann::json to_json(const VariantConfig& config) {
  nlohmann::json rho = nlohmann::json::array();
  for (const auto& r : config.rho) rho.push_back(r.to_string());
  return nlohmann::json{{"name", config.name},
                        {"rho", rho},
                        {"block_channels", config.block_channels},
                        {"class_count", config.class_count},
                        {"input_size", config.input_size},
                        {"profile", profile_name(config.profile)}};
}

VariantConfig config_from_json(const nlohmann::json& doc) {
  static const std::array<std::string_view, 6> fields = {
      "name", "rho", "block_channels", "class_count", "input_size", "profile"};
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (std::find(fields.begin(), fields.end(), key) == fields.end()) {
      throw ConfigError("unknown config field '" + key + "'");
    }
  }
  for (auto f : fields) {
    if (!doc.contains(std::string(f))) {
      throw ConfigError("missing config field '" + std::string(f) + "'");
    }
  }
  VariantConfig c;
  try {
    c.name = doc.at("name").get<std::string>();
    const auto& rho = doc.at("rho");
    const auto& ch = doc.at("block_channels");
    if (!rho.is_array() || rho.size() != kBlockCount) {
      throw ConfigError("rho must be an array of 5 \"num/den\" strings");
    }
    if (!ch.is_array() || ch.size() != kBlockCount) {
      throw ConfigError("block_channels must be an array of 5 integers");
    }
    for (std::size_t k = 0; k < kBlockCount; ++k) {
      if (!rho[k].is_string()) throw ConfigError("rho entries must be strings like \"1/3\"");
      c.rho[k] = Rational::parse(rho[k].get<std::string>());
      c.block_channels[k] = ch[k].get<int>();
    }
    c.class_count = doc.at("class_count").get<int>();
    c.input_size = doc.at("input_size").get<int>();
    c.profile = parse_profile(doc.at("profile").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

std::string serialize_config(const VariantConfig& config) {
  return to_json(config).dump(2) + "\n";
}

VariantConfig parse_config(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(doc);
}

}  // namespace exvt
