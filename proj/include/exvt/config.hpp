#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "exvt/rational.hpp"

namespace exvt {

inline constexpr std::size_t kBlockCount = 5;

enum class Profile { imagenet, tiny };

std::string_view profile_name(Profile p);
Profile parse_profile(std::string_view text);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct VariantConfig {
  std::string name;
  std::array<Rational, kBlockCount> rho{};
  std::array<int, kBlockCount> block_channels{};
  int class_count = 1000;
  Profile profile = Profile::imagenet;
  int input_size = 256;

  friend bool operator==(const VariantConfig&, const VariantConfig&) = default;
};

// Internal backbone dimensions implied by a config's profile and widths.
struct BackboneSpec {
  int stem_channels = 16;
  std::array<int, kBlockCount> block_channels{};
  std::array<int, 3> transformer_dim{};  // blocks 3..5
  std::array<int, 3> transformer_depth{};
  int heads = 4;
  int ffn_multiplier = 2;
  int expansion = 4;
  int patch = 2;
};

BackboneSpec backbone_spec(const VariantConfig& config);

// Names of every registered variant, imagenet profile first, in registry order.
const std::vector<std::string>& registered_variants();

struct VariantOverrides {
  std::optional<int> class_count;
  std::optional<int> input_size;
  std::optional<Profile> profile;
  std::optional<std::array<Rational, kBlockCount>> rho;
  bool allow_early_shortcuts = false;
};

// Looks up a registered variant and applies overrides. A profile override
// selects the mirror of the same variant in that profile. Throws ConfigError
// for unknown names or when the result fails validation.
VariantConfig resolve_variant(std::string_view name, const VariantOverrides& overrides = {});

// Every violated invariant, as human-readable messages. Empty means valid.
std::vector<std::string> validate(const VariantConfig& config,
                                  bool allow_early_shortcuts = false);

nlohmann::json to_json(const VariantConfig& config);
// Strict: missing or unknown fields throw ConfigError. Does not validate.
VariantConfig config_from_json(const nlohmann::json& doc);

std::string serialize_config(const VariantConfig& config);
VariantConfig parse_config(std::string_view text);

}  // namespace exvt
