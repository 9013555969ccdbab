#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exvt/config.hpp"
#include "exvt/exshortcut.hpp"
#include "exvt/tensor.hpp"

namespace exvt {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Weights file
//
//   "EXVT"  u16 version  u32 n  <n bytes metadata JSON>
//   u32 count, then per tensor:
//     u32 n  <n bytes name>  u32 rank  u32 extent * rank  f32 payload
//
// All integers and floats little-endian. Tensors appear in visit() order.

inline constexpr std::uint16_t kWeightsVersion = 1;

struct WeightsMetadata {
  VariantConfig config;
  std::uint64_t seed = 0;
  bool allow_early_shortcuts = false;

  friend bool operator==(const WeightsMetadata&, const WeightsMetadata&) = default;
};

struct WeightsEntry {
  std::string name;
  Tensor tensor;
};

struct WeightsFile {
  WeightsMetadata metadata;
  std::vector<WeightsEntry> tensors;
};

nlohmann::ordered_json metadata_to_json(const WeightsMetadata& meta);
WeightsMetadata metadata_from_json(const nlohmann::json& doc);

void write_weights(std::ostream& out, const WeightsFile& file);
WeightsFile read_weights(std::istream& in);

void save_weights(const std::filesystem::path& path, const WeightsFile& file);
WeightsFile load_weights(const std::filesystem::path& path);

WeightsFile snapshot(const ExMobileViT<float>& model);

// Copies the file's tensors into `model`. Throws FormatError when the tensor
// table does not match the model's names and shapes exactly.
void load_into(const ExMobileViT<float>& model, const WeightsFile& file);

// Rebuilds the model described by the metadata and loads its tensors.
ExMobileViT<float> instantiate(const WeightsFile& file);

// ---------------------------------------------------------------------------
// Images

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> rgb;  // height * width * 3, row-major, values in [0,1]
};

// Binary PPM (P6) or PGM (P5, replicated to RGB). Errors carry the byte
// offset where parsing failed.
Image parse_pnm(const std::vector<std::uint8_t>& bytes);
Image read_pnm(const std::filesystem::path& path);

// 8-bit P6 encoding; values are clamped to [0,1] and rounded.
std::vector<std::uint8_t> encode_ppm(const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Bilinear resize (half-pixel centers) to size x size, channel-first
// [1,3,size,size].
Tensor image_to_input(const Image& image, std::size_t size);

// ---------------------------------------------------------------------------
// Feature export: raw little-endian f32 plus a JSON sidecar.

void write_raw_f32(const std::filesystem::path& path, const Tensor& t);
Tensor read_raw_f32(const std::filesystem::path& path, const Shape& shape);

std::filesystem::path sidecar_path(const std::filesystem::path& raw);

}  // namespace exvt
