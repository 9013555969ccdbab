#include "exvt/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace exvt {

namespace {

constexpr char kMagic[4] = {'E', 'X', 'V', 'T'};
constexpr std::uint32_t kMaxRank = 8;

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_bytes(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void read(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("weights: truncated " + std::string(what) + " at byte " +
                        std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(reinterpret_cast<char*>(b), 4, what);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }

  std::uint16_t u16(const char* what) {
    unsigned char b[2];
    read(reinterpret_cast<char*>(b), 2, what);
    return static_cast<std::uint16_t>(b[0] | b[1] << 8);
  }

  std::string bytes(const char* what) {
    const std::uint32_t n = u32(what);
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

}  // namespace

nlohmann::ordered_json metadata_to_json(const WeightsMetadata& meta) {
  nlohmann::ordered_json j;
  j["variant"] = meta.config.name;
  j["profile"] = std::string(profile_name(meta.config.profile));
  j["seed"] = meta.seed;
  j["class_count"] = meta.config.class_count;
  j["allow_early_shortcuts"] = meta.allow_early_shortcuts;
  j["config"] = nlohmann::ordered_json::parse(serialize_config(meta.config));
  return j;
}

WeightsMetadata metadata_from_json(const nlohmann::json& doc) {
  WeightsMetadata meta;
  try {
    meta.config = config_from_json(doc.at("config"));
    meta.seed = doc.at("seed").get<std::uint64_t>();
    meta.allow_early_shortcuts = doc.at("allow_early_shortcuts").get<bool>();
    if (doc.at("variant").get<std::string>() != meta.config.name ||
        doc.at("class_count").get<int>() != meta.config.class_count ||
        parse_profile(doc.at("profile").get<std::string>()) != meta.config.profile) {
      throw FormatError("weights: metadata summary disagrees with embedded config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights: bad metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weights: bad metadata: ") + e.what());
  }
  return meta;
}

void write_weights(std::ostream& out, const WeightsFile& file) {
  out.write(kMagic, 4);
  put_u16(out, kWeightsVersion);
  put_bytes(out, metadata_to_json(file.metadata).dump());
  put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& [name, tensor] : file.tensors) {
    put_bytes(out, name);
    put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto e : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw FormatError("weights: write failed");
}

WeightsFile read_weights(std::istream& in) {
  Reader r(in);
  char magic[4];
  r.read(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("weights: bad magic at byte 0");
  const std::uint16_t version = r.u16("version");
  if (version != kWeightsVersion) {
    throw FormatError("weights: unsupported version " + std::to_string(version));
  }
  WeightsFile file;
  const std::string meta = r.bytes("metadata");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("weights: metadata is not JSON: ") + e.what());
  }
  file.metadata = metadata_from_json(doc);

  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightsEntry entry;
    entry.name = r.bytes("tensor name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > kMaxRank) {
      throw FormatError("weights: tensor " + entry.name + " has rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("extent");
    std::vector<float> values(numel(shape));
    for (auto& v : values) v = std::bit_cast<float>(r.u32("payload"));
    entry.tensor = Tensor(std::move(shape), std::move(values));
    file.tensors.push_back(std::move(entry));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("weights: trailing bytes after byte " + std::to_string(r.offset()));
  }
  return file;
}

void save_weights(const std::filesystem::path& path, const WeightsFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_weights(out, file);
}

WeightsFile load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_weights(in);
}

WeightsFile snapshot(const ExMobileViT<float>& model) {
  WeightsFile file;
  file.metadata = {model.config(), model.seed(), model.allows_early_shortcuts()};
  for (const auto& [info, tensor] : named_tensors(model)) {
    file.tensors.push_back({info.name, tensor.clone()});
  }
  return file;
}

void load_into(const ExMobileViT<float>& model, const WeightsFile& file) {
  auto dst = named_tensors(model);
  if (dst.size() != file.tensors.size()) {
    throw FormatError("weights: file has " + std::to_string(file.tensors.size()) +
                      " tensors, model expects " + std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto& src = file.tensors[i];
    if (src.name != dst[i].info.name || src.tensor.shape() != dst[i].tensor.shape()) {
      throw FormatError("weights: tensor " + std::to_string(i) + " is " + src.name + " " +
                        to_string(src.tensor.shape()) + ", model expects " +
                        dst[i].info.name + " " + to_string(dst[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto out = dst[i].tensor.data();
    auto in = file.tensors[i].tensor.data();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

ExMobileViT<float> instantiate(const WeightsFile& file) {
  ExMobileViT<float> model(file.metadata.config, file.metadata.seed,
                           file.metadata.allow_early_shortcuts);
  load_into(model, file);
  return model;
}

// ---------------------------------------------------------------------------

namespace {

class PnmCursor {
 public:
  explicit PnmCursor(const std::vector<std::uint8_t>& bytes) : b_(bytes) {}

  [[noreturn]] void fail(const std::string& msg) const { fail_at(pos_, msg); }
  [[noreturn]] void fail_at(std::size_t offset, const std::string& msg) const {
    throw FormatError("pnm parse error at byte " + std::to_string(offset) + ": " + msg);
  }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) {
      fail(std::string("expected ") + what);
    }
    token_ = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1u << 24)) fail(std::string(what) + " too large");
      ++pos_;
    }
    return v;
  }

  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
  std::size_t token_ = 0;  // start of the last number
};

}  // namespace

Image parse_pnm(const std::vector<std::uint8_t>& bytes) {
  PnmCursor c(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    c.fail("expected magic P6 or P5");
  }
  const bool color = bytes[1] == '6';
  c.pos_ = 2;
  Image img;
  img.width = c.number("width");
  if (img.width == 0) c.fail_at(c.token_, "zero image width");
  img.height = c.number("height");
  if (img.height == 0) c.fail_at(c.token_, "zero image height");
  const std::size_t maxval = c.number("maxval");
  if (maxval == 0 || maxval > 65535) c.fail_at(c.token_, "maxval must be in 1..65535");
  if (c.pos_ >= bytes.size() || !std::isspace(bytes[c.pos_])) {
    c.fail("expected single whitespace after header");
  }
  ++c.pos_;
  const std::size_t channels = color ? 3 : 1;
  const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
  const std::size_t need = img.width * img.height * channels * sample_bytes;
  if (bytes.size() - c.pos_ < need) {
    c.pos_ = bytes.size();
    c.fail("pixel data truncated: need " + std::to_string(need) + " bytes");
  }
  img.rgb.resize(img.width * img.height * 3);
  const double scale = 1.0 / static_cast<double>(maxval);
  std::size_t p = c.pos_;
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      std::size_t v = bytes[p++];
      if (sample_bytes == 2) v = (v << 8) | bytes[p++];
      if (v > maxval) {
        c.pos_ = p - sample_bytes;
        c.fail("sample exceeds maxval");
      }
      const auto f = static_cast<float>(static_cast<double>(v) * scale);
      if (color) {
        img.rgb[i * 3 + ch] = f;
      } else {
        img.rgb[i * 3] = img.rgb[i * 3 + 1] = img.rgb[i * 3 + 2] = f;
      }
    }
  }
  return img;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_pnm(bytes);
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  const std::string header =
      "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : image.rgb) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0f)));
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor image_to_input(const Image& image, std::size_t size) {
  if (size == 0 || image.width == 0 || image.height == 0) {
    throw ShapeError("image_to_input: empty image or target");
  }
  Tensor out(Shape{1, 3, size, size});
  const double sy = static_cast<double>(image.height) / static_cast<double>(size);
  const double sx = static_cast<double>(image.width) / static_cast<double>(size);
  auto src = [&](std::size_t y, std::size_t x, std::size_t c) {
    return static_cast<double>(image.rgb[(y * image.width + x) * 3 + c]);
  };
  for (std::size_t oy = 0; oy < size; ++oy) {
    const double fy = std::max(0.0, (static_cast<double>(oy) + 0.5) * sy - 0.5);
    const auto y0 = std::min(static_cast<std::size_t>(fy), image.height - 1);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < size; ++ox) {
      const double fx = std::max(0.0, (static_cast<double>(ox) + 0.5) * sx - 0.5);
      const auto x0 = std::min(static_cast<std::size_t>(fx), image.width - 1);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src(y0, x0, c) * (1 - wx) + src(y0, x1, c) * wx;
        const double bot = src(y1, x0, c) * (1 - wx) + src(y1, x1, c) * wx;
        out[(c * size + oy) * size + ox] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_raw_f32(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw FormatError("write failed: " + path.string());
}

Tensor read_raw_f32(const std::filesystem::path& path, const Shape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Reader r(in);
  std::vector<float> values(numel(shape));
  for (auto& v : values) v = std::bit_cast<float>(r.u32("payload"));
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + " is larger than shape " + to_string(shape));
  }
  return Tensor(shape, std::move(values));
}

std::filesystem::path sidecar_path(const std::filesystem::path& raw) {
  auto p = raw;
  p += ".json";
  return p;
}

}  // namespace exvt
