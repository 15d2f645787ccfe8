#pragma once

// File formats: 8-bit sRGB PNG images, landmark JSON sidecars, raw float32
// image sidecars and SHA-256 file digests.

#include <png.h>
#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmask/error.hpp"
#include "fmask/geometry.hpp"
#include "fmask/image.hpp"

namespace fmask::io {

namespace fs = std::filesystem;

/// value / 255 per channel.
inline Image read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw Error(ErrorCode::Io, "cannot read PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error(ErrorCode::Io, "cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = buffer[i] / 255.0;
  return out;
}

/// Quantizes with round-half-up after clamping to [0,1].
inline std::uint8_t quantize(double v) {
  const double scaled = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::floor(scaled + 0.5));
}

inline void write_png(const Image& image, const fs::path& path) {
  std::vector<png_byte> buffer(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) buffer[i] = quantize(image[i]);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buffer.data(), 0, nullptr))
    throw Error(ErrorCode::Io, "cannot write PNG " + path.string() + ": " + img.message);
}

/// Little-endian float32, row-major, RGB interleaved; no header. Dimensions
/// travel separately (manifest or caller).
inline void write_raw_f32(const Image& image, const fs::path& path) {
  std::vector<char> bytes(image.size() * 4);
  for (std::size_t i = 0; i < image.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(image[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_raw_f32(const fs::path& path, int height, int width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  Image out(height, width);
  std::vector<unsigned char> bytes(out.size() * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()) || in.peek() != std::char_traits<char>::eof())
    throw Error(ErrorCode::Io, path.string() + " does not hold a " + std::to_string(height) + "x" +
                                   std::to_string(width) + " float32 RGB image");
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

/// Round-trips an image through float32, matching what the sidecar stores.
inline Image to_f32_precision(Image image) {
  for (double& v : image.values()) v = static_cast<double>(static_cast<float>(v));
  return image;
}

inline LandmarkSet landmarks_from_json(const nlohmann::json& j) {
  LandmarkSet set;
  try {
    const nlohmann::json* points = &j;
    if (j.is_object()) {
      set.scheme_id = j.at("scheme").get<std::string>();
      points = &j.at("points");
    }
    for (const auto& p : *points) {
      if (!p.is_array() || p.size() != 2) throw Error(ErrorCode::InvalidArgument, "landmark must be [x, y]");
      set.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("landmark file: ") + e.what());
  }
  return set;
}

inline nlohmann::json to_json(const LandmarkSet& set) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : set.points) pts.push_back({p.x, p.y});
  return {{"scheme", set.scheme_id}, {"points", pts}};
}

/// {"scheme": "...", "points": [[x, y], ...]}
inline LandmarkSet read_landmarks(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open landmark file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, "landmark file " + path.string() + ": " + e.what());
  }
  return landmarks_from_json(j);
}

inline void write_landmarks(const LandmarkSet& set, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << to_json(set).dump(1) << '\n';
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr))
    throw Error(ErrorCode::Io, "sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

}  // namespace fmask::io
