// RGB float images, binary PPM (P6) / PGM (P5) I/O, and resampling.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/geometry.hpp"

namespace sdetr {

/// Interleaved RGB, row-major, values in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int w, int h, float fill = 0.0f) : width(w), height(h), rgb(static_cast<std::size_t>(3 * w * h), fill) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("Image: dims must be positive");
  }

  std::size_t offset(int x, int y) const { return 3 * (static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)); }
  float& at(int x, int y, int c) { return rgb[offset(x, y) + static_cast<std::size_t>(c)]; }
  float at(int x, int y, int c) const { return rgb[offset(x, y) + static_cast<std::size_t>(c)]; }
  bool operator==(const Image&) const = default;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.rgb.size());
  for (float v : img.rgb) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

namespace detail {
// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string ppm_token(const std::string& buf, std::size_t& pos, const std::string& what) {
  while (pos < buf.size()) {
    if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos) throw FormatError(what + ": truncated header");
  return buf.substr(start, pos - start);
}

inline int parse_header_int(const std::string& tok, const std::string& what) {
  int v = 0;
  std::size_t used = 0;
  try {
    v = std::stoi(tok, &used);
  } catch (const std::exception&) {
    throw FormatError(what + ": bad header value '" + tok + "'");
  }
  if (used != tok.size() || v <= 0) throw FormatError(what + ": bad header value '" + tok + "'");
  return v;
}
}  // namespace detail

/// Parses an 8-bit binary P6 buffer. `what` names the source in errors.
inline Image decode_ppm(const std::string& buf, const std::string& what = "ppm") {
  std::size_t pos = 0;
  if (detail::ppm_token(buf, pos, what) != "P6") throw FormatError(what + ": not a binary P6 file");
  const int w = detail::parse_header_int(detail::ppm_token(buf, pos, what), what);
  const int h = detail::parse_header_int(detail::ppm_token(buf, pos, what), what);
  const int maxval = detail::parse_header_int(detail::ppm_token(buf, pos, what), what);
  if (maxval != 255) throw FormatError(what + ": only maxval 255 is supported");
  ++pos;  // single whitespace byte before the raster
  const std::size_t need = 3 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (pos > buf.size() || buf.size() - pos < need) {
    throw FormatError(what + ": truncated raster (expected " + std::to_string(need) + " bytes)");
  }
  Image img(w, h);
  for (std::size_t i = 0; i < need; ++i) img.rgb[i] = static_cast<std::uint8_t>(buf[pos + i]) / 255.0f;
  return img;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline Image load_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }
inline void save_ppm(const std::filesystem::path& path, const Image& img) { write_file(path, encode_ppm(img)); }

/// 8-bit P5 graymap from bytes.
inline std::string encode_pgm(int width, int height, const std::vector<std::uint8_t>& gray) {
  if (gray.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw std::invalid_argument("encode_pgm: buffer size does not match dims");
  }
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(gray.begin(), gray.end());
  return out;
}

/// Bilinear sample with pixel centers at integer+0.5, clamped at the border.
inline void sample_bilinear(const Image& img, double x, double y, float out[3]) {
  x = std::clamp(x - 0.5, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y - 0.5, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double lx = x - x0, ly = y - y0;
  for (int c = 0; c < 3; ++c) {
    const double top = img.at(x0, y0, c) * (1 - lx) + img.at(x1, y0, c) * lx;
    const double bot = img.at(x0, y1, c) * (1 - lx) + img.at(x1, y1, c) * lx;
    out[c] = static_cast<float>(top * (1 - ly) + bot * ly);
  }
}

/// Crops `region` (continuous pixel coords) and resamples it to out_w×out_h.
inline Image crop_resize(const Image& img, const BoxXYXY& region, int out_w, int out_h) {
  if (!(region.width() > 0 && region.height() > 0)) throw std::invalid_argument("crop_resize: empty region");
  Image out(out_w, out_h);
  const double sx = region.width() / static_cast<double>(out_w);
  const double sy = region.height() / static_cast<double>(out_h);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      sample_bilinear(img, region.x1 + (x + 0.5) * sx, region.y1 + (y + 0.5) * sy, &out.rgb[out.offset(x, y)]);
    }
  }
  return out;
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
    }
  }
  return out;
}

}  // namespace sdetr
