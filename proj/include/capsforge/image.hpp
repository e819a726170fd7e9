// Grayscale image type plus binary PGM (P5) / PPM (P6) round-trip IO.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "capsforge/core.hpp"

namespace capsforge {

constexpr int kImageHeight = 120;
constexpr int kImageWidth = 160;

// Single-channel intensity grid, row-major, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(size_t(h) * size_t(w), fill) {}

  double& at(int y, int x) { return pixels[size_t(y) * width + x]; }
  double at(int y, int x) const { return pixels[size_t(y) * width + x]; }

  bool standard_size() const {
    return height == kImageHeight && width == kImageWidth;
  }

  void clamp01() {
    for (double& p : pixels) p = std::min(1.0, std::max(0.0, p));
  }
};

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // interleaved r,g,b in [0,1]

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), pixels(size_t(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return pixels[(size_t(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(size_t(y) * width + x) * 3 + c]; }
};

// Writes to a sibling temp file then renames, so readers never see partials.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open for writing: ", tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) fail("short write: ", tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open file: ", path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

namespace detail {

// Netpbm header scanner that reports the byte offset of the first problem.
class PnmParser {
 public:
  PnmParser(const std::string& bytes, std::string path)
      : bytes_(bytes), path_(std::move(path)) {}

  void expect_magic(const char* magic) {
    if (bytes_.size() < 2 || bytes_[0] != magic[0] || bytes_[1] != magic[1])
      bad(0, cat("expected magic '", magic, "'"));
    pos_ = 2;
  }

  int next_int() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !isdigit_at(pos_))
      bad(pos_, "expected decimal integer");
    long v = 0;
    while (pos_ < bytes_.size() && isdigit_at(pos_)) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1 << 26) bad(pos_, "integer out of range");
      ++pos_;
    }
    return int(v);
  }

  // One whitespace byte separates the header from raster data.
  void expect_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(uint8_t(bytes_[pos_])))
      bad(pos_, "expected single whitespace before raster");
    ++pos_;
  }

  const uint8_t* raster(size_t need) {
    if (bytes_.size() - pos_ < need)
      bad(bytes_.size(), cat("raster truncated, need ", need, " bytes, have ",
                             bytes_.size() - pos_));
    return reinterpret_cast<const uint8_t*>(bytes_.data()) + pos_;
  }

  [[noreturn]] void bad(size_t offset, const std::string& what) {
    fail("malformed image file ", path_, " at byte offset ", offset, ": ",
         what);
  }

  size_t pos() const { return pos_; }

 private:
  bool isdigit_at(size_t i) const {
    return bytes_[i] >= '0' && bytes_[i] <= '9';
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(uint8_t(bytes_[pos_]))) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  std::string path_;
  size_t pos_ = 0;
};

inline uint8_t quantize8(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return uint8_t(std::lround(c * 255.0));
}

}  // namespace detail

inline void save_pgm(const Image& img, const std::filesystem::path& path) {
  std::string out = cat("P5\n", img.width, " ", img.height, "\n255\n");
  out.reserve(out.size() + img.pixels.size());
  for (double p : img.pixels) out.push_back(char(detail::quantize8(p)));
  write_file_atomic(path, out);
}

inline Image load_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  detail::PnmParser p(bytes, path.string());
  p.expect_magic("P5");
  const int w = p.next_int();
  const int h = p.next_int();
  const int maxval = p.next_int();
  if (w <= 0 || h <= 0) p.bad(p.pos(), "non-positive dimensions");
  if (maxval != 255) p.bad(p.pos(), cat("unsupported maxval ", maxval));
  p.expect_single_space();
  const uint8_t* data = p.raster(size_t(w) * h);
  Image img(h, w);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = double(data[i]) / 255.0;
  return img;
}

inline void save_ppm(const RgbImage& img, const std::filesystem::path& path) {
  std::string out = cat("P6\n", img.width, " ", img.height, "\n255\n");
  out.reserve(out.size() + img.pixels.size());
  for (double p : img.pixels) out.push_back(char(detail::quantize8(p)));
  write_file_atomic(path, out);
}

inline RgbImage load_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  detail::PnmParser p(bytes, path.string());
  p.expect_magic("P6");
  const int w = p.next_int();
  const int h = p.next_int();
  const int maxval = p.next_int();
  if (w <= 0 || h <= 0) p.bad(p.pos(), "non-positive dimensions");
  if (maxval != 255) p.bad(p.pos(), cat("unsupported maxval ", maxval));
  p.expect_single_space();
  const uint8_t* data = p.raster(size_t(w) * h * 3);
  RgbImage img(h, w);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = double(data[i]) / 255.0;
  return img;
}

}  // namespace capsforge
