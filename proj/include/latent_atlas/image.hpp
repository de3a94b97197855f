#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "latent_atlas/tensor.hpp"

namespace latent_atlas {

/// RGB image stored as a (3, H, W) tensor with values in [0, 1].
class Image {
 public:
  Image() : pixels_(Shape{3, 1, 1}) {}

  explicit Image(Tensor pixels) : pixels_(std::move(pixels)) {
    if (pixels_.rank() != 3 || pixels_.dim(0) != 3) {
      throw ShapeError("image: expected shape (3, H, W), got " + shape_str(pixels_.shape()));
    }
    for (double v : pixels_.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw NumericalError("image: pixel outside [0, 1]");
    }
  }

  /// Clamps every value to [0, 1] first.
  static Image clamped(Tensor pixels) {
    for (double& v : pixels.data()) v = std::clamp(v, 0.0, 1.0);
    return Image(std::move(pixels));
  }

  const Tensor& tensor() const { return pixels_; }
  std::size_t height() const { return pixels_.dim(1); }
  std::size_t width() const { return pixels_.dim(2); }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[(c * height() + y) * width() + x];
  }

  bool operator==(const Image&) const = default;

 private:
  Tensor pixels_;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary P6 encoding, 8 bits per channel.
inline std::string encode_ppm(const Image& img) {
  std::ostringstream os;
  os << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  std::string out = os.str();
  out.reserve(out.size() + 3 * img.width() * img.height());
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(img.at(c, y, x))));
    }
  }
  return out;
}

inline Image decode_ppm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic;
  auto skip_comments = [&is]() {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> w;
  skip_comments();
  is >> h;
  skip_comments();
  is >> maxval;
  if (magic != "P6" || !is || w == 0 || h == 0 || maxval != 255) {
    throw ConfigError("ppm: expected 8-bit binary P6 image");
  }
  is.get();
  std::vector<char> raw(3 * w * h);
  is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size())) throw ConfigError("ppm: truncated pixel data");
  Tensor t(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        t[(c * h + y) * w + x] = static_cast<unsigned char>(raw[3 * (y * w + x) + c]) / 255.0;
      }
    }
  }
  return Image(std::move(t));
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline void write_ppm(const std::string& path, const Image& img) { write_file(path, encode_ppm(img)); }
inline Image read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

/// Tiles rows of equally sized images with 2-pixel white separators.
inline Image make_grid(const std::vector<std::vector<Image>>& rows, std::size_t sep = 2) {
  if (rows.empty() || rows[0].empty()) throw ConfigError("grid: no images");
  const std::size_t h = rows[0][0].height(), w = rows[0][0].width();
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const std::size_t H = rows.size() * h + (rows.size() - 1) * sep;
  const std::size_t W = cols * w + (cols - 1) * sep;
  Tensor t = Tensor::filled(Shape{3, H, W}, 1.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const Image& img = rows[r][c];
      if (img.height() != h || img.width() != w) throw ShapeError("grid: image size mismatch");
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            t[(ch * H + r * (h + sep) + y) * W + c * (w + sep) + x] = img.at(ch, y, x);
          }
        }
      }
    }
  }
  return Image(std::move(t));
}

}  // namespace latent_atlas
