#pragma once

// 8-bit grayscale frames, binary masks and the small amount of image I/O the
// pipeline needs (PGM P5 and PNG, both single-channel).

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fovealnet/errors.hpp"

namespace fovealnet {

struct GrayFrame {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // row-major, width*height

  GrayFrame() = default;
  GrayFrame(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
    if (w < 1 || h < 1) throw UserError("GrayFrame: dimensions must be >= 1");
  }

  std::uint8_t& at(int x, int y) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  bool same_dims(const GrayFrame& o) const {
    return width == o.width && height == o.height;
  }
  bool operator==(const GrayFrame& o) const = default;
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  bool operator==(const BinaryMask& o) const = default;
};

// Double-valued image, the model-input representation after normalization.
struct FloatImage {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  FloatImage() = default;
  FloatImage(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  double at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
};

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)

inline void save_pgm(const GrayFrame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  out << "P5\n" << frame.width << " " << frame.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(frame.data.data()),
            static_cast<std::streamsize>(frame.data.size()));
}

inline GrayFrame load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw UserError(path + ": not a P5 PGM");
  auto next_int = [&](const char* what) {
    // Skip whitespace and '#' comment lines between header tokens.
    int c;
    while ((c = in.peek()) != EOF) {
      if (c == '#') {
        std::string comment;
        std::getline(in, comment);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    if (!(in >> v)) throw UserError(path + ": bad PGM header (" + what + ")");
    return v;
  };
  const long w = next_int("width");
  const long h = next_int("height");
  const long maxval = next_int("maxval");
  if (w < 1 || h < 1 || maxval != 255)
    throw UserError(path + ": unsupported PGM geometry/maxval");
  in.get();  // single whitespace after maxval
  GrayFrame frame(static_cast<int>(w), static_cast<int>(h));
  in.read(reinterpret_cast<char*>(frame.data.data()),
          static_cast<std::streamsize>(frame.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(frame.data.size()))
    throw UserError(path + ": truncated PGM payload");
  return frame;
}

// ---------------------------------------------------------------------------
// PNG (libpng simplified API, 8-bit gray)

inline void save_png(const GrayFrame& frame, const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(frame.width);
  image.height = static_cast<png_uint_32>(frame.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, frame.data.data(),
                               frame.width /*row_stride*/, nullptr)) {
    throw UserError("PNG write failed for " + path + ": " + image.message);
  }
}

inline GrayFrame load_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw UserError("PNG open failed for " + path + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;  // libpng converts color inputs for us
  GrayFrame frame(static_cast<int>(image.width),
                  static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, frame.data.data(),
                             frame.width /*row_stride*/, nullptr)) {
    png_image_free(&image);
    throw UserError("PNG read failed for " + path + ": " + image.message);
  }
  return frame;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline GrayFrame load_image(const std::string& path) {
  if (has_suffix(path, ".pgm") || has_suffix(path, ".PGM"))
    return load_pgm(path);
  if (has_suffix(path, ".png") || has_suffix(path, ".PNG"))
    return load_png(path);
  throw UserError("unsupported image extension: " + path);
}

inline void save_image(const GrayFrame& frame, const std::string& path) {
  if (has_suffix(path, ".pgm")) return save_pgm(frame, path);
  if (has_suffix(path, ".png")) return save_png(frame, path);
  throw UserError("unsupported image extension: " + path);
}

// ---------------------------------------------------------------------------

// Bilinear resize with pixel-center alignment; deterministic half-up rounding.
inline GrayFrame resize_bilinear(const GrayFrame& src, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1)
    throw UserError("resize_bilinear: output dims must be >= 1");
  GrayFrame dst(out_w, out_h);
  const double sx = static_cast<double>(src.width) / out_w;
  const double sy = static_cast<double>(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, src.height - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, src.width - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = std::clamp(fx - x0, 0.0, 1.0);
      const double top = src.at(x0, y0) * (1.0 - wx) + src.at(x1, y0) * wx;
      const double bot = src.at(x0, y1) * (1.0 - wx) + src.at(x1, y1) * wx;
      const double v = top * (1.0 - wy) + bot * wy;
      dst.at(x, y) = static_cast<std::uint8_t>(
          std::clamp(static_cast<int>(std::lround(v)), 0, 255));
    }
  }
  return dst;
}

inline GrayFrame crop_region(const GrayFrame& src, int x0, int y0, int w,
                             int h) {
  if (x0 < 0 || y0 < 0 || w < 1 || h < 1 || x0 + w > src.width ||
      y0 + h > src.height)
    throw UserError("crop_region: window out of bounds");
  GrayFrame out(w, h);
  for (int y = 0; y < h; ++y)
    std::memcpy(out.data.data() + static_cast<std::size_t>(y) * w,
                src.data.data() + static_cast<std::size_t>(y0 + y) * src.width + x0,
                static_cast<std::size_t>(w));
  return out;
}

}  // namespace fovealnet
