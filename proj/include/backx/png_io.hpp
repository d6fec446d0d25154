#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "backx/error.hpp"
#include "backx/tensor.hpp"

namespace backx::png {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// Decodes any PNG into a (3, H, W) tensor in [0, 1]. Grey is replicated,
/// alpha dropped, 16-bit reduced to 8.
inline Tensor read_rgb(const std::filesystem::path& path) {
  detail::File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IngestionError(path.string(), "cannot open");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IngestionError(path.string(), "not a PNG");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IngestionError(path.string(), "libpng init failed");
  }
  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError(path.string(), "corrupt PNG");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buf.resize(rowbytes * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = buf[y * rowbytes + x * 3 + c] / 255.0;
  return out;
}

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes a (1, H, W) or (3, H, W) tensor with values in [0, 1] as 8-bit PNG.
inline void write(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw ShapeError("png write expects (1|3, H, W), got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  detail::File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng init failed");
  }
  std::vector<unsigned char> buf(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) buf[(y * w + x) * c + ch] = to_byte(image[(ch * h + y) * w + x]);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * w * c;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Min-max normalised greyscale rendering of an (H, W) map.
inline Tensor grayscale(std::span<const double> map, std::size_t h, std::size_t w) {
  auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double span = *hi - *lo;
  Tensor out({1, h, w});
  for (std::size_t i = 0; i < h * w; ++i) out[i] = span > 0 ? (map[i] - *lo) / span : 0.0;
  return out;
}

/// Blue-white-red heatmap (diverging at zero) of an (H, W) map.
inline Tensor heatmap(std::span<const double> map, std::size_t h, std::size_t w) {
  double m = 0;
  for (double v : map) m = std::max(m, std::abs(v));
  Tensor out({3, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    const double t = m > 0 ? map[i] / m : 0.0;
    out[i] = t >= 0 ? 1.0 : 1.0 + t;
    out[h * w + i] = 1.0 - std::abs(t);
    out[2 * h * w + i] = t <= 0 ? 1.0 : 1.0 - t;
  }
  return out;
}

}  // namespace backx::png
