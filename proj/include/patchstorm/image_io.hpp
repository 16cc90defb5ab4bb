#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchstorm/error.hpp"
#include "patchstorm/tensor.hpp"

namespace patchstorm {

/// [0,1] float to byte, rounding half to even (0.5 -> 128, 0.5/255 -> 0).
inline std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) throw Error(Errc::non_finite, "to_byte: non-finite pixel");
  const double clamped = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::nearbyint(clamped * 255.0));
}

/// Decodes any libpng-readable image to 8-bit RGB, scaled by 1/255, as [3,H,W].
inline Tensor read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw Error(Errc::io, "read_png: " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw Error(Errc::io, "read_png: " + path.string() + ": " + msg);
  }
  const std::size_t H = img.height, W = img.width;
  Tensor t({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) t.at(c, y, x) = buf[(y * W + x) * 3 + c] / 255.0;
  return t;
}

/// Encodes a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw Error(Errc::shape_mismatch, "write_png: expected [3,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::vector<std::uint8_t> buf(H * W * 3);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) buf[(y * W + x) * 3 + c] = to_byte(image.at(c, y, x));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error(Errc::io, "write_png: " + path.string() + ": " + img.message);
  }
}

}  // namespace patchstorm
