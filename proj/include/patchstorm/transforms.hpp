#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "patchstorm/error.hpp"
#include "patchstorm/rng.hpp"
#include "patchstorm/tensor.hpp"

namespace patchstorm {

/// Square crop rectangle in the source frame, resampled to out x out.
struct CropSpec {
  std::size_t x = 0, y = 0, w = 0, h = 0, out = 0;

  friend bool operator==(const CropSpec&, const CropSpec&) = default;
};

/// Area-fraction range of the source-side crop distribution.
struct CropParams {
  double scale_lo = 0.5;
  double scale_hi = 1.0;

  void validate() const {
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
      throw Error(Errc::invalid_argument, "crop scale range must satisfy 0 < lo <= hi <= 1, got [" +
                                              std::to_string(scale_lo) + ", " + std::to_string(scale_hi) + "]");
    }
  }
};

/// Target-side augmentation: random resized crop, horizontal flip, rotation.
struct MildTransformParams {
  double scale_lo = 0.9;
  double scale_hi = 1.0;
  double flip_prob = 0.5;
  double max_rotation = 15.0;  // degrees

  static MildTransformParams identity() { return {1.0, 1.0, 0.0, 0.0}; }

  void validate() const {
    CropParams{scale_lo, scale_hi}.validate();
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
      throw Error(Errc::invalid_argument, "flip_prob must lie in [0,1], got " + std::to_string(flip_prob));
    }
    if (!(max_rotation >= 0.0) || !std::isfinite(max_rotation)) {
      throw Error(Errc::invalid_argument, "max_rotation must be >= 0, got " + std::to_string(max_rotation));
    }
  }
};

namespace detail {

inline std::size_t square_side(const Tensor& image, const char* op) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2) || image.dim(1) == 0) {
    throw Error(Errc::shape_mismatch, std::string(op) + ": expected a square [C,S,S] image, got " +
                                          shape_str(image.shape()));
  }
  return image.dim(1);
}

// Two-tap bilinear weights for one output coordinate along one axis.
struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<Tap> axis_taps(std::size_t offset, std::size_t extent, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(extent) / static_cast<double>(out);
  const double hi = static_cast<double>(extent - 1);
  for (std::size_t i = 0; i < out; ++i) {
    const double u = std::clamp((static_cast<double>(i) + 0.5) * ratio - 0.5, 0.0, hi);
    const auto f = static_cast<std::size_t>(std::floor(u));
    const std::size_t c = std::min(f + 1, extent - 1);
    const double t = u - static_cast<double>(f);
    taps[i] = {offset + f, offset + c, 1.0 - t, t};
  }
  return taps;
}

inline void check_crop(const CropSpec& s, std::size_t side, const char* op) {
  if (s.w == 0 || s.h == 0 || s.out == 0 || s.x + s.w > side || s.y + s.h > side) {
    throw Error(Errc::out_of_range, std::string(op) + ": crop (x=" + std::to_string(s.x) + ", y=" +
                                        std::to_string(s.y) + ", w=" + std::to_string(s.w) + ", h=" +
                                        std::to_string(s.h) + ", out=" + std::to_string(s.out) +
                                        ") does not fit a " + std::to_string(side) + "px image");
  }
}

}  // namespace detail

/// Square crop with area fraction uniform in scale_range and a uniformly
/// placed offset. Side lengths that round below 1 are clamped to 1.
inline CropSpec sample_crop(Rng& rng, std::size_t img_size, const CropParams& range, std::size_t out) {
  range.validate();
  if (img_size == 0 || out == 0) throw Error(Errc::invalid_argument, "sample_crop: sizes must be positive");
  const double s = rng.uniform(range.scale_lo, range.scale_hi);
  const auto side = static_cast<std::size_t>(
      std::clamp(std::round(std::sqrt(s) * static_cast<double>(img_size)), 1.0, static_cast<double>(img_size)));
  const std::size_t slack = img_size - side + 1;
  CropSpec c;
  c.w = c.h = side;
  c.x = rng.below(slack);
  c.y = rng.below(slack);
  c.out = out;
  return c;
}

inline CropSpec full_crop(std::size_t img_size, std::size_t out) { return {0, 0, img_size, img_size, out}; }

/// Bilinear resample of the crop rectangle with half-pixel centers.
inline Tensor crop_resize(const Tensor& image, const CropSpec& spec) {
  const std::size_t side = detail::square_side(image, "crop_resize");
  detail::check_crop(spec, side, "crop_resize");
  const std::size_t channels = image.dim(0), out = spec.out;
  const auto tx = detail::axis_taps(spec.x, spec.w, out);
  const auto ty = detail::axis_taps(spec.y, spec.h, out);
  Tensor result({channels, out, out});
  const double* src = image.data().data();
  double* dst = result.data().data();
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = src + c * side * side;
    for (std::size_t i = 0; i < out; ++i) {
      const double* r0 = plane + ty[i].i0 * side;
      const double* r1 = plane + ty[i].i1 * side;
      for (std::size_t j = 0; j < out; ++j) {
        const auto& t = tx[j];
        *dst++ = ty[i].w0 * (t.w0 * r0[t.i0] + t.w1 * r0[t.i1]) + ty[i].w1 * (t.w0 * r1[t.i0] + t.w1 * r1[t.i1]);
      }
    }
  }
  return result;
}

/// Scatters out_grad back through the same bilinear weights; zero outside the crop.
inline Tensor crop_resize_vjp(const Tensor& image, const CropSpec& spec, const Tensor& out_grad) {
  const std::size_t side = detail::square_side(image, "crop_resize_vjp");
  detail::check_crop(spec, side, "crop_resize_vjp");
  const std::size_t channels = image.dim(0), out = spec.out;
  if (out_grad.shape() != Shape{channels, out, out}) {
    throw Error(Errc::shape_mismatch, "crop_resize_vjp: output grad " + shape_str(out_grad.shape()) +
                                          " does not match crop output " + shape_str({channels, out, out}));
  }
  const auto tx = detail::axis_taps(spec.x, spec.w, out);
  const auto ty = detail::axis_taps(spec.y, spec.h, out);
  Tensor grad(image.shape());
  const double* g = out_grad.data().data();
  double* dst = grad.data().data();
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = dst + c * side * side;
    for (std::size_t i = 0; i < out; ++i) {
      double* r0 = plane + ty[i].i0 * side;
      double* r1 = plane + ty[i].i1 * side;
      for (std::size_t j = 0; j < out; ++j) {
        const auto& t = tx[j];
        const double v = *g++;
        const double a = ty[i].w0 * v, b = ty[i].w1 * v;
        r0[t.i0] += t.w0 * a;
        r0[t.i1] += t.w1 * a;
        r1[t.i0] += t.w0 * b;
        r1[t.i1] += t.w1 * b;
      }
    }
  }
  return grad;
}

inline double iou(const CropSpec& a, const CropSpec& b) {
  const double ix = std::max(0.0, static_cast<double>(std::min(a.x + a.w, b.x + b.w)) -
                                      static_cast<double>(std::max(a.x, b.x)));
  const double iy = std::max(0.0, static_cast<double>(std::min(a.y + a.h, b.y + b.h)) -
                                      static_cast<double>(std::max(a.y, b.y)));
  const double inter = ix * iy;
  const double uni = static_cast<double>(a.w * a.h) + static_cast<double>(b.w * b.h) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline Tensor hflip(const Tensor& image) {
  const std::size_t side = detail::square_side(image, "hflip");
  Tensor out(image.shape());
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) out.at(c, y, x) = image.at(c, y, side - 1 - x);
  return out;
}

/// Bilinear rotation about the image center; samples leaving the frame clamp to the edge.
inline Tensor rotate(const Tensor& image, double degrees) {
  const std::size_t side = detail::square_side(image, "rotate");
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double center = (static_cast<double>(side) - 1.0) / 2.0;
  const double hi = static_cast<double>(side - 1);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = static_cast<double>(x) - center, dy = static_cast<double>(y) - center;
      // Inverse map: rotate the output coordinate back by -angle.
      const double sx = std::clamp(cs * dx + sn * dy + center, 0.0, hi);
      const double sy = std::clamp(-sn * dx + cs * dy + center, 0.0, hi);
      const auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, side - 1), y1 = std::min(y0 + 1, side - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < image.dim(0); ++c) {
        out.at(c, y, x) = (1.0 - fy) * ((1.0 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1)) +
                          fy * ((1.0 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1));
      }
    }
  }
  return out;
}

/// Random resized crop back to full size, then flip, then rotation. Every
/// random value is drawn regardless of params so stream usage is fixed.
inline Tensor mild_transform(Rng& rng, const Tensor& image, const MildTransformParams& params) {
  params.validate();
  const std::size_t side = detail::square_side(image, "mild_transform");
  const CropSpec crop = sample_crop(rng, side, {params.scale_lo, params.scale_hi}, side);
  const bool flip = rng.uniform() < params.flip_prob;
  const double angle = rng.uniform(-params.max_rotation, params.max_rotation);
  Tensor out = crop_resize(image, crop);
  if (flip) out = hflip(out);
  if (angle != 0.0) out = rotate(out, angle);
  return out;
}

}  // namespace patchstorm
