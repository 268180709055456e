#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>

#include "vseg/error.hpp"
#include "vseg/image.hpp"

namespace vseg {

struct SpatialAug {
  std::size_t size = 64;
  bool hflip = false;
  double rotation_deg = 0;
  double shear_deg = 0;
  double aspect_delta = 0;

  void validate() const {
    if (size == 0) throw ConfigError("spatial augmentation: output size must be positive");
    if (std::abs(rotation_deg) > 15) throw ConfigError("spatial augmentation: rotation outside [-15, 15]");
    if (std::abs(shear_deg) > 15) throw ConfigError("spatial augmentation: shear outside [-15, 15]");
    if (std::abs(aspect_delta) > 0.01) throw ConfigError("spatial augmentation: aspect delta outside [-0.01, 0.01]");
  }

  friend bool operator==(const SpatialAug&, const SpatialAug&) = default;
};

struct IntensityAug {
  double offset = 0;
  double gain = 1;
  double dropout = 0;
  double contrast = 1;
  std::uint64_t dropout_seed = 0;

  void validate() const {
    if (std::abs(offset) > 15) throw ConfigError("intensity augmentation: offset outside [-15, 15]");
    if (gain < 0.8 || gain > 1.2) throw ConfigError("intensity augmentation: gain outside [0.8, 1.2]");
    if (dropout < 0 || dropout > 0.05) throw ConfigError("intensity augmentation: dropout outside [0, 0.05]");
    if (contrast < 0.8 || contrast > 1.2) throw ConfigError("intensity augmentation: contrast outside [0.8, 1.2]");
  }

  friend bool operator==(const IntensityAug&, const IntensityAug&) = default;
};

enum class AugKind { spatial, intensity };

inline SpatialAug sample_spatial(std::mt19937_64& rng, std::size_t size = 64) {
  std::uniform_real_distribution<double> angle(-15, 15), aspect(-0.01, 0.01);
  std::bernoulli_distribution flip(0.5);
  SpatialAug a;
  a.size = size;
  a.hflip = flip(rng);
  a.rotation_deg = angle(rng);
  a.shear_deg = angle(rng);
  a.aspect_delta = aspect(rng);
  return a;
}

inline IntensityAug sample_intensity(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> offset(-15, 15), scale(0.8, 1.2), drop(0, 0.05);
  IntensityAug a;
  a.offset = offset(rng);
  a.gain = scale(rng);
  a.dropout = drop(rng);
  a.contrast = scale(rng);
  a.dropout_seed = rng();
  return a;
}

inline std::variant<SpatialAug, IntensityAug> sample_augmentation(std::uint64_t seed, AugKind kind) {
  std::mt19937_64 rng(seed);
  if (kind == AugKind::spatial) return sample_spatial(rng);
  return sample_intensity(rng);
}

namespace detail {

// 2x2 forward map in centred output-pixel units: R * Shear * Aspect * Flip.
struct Affine2 {
  double a, b, c, d;
};

inline Affine2 spatial_matrix(const SpatialAug& s) {
  const double r = s.rotation_deg * std::numbers::pi / 180, k = std::tan(s.shear_deg * std::numbers::pi / 180);
  const double f = s.hflip ? -1.0 : 1.0;
  const double sx = (1 + s.aspect_delta) * f, sy = 1 - s.aspect_delta;
  const double cr = std::cos(r), sr = std::sin(r);
  // [cr -sr; sr cr] * [1 k; 0 1] * diag(sx, sy)
  return {cr * sx, (cr * k - sr) * sy, sr * sx, (sr * k + cr) * sy};
}

inline Affine2 inverse(const Affine2& m) {
  const double det = m.a * m.d - m.b * m.c;
  return {m.d / det, -m.b / det, -m.c / det, m.a / det};
}

inline float sample_bilinear(const Image& img, double x, double y) {
  // (x, y) in pixel-index coordinates; outside pixels read as zero.
  const double fx = std::floor(x), fy = std::floor(y);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const double tx = x - fx, ty = y - fy;
  auto px = [&](long xi, long yi) -> double {
    if (xi < 0 || yi < 0 || xi >= static_cast<long>(img.width) || yi >= static_cast<long>(img.height)) return 0.0;
    return img.at(static_cast<std::size_t>(xi), static_cast<std::size_t>(yi));
  };
  double v = 0;
  if (tx == 0 && ty == 0) return static_cast<float>(px(x0, y0));
  v += (1 - tx) * (1 - ty) * px(x0, y0);
  v += tx * (1 - ty) * px(x0 + 1, y0);
  v += (1 - tx) * ty * px(x0, y0 + 1);
  v += tx * ty * px(x0 + 1, y0 + 1);
  return static_cast<float>(v);
}

template <typename V>
V sample_nearest(const Grid<V>& g, double x, double y) {
  const long xi = static_cast<long>(std::floor(x + 0.5)), yi = static_cast<long>(std::floor(y + 0.5));
  if (xi < 0 || yi < 0 || xi >= static_cast<long>(g.width) || yi >= static_cast<long>(g.height)) return V{};
  return g.at(static_cast<std::size_t>(xi), static_cast<std::size_t>(yi));
}

// Calls f(out_x, out_y, src_x, src_y) for every output pixel; source in pixel-index coordinates.
template <typename F>
void for_each_source(std::size_t in_w, std::size_t in_h, const SpatialAug& s, F&& f) {
  const Affine2 inv = inverse(spatial_matrix(s));
  const double half = 0.5 * static_cast<double>(s.size);
  const double scale_x = static_cast<double>(in_w) / static_cast<double>(s.size);
  const double scale_y = static_cast<double>(in_h) / static_cast<double>(s.size);
  for (std::size_t v = 0; v < s.size; ++v)
    for (std::size_t u = 0; u < s.size; ++u) {
      const double px = static_cast<double>(u) + 0.5 - half, py = static_cast<double>(v) + 0.5 - half;
      const double qx = inv.a * px + inv.b * py, qy = inv.c * px + inv.d * py;
      f(u, v, (qx + half) * scale_x - 0.5, (qy + half) * scale_y - 0.5);
    }
}

}  // namespace detail

/// Maps a source pixel-index coordinate to the output pixel-index coordinate.
inline std::pair<double, double> spatial_forward_point(std::size_t in_w, std::size_t in_h, const SpatialAug& s,
                                                       double x, double y) {
  const detail::Affine2 m = detail::spatial_matrix(s);
  const double half = 0.5 * static_cast<double>(s.size);
  const double qx = (x + 0.5) * static_cast<double>(s.size) / static_cast<double>(in_w) - half;
  const double qy = (y + 0.5) * static_cast<double>(s.size) / static_cast<double>(in_h) - half;
  return {m.a * qx + m.b * qy + half - 0.5, m.c * qx + m.d * qy + half - 0.5};
}

inline Image warp_image(const Image& img, const SpatialAug& s) {
  s.validate();
  if (img.empty()) throw ShapeError("apply_spatial: empty image");
  Image out(s.size, s.size);
  detail::for_each_source(img.width, img.height, s, [&](std::size_t u, std::size_t v, double x, double y) {
    out.at(u, v) = detail::sample_bilinear(img, x, y);
  });
  return out;
}

inline Mask warp_mask(const Mask& m, const SpatialAug& s) {
  s.validate();
  if (m.empty()) throw ShapeError("apply_spatial: empty mask");
  require_binary(m, "apply_spatial");
  Mask out(s.size, s.size);
  detail::for_each_source(m.width, m.height, s, [&](std::size_t u, std::size_t v, double x, double y) {
    out.at(u, v) = detail::sample_nearest(m, x, y);
  });
  return out;
}

/// Warps the image (bilinear) and optional mask (nearest) with the same transform.
inline std::pair<Image, std::optional<Mask>> apply_spatial(const Image& img, const Mask* mask, const SpatialAug& s) {
  if (mask && !(mask->width == img.width && mask->height == img.height))
    throw ShapeError("apply_spatial: mask size " + std::to_string(mask->width) + "x" + std::to_string(mask->height) +
                     " differs from image size " + std::to_string(img.width) + "x" + std::to_string(img.height));
  std::optional<Mask> m;
  if (mask) m = warp_mask(*mask, s);
  return {warp_image(img, s), std::move(m)};
}

/// contrast about mid-gray, gain, offset, clamp to [0, 255], then dropout.
inline Image apply_intensity(const Image& img, const IntensityAug& a) {
  a.validate();
  Image out = img;
  for (auto& p : out.data) {
    double v = 127.5 + a.contrast * (static_cast<double>(p) - 127.5);
    v = v * a.gain + a.offset;
    p = static_cast<float>(std::clamp(v, 0.0, 255.0));
  }
  if (a.dropout > 0) {
    std::mt19937_64 rng(a.dropout_seed);
    std::bernoulli_distribution drop(a.dropout);
    for (auto& p : out.data)
      if (drop(rng)) p = 0;
  }
  return out;
}

/// Teacher and student inputs for one image: shared spatial warp, intensity on the student only.
struct PairedViews {
  Image teacher;
  Image student;
  std::optional<Mask> mask;
  SpatialAug spatial;
  IntensityAug intensity;
};

inline PairedViews make_paired_views(const Image& img, const Mask* mask, const SpatialAug& s, const IntensityAug& i) {
  auto [warped, m] = apply_spatial(img, mask, s);
  PairedViews v{warped, apply_intensity(warped, i), std::move(m), s, i};
  return v;
}

/// Plain resize to size x size (the identity spatial transform).
inline Image resize_image(const Image& img, std::size_t size = 64) { return warp_image(img, SpatialAug{.size = size}); }
inline Mask resize_mask(const Mask& m, std::size_t size = 64) { return warp_mask(m, SpatialAug{.size = size}); }

}  // namespace vseg
