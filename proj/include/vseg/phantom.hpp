#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "vseg/error.hpp"
#include "vseg/image.hpp"
#include "vseg/seed.hpp"

namespace vseg {

struct PhantomParams {
  std::size_t size = 70;
  double center_x = 35;
  double center_y = 35;
  double radius_x = 14;
  double radius_y = 12;
  double orientation_deg = 0;
  double vein_level = 30;        // mean intensity inside the vein
  double background_level = 120;  // mean tissue intensity near the skin
  double speckle_scale = 1.0;    // 0 disables speckle
  double deformation = 0.1;      // fraction applied as (1 + d, 1 - d) to a base radius
  double attenuation = 0.6;      // intensity fraction lost from top row to bottom row
  std::size_t distractors = 2;

  void validate() const {
    if (size < 8) throw ConfigError("phantom: image size too small");
    if (!(radius_x > 0 && radius_y > 0)) throw ConfigError("phantom: radii must be positive");
    if (!(attenuation >= 0 && attenuation < 1)) throw ConfigError("phantom: attenuation must be in [0, 1)");
    if (speckle_scale < 0) throw ConfigError("phantom: speckle scale must be non-negative");
    const double r = std::max(radius_x, radius_y);
    const double s = static_cast<double>(size);
    if (center_x - r < 0 || center_y - r < 0 || center_x + r > s - 1 || center_y + r > s - 1)
      throw ConfigError("phantom: vein ellipse does not fit inside the image");
  }
};

struct Phantom {
  Image image;
  Mask mask;
  std::string subject_id;
};

// Vein radius statistics in pixels.
inline constexpr double kVeinRadiusMean = 14.22;
inline constexpr double kVeinRadiusStd = 4.38;

/// Anatomy shared by every image of one subject.
struct SubjectAnatomy {
  double radius = kVeinRadiusMean;
  double deformation = 0.1;
  double center_x = 35;
  double center_y = 35;
  double orientation_deg = 0;
  double background_level = 120;
  double vein_level = 30;
  double attenuation = 0.5;
};

inline double sample_vein_radius(std::mt19937_64& rng) {
  std::normal_distribution<double> n(kVeinRadiusMean, kVeinRadiusStd);
  for (;;) {
    const double r = n(rng);
    if (r >= 3.0 && r <= 26.0) return r;
  }
}

inline SubjectAnatomy sample_subject(std::uint64_t seed, std::size_t size = 70) {
  std::mt19937_64 rng(seed);
  SubjectAnatomy a;
  a.radius = sample_vein_radius(rng);
  std::uniform_real_distribution<double> def(0.0, 0.25), orient(-30, 30), bg(100, 140), vein(15, 45),
      att(0.3, 0.6), unit(0, 1);
  a.deformation = def(rng);
  a.orientation_deg = orient(rng);
  a.background_level = bg(rng);
  a.vein_level = vein(rng);
  a.attenuation = att(rng);
  const double s = static_cast<double>(size);
  const double reach = a.radius * (1 + a.deformation) + 2;
  a.center_x = reach + unit(rng) * std::max(0.0, s - 1 - 2 * reach);
  a.center_y = reach + unit(rng) * std::max(0.0, s - 1 - 2 * reach);
  return a;
}

/// Per-image variation around the subject anatomy.
inline PhantomParams sample_image_params(const SubjectAnatomy& a, std::mt19937_64& rng, std::size_t size = 70) {
  std::normal_distribution<double> jitter(0, 1);
  PhantomParams p;
  p.size = size;
  const double r = std::clamp(a.radius * (1 + 0.06 * jitter(rng)), 3.0, 27.0);
  const double d = std::clamp(a.deformation + 0.03 * jitter(rng), 0.0, 0.35);
  p.radius_x = r * (1 + d);
  p.radius_y = r * (1 - d);
  const double max_reach = (static_cast<double>(size) - 4) / 2;
  if (p.radius_x > max_reach) {
    p.radius_y *= max_reach / p.radius_x;
    p.radius_x = max_reach;
  }
  p.orientation_deg = a.orientation_deg + 4 * jitter(rng);
  p.deformation = d;
  p.vein_level = std::max(5.0, a.vein_level + 3 * jitter(rng));
  p.background_level = a.background_level + 5 * jitter(rng);
  p.attenuation = a.attenuation;
  const double s = static_cast<double>(size), reach = std::max(p.radius_x, p.radius_y);
  const double lo = reach + 0.5, hi = s - 1.5 - reach;
  p.center_x = std::clamp(a.center_x + 2 * jitter(rng), lo, std::max(lo, hi));
  p.center_y = std::clamp(a.center_y + 2 * jitter(rng), lo, std::max(lo, hi));
  return p;
}

/// Pixels (x, y) inside the ellipse, in pixel-index coordinates.
inline bool inside_ellipse(const PhantomParams& p, double x, double y) {
  const double t = p.orientation_deg * std::numbers::pi / 180;
  const double dx = x - p.center_x, dy = y - p.center_y;
  const double u = std::cos(t) * dx + std::sin(t) * dy, v = -std::sin(t) * dx + std::cos(t) * dy;
  return (u * u) / (p.radius_x * p.radius_x) + (v * v) / (p.radius_y * p.radius_y) <= 1.0;
}

inline Phantom generate_phantom(std::uint64_t seed, const PhantomParams& p, const std::string& subject_id = "") {
  p.validate();
  std::mt19937_64 rng(seed);
  const std::size_t S = p.size;
  const double s = static_cast<double>(S);
  Phantom out{Image(S, S), Mask(S, S), subject_id};
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x)
      out.mask.at(x, y) = inside_ellipse(p, static_cast<double>(x), static_cast<double>(y)) ? 1 : 0;

  // Smooth tissue background: a few low-frequency waves plus depth attenuation.
  std::uniform_real_distribution<double> phase(0, 2 * std::numbers::pi), freq(0.5, 2.0), amp(0.03, 0.12);
  struct Wave {
    double fx, fy, ph, a;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) waves.push_back({freq(rng), freq(rng), phase(rng), amp(rng)});
  std::vector<double> field(S * S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      double m = 1;
      for (const auto& w : waves)
        m += w.a * std::sin(2 * std::numbers::pi * (w.fx * x + w.fy * y) / s + w.ph);
      const double depth = 1 - p.attenuation * static_cast<double>(y) / (s - 1);
      field[y * S + x] = p.background_level * m * depth;
    }

  // Distractors: small dark blobs outside the vein and a bright fascia band.
  std::uniform_real_distribution<double> pos(4, s - 5), rad(2.0, 4.0);
  for (std::size_t k = 0; k < p.distractors; ++k) {
    const double cx = pos(rng), cy = pos(rng), r = rad(rng);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
        if (d <= r && !out.mask.at(x, y)) field[y * S + x] *= 0.55;
      }
  }
  std::uniform_real_distribution<double> band_row(3, s * 0.25);
  const double row = band_row(rng);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double d = static_cast<double>(y) - row;
      field[y * S + x] *= 1 + 0.5 * std::exp(-d * d / 3.0);
    }

  for (std::size_t i = 0; i < S * S; ++i)
    if (out.mask[i]) field[i] = p.vein_level;

  // Multiplicative exponential speckle, then a 3x3 box blur.
  if (p.speckle_scale > 0) {
    std::exponential_distribution<double> speckle(1.0);
    for (auto& v : field) v *= 1 + p.speckle_scale * (speckle(rng) - 1);
    std::vector<double> blurred(S * S);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        double acc = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long xx = static_cast<long>(x) + dx, yy = static_cast<long>(y) + dy;
            if (xx < 0 || yy < 0 || xx >= static_cast<long>(S) || yy >= static_cast<long>(S)) continue;
            acc += field[static_cast<std::size_t>(yy) * S + static_cast<std::size_t>(xx)];
            ++n;
          }
        blurred[y * S + x] = acc / n;
      }
    field = std::move(blurred);
  }
  for (std::size_t i = 0; i < S * S; ++i) out.image[i] = static_cast<float>(std::round(std::clamp(field[i], 0.0, 255.0)));
  return out;
}

}  // namespace vseg
