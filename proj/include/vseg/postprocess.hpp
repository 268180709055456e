#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "vseg/error.hpp"
#include "vseg/image.hpp"

namespace vseg {

enum class MaskStage { raw, opened, closed, largest_component };

inline const char* to_string(MaskStage s) {
  switch (s) {
    case MaskStage::raw: return "raw";
    case MaskStage::opened: return "opened";
    case MaskStage::closed: return "closed";
    case MaskStage::largest_component: return "largest_component";
  }
  return "?";
}

struct VeinMask {
  Mask mask;
  bool failed = true;
  MaskStage stage = MaskStage::raw;
};

struct PostprocessConfig {
  double threshold = 0.5;
  int open_radius = 1;
  int close_radius = 1;

  void validate() const {
    if (!(threshold >= 0 && threshold <= 1)) throw ConfigError("postprocess: threshold must be in [0, 1]");
    if (open_radius < 0 || close_radius < 0) throw ConfigError("postprocess: radii must be non-negative");
  }
};

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

namespace morph {

struct Offset {
  int dx, dy;
};

// Disk of the given radius; radius 1 is the 3x3 cross.
inline std::vector<Offset> disk(int radius) {
  std::vector<Offset> se;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) se.push_back({dx, dy});
  return se;
}

// Pixels outside the grid are ignored by both operators.
inline Mask erode(const Mask& m, const std::vector<Offset>& se) {
  Mask out(m.width, m.height);
  const int W = static_cast<int>(m.width), H = static_cast<int>(m.height);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      std::uint8_t v = m.at(x, y);
      for (std::size_t k = 0; v && k < se.size(); ++k) {
        const int xx = x + se[k].dx, yy = y + se[k].dy;
        if (xx >= 0 && yy >= 0 && xx < W && yy < H && !m.at(xx, yy)) v = 0;
      }
      out.at(x, y) = v ? 1 : 0;
    }
  return out;
}

inline Mask dilate(const Mask& m, const std::vector<Offset>& se) {
  Mask out(m.width, m.height);
  const int W = static_cast<int>(m.width), H = static_cast<int>(m.height);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!m.at(x, y)) continue;
      for (const auto& o : se) {
        const int xx = x + o.dx, yy = y + o.dy;
        if (xx >= 0 && yy >= 0 && xx < W && yy < H) out.at(xx, yy) = 1;
      }
    }
  return out;
}

inline Mask open(const Mask& m, int radius) {
  if (radius == 0) return m;
  const auto se = disk(radius);
  return dilate(erode(m, se), se);
}

inline Mask close(const Mask& m, int radius) {
  if (radius == 0) return m;
  const auto se = disk(radius);
  return erode(dilate(m, se), se);
}

}  // namespace morph

/// Keeps the largest 8-connected foreground component; ties go to the component
/// whose first pixel comes earliest in raster order.
inline Mask largest_component(const Mask& m) {
  const std::size_t W = m.width, H = m.height, n = m.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a), b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent[b] = a;  // root is the smallest raster index
  };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (!m.at(x, y)) continue;
      const std::size_t i = y * W + x;
      if (x > 0 && m.at(x - 1, y)) unite(i, i - 1);
      if (y > 0) {
        if (m.at(x, y - 1)) unite(i, i - W);
        if (x > 0 && m.at(x - 1, y - 1)) unite(i, i - W - 1);
        if (x + 1 < W && m.at(x + 1, y - 1)) unite(i, i - W + 1);
      }
    }
  std::vector<std::size_t> size(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (m[i]) ++size[find(i)];
  std::size_t best = n;
  for (std::size_t i = 0; i < n; ++i)
    if (size[i] > 0 && (best == n || size[i] > size[best])) best = i;
  Mask out(W, H);
  if (best == n) return out;
  for (std::size_t i = 0; i < n; ++i)
    if (m[i] && find(i) == best) out[i] = 1;
  return out;
}

inline Mask binarize(const Grid<float>& prob, double threshold) {
  Mask out(prob.width, prob.height);
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const float p = prob[i];
    if (!std::isfinite(p) || p < 0 || p > 1) throw NumericError("postprocess: probability outside [0, 1]");
    out[i] = p >= threshold ? 1 : 0;
  }
  return out;
}

/// threshold -> opening -> closing -> largest 8-connected component.
inline VeinMask postprocess_mask(const Grid<float>& prob, const PostprocessConfig& cfg = {}) {
  cfg.validate();
  Mask m = binarize(prob, cfg.threshold);
  m = morph::open(m, cfg.open_radius);
  m = morph::close(m, cfg.close_radius);
  m = largest_component(m);
  VeinMask out{std::move(m), false, MaskStage::largest_component};
  out.failed = count_foreground(out.mask) == 0;
  return out;
}

/// Mean column and mean row of the foreground pixels.
inline Point centroid(const Mask& m) {
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        sx += static_cast<double>(x);
        sy += static_cast<double>(y);
        ++n;
      }
  if (n == 0) throw Error("centroid: empty mask; treat the image as a failure case");
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

inline Point centroid(const VeinMask& m) {
  if (m.failed) throw Error("centroid: mask is flagged as a failure case");
  return centroid(m.mask);
}

struct PunctureCommand {
  Point centroid;
  double depth_mm = 0;
  double axis5_travel_mm = 0;
  double axis6_travel_mm = 0;
  double needle_angle_deg = 0;
};

/// Depth below the skin row and the two axis travels that bring the needle tip
/// to the centroid along a rail inclined at needle_angle_deg.
inline PunctureCommand plan_puncture(Point c, double skin_row, double mm_per_pixel, double needle_angle_deg = 17.0) {
  if (!(mm_per_pixel > 0)) throw ConfigError("plan_puncture: mm_per_pixel must be positive");
  if (!(needle_angle_deg > 0 && needle_angle_deg < 90)) throw ConfigError("plan_puncture: angle must be in (0, 90)");
  if (!(c.y > skin_row))
    throw Error("plan_puncture: centroid row " + std::to_string(c.y) + " is not below skin row " +
                std::to_string(skin_row));
  const double depth = (c.y - skin_row) * mm_per_pixel;
  const double t = needle_angle_deg * std::numbers::pi / 180;
  return {c, depth, depth / std::tan(t), depth / std::sin(t), needle_angle_deg};
}

/// Tip displacement (horizontal, vertical) in mm after travelling axis6 along the rail.
inline Point needle_tip_displacement(const PunctureCommand& cmd) {
  const double t = cmd.needle_angle_deg * std::numbers::pi / 180;
  return {cmd.axis6_travel_mm * std::cos(t), cmd.axis6_travel_mm * std::sin(t)};
}

}  // namespace vseg
