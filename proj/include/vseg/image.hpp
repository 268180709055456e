#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vseg/error.hpp"

namespace vseg {

/// Row-major 2-D grid addressed as (x = column, y = row).
template <typename V>
struct Grid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<V> data;

  Grid() = default;
  Grid(std::size_t w, std::size_t h, V fill = V{}) : width(w), height(h), data(w * h, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  V& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  const V& at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
  V& operator[](std::size_t i) { return data[i]; }
  const V& operator[](std::size_t i) const { return data[i]; }

  bool same_size(const Grid& o) const noexcept { return width == o.width && height == o.height; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Grayscale image with values in [0, 255].
using Image = Grid<float>;
/// Binary mask with values in {0, 1}.
using Mask = Grid<std::uint8_t>;

inline std::size_t count_foreground(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; }));
}

inline void require_binary(const Mask& m, const char* where) {
  for (auto v : m.data)
    if (v > 1) throw Error(std::string(where) + ": mask values must be 0 or 1");
}

inline void require_same_size(const Mask& a, const Mask& b, const char* where) {
  if (!a.same_size(b))
    throw ShapeError(std::string(where) + ": size " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
}

}  // namespace vseg
