#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vseg/error.hpp"
#include "vseg/image.hpp"

namespace vseg {

namespace fs = std::filesystem;

/// Writes bytes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Binary 8-bit PGM (P5).
inline Grid<std::uint8_t> parse_pgm(const std::string& bytes, const std::string& name = "pgm") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t start = pos, v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])))
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
    if (pos == start || v > 100000) throw FormatError(name + ": malformed PGM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError(name + ": not a binary PGM (P5)");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) throw FormatError(name + ": zero image size");
  if (maxval == 0 || maxval > 255) throw FormatError(name + ": only 8-bit PGM is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError(name + ": malformed PGM header");
  ++pos;
  if (bytes.size() - pos < w * h) throw FormatError(name + ": truncated pixel data");
  Grid<std::uint8_t> g(w, h);
  for (std::size_t i = 0; i < w * h; ++i) g[i] = static_cast<std::uint8_t>(bytes[pos + i]);
  return g;
}

inline std::string encode_pgm(const Grid<std::uint8_t>& g) {
  std::string out = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(g.data.data()), g.data.size());
  return out;
}

inline Grid<std::uint8_t> to_bytes(const Image& img) {
  Grid<std::uint8_t> g(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i)
    g[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(img[i]), 0.0, 255.0)));
  return g;
}

inline Image to_image(const Grid<std::uint8_t>& g) {
  Image img(g.width, g.height);
  for (std::size_t i = 0; i < g.size(); ++i) img[i] = static_cast<float>(g[i]);
  return img;
}

inline Image read_image(const fs::path& path) { return to_image(parse_pgm(read_file(path), path.string())); }

inline void write_image(const fs::path& path, const Image& img) { write_file_atomic(path, encode_pgm(to_bytes(img))); }

/// Mask files store 0 and 255.
inline Mask read_mask(const fs::path& path) {
  const auto g = parse_pgm(read_file(path), path.string());
  Mask m(g.width, g.height);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] != 0 && g[i] != 255) throw FormatError(path.string() + ": mask values must be 0 or 255");
    m[i] = g[i] ? 1 : 0;
  }
  return m;
}

inline void write_mask(const fs::path& path, const Mask& m) {
  require_binary(m, "write_mask");
  Grid<std::uint8_t> g(m.width, m.height);
  for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i] ? 255 : 0;
  write_file_atomic(path, encode_pgm(g));
}

}  // namespace vseg
