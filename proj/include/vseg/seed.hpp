#pragma once

#include <cstdint>
#include <initializer_list>

namespace vseg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Sub-seed for a (module, index...) path below a root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(root);
  for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ull));
  return h;
}

// Stream tags for derive_seed paths.
namespace seed_tag {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t augment = 3;
inline constexpr std::uint64_t split = 4;
inline constexpr std::uint64_t folds = 5;
inline constexpr std::uint64_t phantom = 6;
inline constexpr std::uint64_t fold_run = 7;
}  // namespace seed_tag

}  // namespace vseg
