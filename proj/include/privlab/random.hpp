#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace privlab {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a named sub-stream, e.g. derive_seed(root, {round, client}).
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(root);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

/// Uniform draw in the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  double u;
  do {
    u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  } while (u <= 0.0);
  return u;
}

}  // namespace privlab
