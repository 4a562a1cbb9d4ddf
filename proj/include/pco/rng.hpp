#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

// Seed derivation and portable samplers.
//
// All randomness in the project flows from a single root seed through
// derive_seed(root, tag[, index]), so runs are reproducible end to end.
// std::mt19937_64 is bit-exact across platforms; the distribution
// transforms below are hand-rolled because the std:: distributions are
// implementation-defined.

namespace pco::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream seed = mix(mix(root) ^ hash(tag) ^ mix(index)).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(root) ^ fnv1a64(tag) ^ splitmix64(index + 1));
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed) { return Engine(seed); }

// Uniform in [0, 1), 53-bit resolution.
inline double uniform_unit(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform_range(Engine& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(eng);
}

// Standard normal via Box-Muller; two fresh uniforms per draw, no cache.
inline double normal(Engine& eng) {
  // u1 in (0, 1] so the log is finite.
  double u1 = static_cast<double>((eng() >> 11) + 1) * 0x1.0p-53;
  double u2 = uniform_unit(eng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(6.283185307179586476925286766559 * u2);
}

// Uniform integer in [0, n), rejection sampled (no modulo bias).
inline std::uint64_t uniform_int(Engine& eng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = eng();
  } while (x >= limit);
  return x % n;
}

}  // namespace pco::rng
