#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dpin {

// Seed derivation: every random stream is identified by (root seed, stream id,
// index) and hashed through splitmix64, so member/repeat/iteration seeds can be
// recomputed from the root seed alone.

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum class Stream : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kSplit = 3,
  kSynthetic = 4,
  kGradcheck = 5,
  kTraining = 6,
};

constexpr std::uint64_t derive_seed(std::uint64_t root, Stream stream, std::uint64_t index = 0) {
  return mix64(mix64(root ^ mix64(static_cast<std::uint64_t>(stream))) + index);
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t root, Stream stream, std::uint64_t index = 0) {
  return Engine(derive_seed(root, stream, index));
}

/// Uniform double in [lo, hi) built from raw engine bits; unlike
/// std::uniform_real_distribution its output is fixed across standard libraries.
inline double uniform(Engine& eng, double lo, double hi) {
  const double u = static_cast<double>(eng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

/// Standard normal via Box-Muller on `uniform`, library independent.
inline double standard_normal(Engine& eng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform(eng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(eng, 0.0, 1.0);
  const double u2 = uniform(eng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

/// Fisher-Yates with engine-bit indices (std::shuffle is implementation defined).
template <typename Vec>
void shuffle(Vec& v, Engine& eng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(eng() % i);
    using std::swap;
    swap(v[i - 1], v[j]);
  }
}

}  // namespace dpin
