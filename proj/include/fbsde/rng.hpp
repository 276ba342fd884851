#pragma once

#include <cmath>
#include <cstdint>

namespace fbsde {

// Counter-based generator built on the splitmix64 finalizer. Streams are
// keyed by (seed, lane, counter) so that sampling is reproducible
// independently of evaluation order or thread schedule.

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t combine_keys(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                  std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

struct SplitMix64 {
  std::uint64_t state = 0;
  std::uint64_t next() {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  // uniform on the open interval (0, 1)
  double uniform01() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
};

/// Standard normal stream via the Box-Muller transform.
struct GaussianStream {
  SplitMix64 rng;
  double cached = 0.0;
  bool has_cached = false;

  explicit GaussianStream(std::uint64_t key) : rng{key} {}

  double next() {
    if (has_cached) {
      has_cached = false;
      return cached;
    }
    const double u1 = rng.uniform01();
    const double u2 = rng.uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    cached = r * std::sin(theta);
    has_cached = true;
    return r * std::cos(theta);
  }
};

}  // namespace fbsde
