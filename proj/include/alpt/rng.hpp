#pragma once

#include <cmath>
#include <cstdint>

namespace alpt {

// SplitMix64. Deterministic across platforms, unlike std:: distributions,
// which is what makes seeded datasets and runs byte-reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n). Modulo bias is ~n/2^64, irrelevant here.
  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  int next_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool next_bool(double p) { return next_double() < p; }

  // Box-Muller; one value per call keeps the draw sequence simple to reason about.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // N(0, sigma^2) resampled until |z| <= 2*sigma.
  double next_trunc_gaussian(double sigma) {
    for (;;) {
      double z = next_gaussian();
      if (std::fabs(z) <= 2.0) return z * sigma;
    }
  }

 private:
  uint64_t state_;
};

// Mixes a stream tag into a seed so derived generators are independent.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  Rng r(seed ^ (0x6a09e667f3bcc909ull + stream * 0x9e3779b97f4a7c15ull));
  return r.next_u64();
}

}  // namespace alpt
