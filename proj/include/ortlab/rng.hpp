#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "ortlab/error.hpp"

namespace ortlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Stable seed for a named substream (data, masks, init, ...) of a master
/// seed. Keeps paired runs paired: disabling one consumer of randomness
/// leaves every other stream untouched.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 0x51ED2701CB1A6C55ull));
}

/// Deterministic random stream. mt19937_64 has a standardized output
/// sequence and all derived draws below avoid the implementation-defined
/// std distributions, so streams are reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return gen_(); }

  Rng child(std::uint64_t tag) const { return Rng(derive_seed(seed_, tag)); }

  /// Uniform in [0,1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform index in [0,n) via the multiply-shift reduction.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

  /// Standard normal, Box-Muller, no state carried between calls.
  double normal() {
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  /// Normal(0,std) with draws outside +/-2 std rejected.
  double trunc_normal(double std) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= 2.0) return z * std;
    }
  }

  /// Poisson(mean): sequential-search inversion for small means, PTRS
  /// transformed rejection (Hormann) above the split point.
  std::uint64_t poisson(double mean) {
    require(mean >= 0.0 && std::isfinite(mean), "poisson mean must be >= 0");
    if (mean == 0.0) return 0;
    if (mean <= 30.0) return poisson_inversion(mean);
    return poisson_ptrs(mean);
  }

 private:
  std::uint64_t poisson_inversion(double mean) {
    double p = std::exp(-mean);
    double cdf = p;
    double u = uniform();
    std::uint64_t k = 0;
    while (u > cdf) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
      if (k > 2000) break;  // cdf ~ 1 long before this for mean <= 30
    }
    return k;
  }

  std::uint64_t poisson_ptrs(double mean) {
    const double b = 0.931 + 2.53 * std::sqrt(mean);
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    const double log_mean = std::log(mean);
    for (;;) {
      double u = uniform() - 0.5;
      double v = uniform();
      double us = 0.5 - std::abs(u);
      double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
      if (us >= 0.07 && v <= v_r) return static_cast<std::uint64_t>(kf);
      if (kf < 0.0 || (us < 0.013 && v > us)) continue;
      double k = kf;
      if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
          k * log_mean - mean - std::lgamma(k + 1.0))
        return static_cast<std::uint64_t>(kf);
    }
  }

  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace ortlab
