#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace hatkit {

// SplitMix64. Chosen over std::mt19937 + std::normal_distribution because the
// standard distributions are implementation-defined; this generator produces
// the same stream on every compiler, which the reproducibility contracts need.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, stddev) resampled until within +/- 2 stddev.
  double truncated_normal(double stddev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return z * stddev;
  }

  // Beta(a, b) by Johnk's method; exact uniform shortcut for a == b == 1.
  double beta(double a, double b) {
    if (a == 1.0 && b == 1.0) return uniform();
    for (;;) {
      double x = std::pow(uniform(), 1.0 / a);
      double y = std::pow(uniform(), 1.0 / b);
      if (x + y <= 1.0 && x + y > 0.0) return x / (x + y);
    }
  }

  // +1 or -1.
  double sign() { return (next_u64() & 1) ? 1.0 : -1.0; }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Derives independent sub-seeds from one root seed. Streams are addressed by
// name (and an optional index), so adding a new consumer cannot shift the
// draws seen by existing ones.
class SeedSplitter {
 public:
  explicit SeedSplitter(uint64_t root) : root_(root) {}

  uint64_t seed_for(std::string_view name, uint64_t index = 0) const {
    return mix64(root_ ^ fnv1a64(name) ^ mix64(index + 0x9E3779B97F4A7C15ULL));
  }

  Rng rng_for(std::string_view name, uint64_t index = 0) const {
    return Rng(seed_for(name, index));
  }

  uint64_t root() const { return root_; }

 private:
  uint64_t root_;
};

}  // namespace hatkit
