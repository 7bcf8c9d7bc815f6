#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace mumt {

// Deterministic RNG with explicit algorithms so that identical seeds give
// byte-identical outputs across platforms and standard-library versions
// (std::shuffle and std::normal_distribution are implementation-defined).
// Core generator is splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed), root_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Derive an independent stream from the original seed and a tag.
  Rng fork(uint64_t tag) const {
    Rng mixer(root_ ^ (0x632be59bd9b4e019ull * (tag + 1)));
    return Rng(mixer.next_u64());
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n) {
    // Rejection sampling on the top bits; unbiased.
    uint64_t mask = n - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    for (;;) {
      uint64_t v = next_u64() & mask;
      if (v < n) return v;
    }
  }

  // Standard normal via Box-Muller (pair cached for determinism).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates with explicit index draws.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  uint64_t root_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mumt
