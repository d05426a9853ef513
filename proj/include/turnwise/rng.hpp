// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace turnwise {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derive an independent stream from a base seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

// Seeded random source. Only the raw mt19937_64 output stream is used;
// all value shaping is done here, so sequences are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return double(gen_() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Uniform in [0, n), rejection sampled.
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::next_below: n must be positive");
    uint64_t rem = (UINT64_MAX % n) + 1;  // 2^64 mod n, with n aliased to 0
    if (rem == n) rem = 0;
    const uint64_t limit = UINT64_MAX - rem;
    uint64_t x;
    do {
      x = gen_();
    } while (x > limit);
    return x % n;
  }

  // Inclusive bounds.
  int next_int(int lo, int hi) {
    if (lo > hi) throw std::invalid_argument("Rng::next_int: empty range");
    return lo + int(next_below(uint64_t(hi) - uint64_t(lo) + 1));
  }

  bool next_bool(double p = 0.5) { return next_double() < p; }

  // Fisher-Yates; std::shuffle is implementation-defined, this is not.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace turnwise
