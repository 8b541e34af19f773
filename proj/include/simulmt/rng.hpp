#pragma once

// Portable 64-bit random number generation.
//
// Every random draw in the toolkit (corpus generation, parameter init,
// shuffles) goes through Rng so results are identical on every platform and
// in any reimplementation. The algorithms are written out in full here and in
// README.md:
//
//   SplitMix64 (seeding / splitting):
//     state += 0x9E3779B97F4A7C15
//     z = state
//     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//     return z ^ (z >> 31)
//
//   xoshiro256** (main stream), state s[0..3] filled by four SplitMix64 draws:
//     result = rotl(s[1] * 5, 7) * 9
//     t = s[1] << 17
//     s[2] ^= s[0]; s[3] ^= s[1]; s[1] ^= s[2]; s[0] ^= s[3]
//     s[2] ^= t; s[3] = rotl(s[3], 45)
//
// Derived quantities:
//   uniform()       = (next() >> 40) * 2^-24            (float in [0,1))
//   uniform_double  = (next() >> 11) * 2^-53            (double in [0,1))
//   below(n)        = Lemire-free rejection: draw until x < floor(2^64/n)*n,
//                     return x % n
//   normal()        = Box-Muller on two uniform_double draws (cosine branch)
//   split(tag)      = Rng(SplitMix64(seed ^ tag).next())

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace simulmt {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a over bytes; used to hash stage names into seeds.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Seed for a named stage derived from the root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) {
  std::uint64_t s = root ^ fnv1a64(stage);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  float uniform() { return static_cast<float>(next() >> 40) * 0x1.0p-24f; }
  double uniform_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  /// Uniform integer in [lo, hi].
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform_double() < p; }

  double normal() {
    double u1 = uniform_double();
    const double u2 = uniform_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream; the parent is not advanced.
  Rng split(std::uint64_t tag) const {
    std::uint64_t sm = seed_ ^ tag;
    return Rng(splitmix64(sm));
  }

  /// Fisher-Yates, from the back.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace simulmt
