#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

// Deterministic, platform-stable random number generation.
//
// All randomness in this project flows through the two generators below so
// that (spec, seed) pins every artifact bit-for-bit across runs and
// platforms. The algorithms are fixed:
//
//   SplitMix64   -- Steele/Lea/Flood mixer; used for seeding and for
//                   deriving independent stream seeds.
//   Xoshiro256pp -- xoshiro256++ (Blackman & Vigna); the working generator.
//                   State is four 64-bit words filled from SplitMix64.
//
// Derived quantities are likewise fixed:
//   uniform(): (next() >> 11) * 2^-53, giving a double in [0, 1).
//   normal():  Box-Muller, sqrt(-2 ln u1) * cos(2 pi u2) with u1 in (0, 1]
//              taken as 1 - uniform() and u2 = uniform(). Exactly two raw
//              draws per sample, no cached spare.
//   derive_seed(base, index): SplitMix64 finalizer applied to
//              base + (index + 1) * 0x9E3779B97F4A7C15. Parallel generation
//              of disjoint index ranges uses per-index derived seeds, so
//              output never depends on chunking or thread count.

namespace crossdistill {

constexpr std::uint64_t kGolden64 = 0x9E3779B97F4A7C15ULL;

// SplitMix64 output function applied to a single value.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class SplitMix64 {
 public:
  explicit constexpr SplitMix64(std::uint64_t seed) : state_(seed) {}

  constexpr std::uint64_t next() {
    state_ += kGolden64;
    return splitmix64_mix(state_);
  }

 private:
  std::uint64_t state_;
};

// 64-bit FNV-1a, used for fingerprints and tag-based seed derivation.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64_mix(base + (index + 1) * kGolden64);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return derive_seed(base, fnv1a64(tag));
}

class Xoshiro256pp {
 public:
  explicit constexpr Xoshiro256pp(std::uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& word : state_) word = sm.next();
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  constexpr std::uint64_t next() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two raw draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, bound) by rejection from the top of the range.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % bound;
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
};

// Seeded Fisher-Yates; identical permutation for identical (n, seed).
template <typename T>
void deterministic_shuffle(std::vector<T>& items, std::uint64_t seed) {
  Xoshiro256pp rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace crossdistill
