#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace care {

/// Counter-based generator: the n-th 64-bit draw of a stream with key K is
/// `mix(K + (n + 1) * 0x9E3779B97F4A7C15)`, where `mix` is the SplitMix64
/// finalizer. Identical to the SplitMix64 sequence seeded with K, so any
/// language can reproduce a stream from (key, counter) alone.
///
/// Uniform doubles take the top 53 bits. Normals use Box-Muller and consume
/// two uniforms per draw (the sine branch is discarded).
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) noexcept
      : key_(seed), counter_(counter) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix(key_ + counter_ * kGamma);
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    // rejection sampling; modulo over the unbiased prefix
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Independent child stream; deterministic in (key, stream id), not in the counter.
  Rng fork(std::uint64_t stream) const noexcept {
    return Rng(mix(key_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace care
