#pragma once

#include <cstdint>

namespace featseg {

/// SplitMix64, the reference generator for every seeded draw in the
/// project. Its output sequence is fixed bit-for-bit so test vectors are
/// portable across platforms and languages.
class SplitMix64 {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    state_ += kGamma;
    return mix(state_);
  }

  /// Uniform double in [0, 1): top 53 bits scaled by 2^-53.
  double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  /// Uniform index in [0, n) as floor(uniform() * n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Standard normal via Box-Muller on two consecutive uniform draws
  /// (u1, u2): sqrt(-2 ln(1 - u1)) * cos(2 pi u2). The sine branch is
  /// discarded, so every call consumes exactly two draws.
  double gaussian() noexcept;

  std::uint64_t state() const noexcept { return state_; }

  /// The output function alone; also used to derive child seeds.
  static constexpr std::uint64_t mix(std::uint64_t x) noexcept {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
  }

 private:
  std::uint64_t state_;
};

/// Seed for an independent child stream `index` of `parent_seed`.
std::uint64_t derive_seed(std::uint64_t parent_seed,
                          std::uint64_t index) noexcept;

}  // namespace featseg
