#include "featseg/rng.hpp"

#include <cmath>
#include <numbers>

namespace featseg {

std::uint64_t SplitMix64::below(std::uint64_t n) noexcept {
  auto i = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  return i < n ? i : n - 1;
}

double SplitMix64::gaussian() noexcept {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(1.0 - u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t parent_seed,
                          std::uint64_t index) noexcept {
  SplitMix64 rng(parent_seed ^ SplitMix64::mix(index + SplitMix64::kGamma));
  return rng.next();
}

}  // namespace featseg
