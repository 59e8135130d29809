#include <doctest.h>

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "featseg/parallel.hpp"
#include "featseg/rng.hpp"

using namespace featseg;

TEST_CASE("splitmix64 matches the published reference sequence") {
  SplitMix64 a(1234567);
  const std::uint64_t expected[] = {6457827717110365317ULL, 3203168211198807973ULL,
                                    9817491932198370423ULL, 4593380528125082431ULL,
                                    16408922859458223821ULL};
  for (const auto e : expected) CHECK(a.next() == e);

  SplitMix64 zero(0);
  CHECK(zero.next() == 0xE220A8397B1DCDAFULL);
  CHECK(zero.next() == 0x6E789E6AA1B965F4ULL);
  CHECK(zero.next() == 0x06C45D188009454FULL);
}

TEST_CASE("uniform uses the top 53 bits") {
  SplitMix64 a(99), b(99);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    CHECK(u == static_cast<double>(b.next() >> 11) / 9007199254740992.0);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("gaussian is the cosine branch of Box-Muller on two draws") {
  SplitMix64 a(5), b(5);
  for (int i = 0; i < 50; ++i) {
    const double u1 = b.uniform(), u2 = b.uniform();
    const double want = std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * M_PI * u2);
    CHECK(a.gaussian() == doctest::Approx(want).epsilon(1e-15));
  }
  CHECK(a.state() == b.state());
}

TEST_CASE("gaussian moments") {
  SplitMix64 rng(2024);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.gaussian();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("below stays in range and derive_seed separates streams") {
  SplitMix64 rng(3);
  for (int i = 0; i < 1000; ++i) CHECK(rng.below(7) < 7);
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(10, 4) == derive_seed(10, 4));
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) CHECK(h.load() == 1);

  CHECK_THROWS_AS(parallel_for(100, 3,
                               [](std::size_t i) {
                                 if (i == 57) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
  CHECK(resolve_threads(3) == 3);
  CHECK(resolve_threads(0) >= 1);
}
