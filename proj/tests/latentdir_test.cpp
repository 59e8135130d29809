#include <doctest.h>

#include <cmath>
#include <limits>

#include "featseg/error.hpp"
#include "featseg/latentdir.hpp"
#include "featseg/rng.hpp"
#include "featseg/toygen.hpp"
#include "support.hpp"

using namespace featseg;

namespace {

// Gaussian latents labelled by the sign of w[0], rejecting |w[0]| < margin.
std::vector<LatentPair> planted(std::size_t n, std::size_t dim, double margin,
                                std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<LatentPair> pairs;
  while (pairs.size() < n) {
    LatentPair p;
    p.w.resize(dim);
    for (auto& v : p.w) v = rng.gaussian();
    if (std::abs(p.w[0]) < margin) continue;
    p.b = p.w[0] > 0 ? 1 : 0;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (const auto x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("planted axis is recovered") {
  const auto pairs = planted(1000, 16, 0.5, 11);
  const auto d = fit_direction(pairs);
  REQUIRE(d.g.size() == 16);
  CHECK(norm(d.g) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.g[0] >= 0.99);  // cosine with e1
  CHECK(d.train_accuracy == 1.0);
  CHECK(d.n_pairs == 1000);
}

TEST_CASE("two points on a line") {
  const std::vector<LatentPair> pairs{{{-1.0}, 0}, {{1.0}, 1}};
  const auto d = fit_direction(pairs);
  REQUIRE(d.g.size() == 1);
  CHECK(d.g[0] == doctest::Approx(1.0));
  CHECK(d.train_accuracy == 1.0);
}

TEST_CASE("single-class and malformed input is rejected") {
  auto pairs = planted(20, 4, 0.0, 2);
  for (auto& p : pairs) p.b = 0;
  CHECK_THROWS_AS(fit_direction(pairs), ValidationError);
  CHECK_THROWS_AS(fit_direction(std::vector<LatentPair>{{{1.0}, 1}}), ValidationError);
  pairs = planted(20, 4, 0.0, 2);
  pairs[3].w.pop_back();
  CHECK_THROWS_AS(fit_direction(pairs), ValidationError);
  pairs = planted(20, 4, 0.0, 2);
  pairs[5].b = 2;
  CHECK_THROWS_AS(fit_direction(pairs), ValidationError);
}

TEST_CASE("manipulate") {
  LatentDirection d;
  d.g = {0.0, 1.0};
  const std::vector<double> w{1.0, 0.0};
  CHECK(manipulate(w, d, 0.0) == w);
  CHECK(manipulate(w, d, 2.0) == std::vector<double>{1.0, 2.0});
  CHECK_THROWS_AS(manipulate(std::vector<double>{1.0}, d, 1.0), ValidationError);

  SplitMix64 rng(4);
  d.g.assign(16, 0.0);
  for (auto& v : d.g) v = rng.gaussian();
  const double n = norm(d.g);
  for (auto& v : d.g) v /= n;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(16);
    for (auto& v : x) v = rng.gaussian();
    const double alpha = rng.gaussian() * 3;
    const auto back = manipulate(manipulate(x, d, alpha), d, -alpha);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double ulp = std::nextafter(std::abs(x[i]), std::numeric_limits<double>::infinity()) -
                         std::abs(x[i]);
      // Rounding of the intermediate sum bounds the error by one ulp of the
      // larger of |x| and |alpha g|.
      const double bound = std::max(ulp, std::abs(alpha * d.g[i]) * 2.3e-16);
      CHECK(std::abs(back[i] - x[i]) <= bound);
    }
  }
}

TEST_CASE("moving along g raises the score") {
  const auto pairs = planted(300, 8, 0.2, 6);
  const auto d = fit_direction(pairs);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& w = pairs[i].w;
    const auto moved = manipulate(w, d, 1.0);
    double before = d.bias, after = d.bias;
    for (std::size_t j = 0; j < w.size(); ++j) {
      before += w[j] * d.g[j];
      after += moved[j] * d.g[j];
    }
    CHECK(after == doctest::Approx(before + 1.0));
  }
}

TEST_CASE("regularized loss never increases") {
  const auto pairs = planted(200, 6, 0.0, 9);
  const auto d = fit_direction(pairs, {.l2_penalty = 1e-2});
  REQUIRE(d.loss_history.size() >= 2);
  for (std::size_t i = 1; i < d.loss_history.size(); ++i) {
    CHECK(d.loss_history[i] <= d.loss_history[i - 1]);
  }
}

TEST_CASE("fit is deterministic and the sign survives rescaling") {
  const auto pairs = planted(300, 8, 0.3, 12);
  const auto a = fit_direction(pairs);
  const auto b = fit_direction(pairs);
  CHECK(a.g == b.g);
  CHECK(a.bias == b.bias);

  auto scaled = pairs;
  for (auto& p : scaled)
    for (auto& v : p.w) v *= 7.5;
  const auto c = fit_direction(scaled);
  double cos = 0;
  for (std::size_t i = 0; i < a.g.size(); ++i) cos += a.g[i] * c.g[i];
  CHECK(cos > 0.9);
}

TEST_CASE("direction save/load round trip") {
  test::TempDir dir;
  const auto d = fit_direction(planted(100, 5, 0.3, 1));
  save_direction(d, dir.path());
  const auto back = load_direction(dir.path());
  REQUIRE(back.g.size() == d.g.size());
  for (std::size_t i = 0; i < d.g.size(); ++i) {
    CHECK(back.g[i] == doctest::Approx(d.g[i]).epsilon(1e-6));
  }
  CHECK(back.bias == doctest::Approx(d.bias));
  CHECK(back.n_pairs == d.n_pairs);
  CHECK_THROWS_AS(load_direction(dir / "missing"), Error);
}

TEST_CASE("toy latents carry the planted hat direction") {
  test::TempDir dir;
  ToyConfig cfg;
  cfg.dataset_seed = 3;
  const auto m = toy_dataset(cfg, 300, dir.path());
  const auto pairs = load_latent_pairs(m);
  REQUIRE(pairs.size() == 300);
  const auto d = fit_direction(pairs);
  const auto world = make_toy_world(cfg);
  double cos = 0;
  for (std::size_t i = 0; i < d.g.size(); ++i) cos += d.g[i] * world.attr_direction[i];
  CHECK(cos >= 0.9);
  CHECK(d.train_accuracy >= 0.98);

  auto broken = m;
  broken.samples[4].attr_label.reset();
  CHECK_THROWS_AS(load_latent_pairs(broken), ValidationError);
}
