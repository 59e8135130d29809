// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "featseg/cli.hpp"
#include "featseg/clustering.hpp"
#include "featseg/distill.hpp"
#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/latentdir.hpp"
#include "featseg/maskgen.hpp"
#include "featseg/metrics.hpp"
#include "featseg/parallel.hpp"
#include "featseg/rng.hpp"
#include "featseg/tensor.hpp"
#include "featseg/toygen.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace featseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const char* name, const std::function<Verdict()>& check) {
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

MaskImage to_mask(const LabelGrid& g) {
  MaskImage m(g.width, g.height);
  for (std::size_t i = 0; i < g.labels.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(g.labels[i]);
  return m;
}

// Shared toy data: 200 training and 50 held-out samples, dataset seed 1.
constexpr std::uint64_t kDatasetSeed = 1;
constexpr std::size_t kTrain = 200;
constexpr std::size_t kHeldOut = 50;

struct Pipeline {
  test::TempDir dir;
  ToyConfig cfg;
  DatasetManifest train, test;
  ClusterModel model;
  ClassMap classmap;  // cluster -> region, matched on the training set
};

std::vector<fs::path> feature_files(const DatasetManifest& m) {
  std::vector<fs::path> out;
  for (const auto& s : m.samples) out.push_back(m.resolve(s.feature_path));
  return out;
}

ConfusionMatrix feature_confusion(const Pipeline& p, std::size_t first, std::size_t n) {
  ConfusionMatrix cm(p.model.k, p.cfg.n_classes());
  const auto world = make_toy_world(p.cfg);
  for (std::size_t i = first; i < first + n; ++i) {
    const auto s = toy_sample(p.cfg, world, toy_sample_seed(p.cfg.dataset_seed, i));
    accumulate(cm, to_mask(assign(p.model, s.features)), s.feature_mask);
  }
  return cm;
}

Verdict end_to_end(Pipeline& p) {
  const auto t0 = Clock::now();
  p.cfg.dataset_seed = kDatasetSeed;
  p.train = toy_dataset(p.cfg, kTrain, p.dir / "train");
  p.test = toy_dataset(p.cfg, kHeldOut, p.dir / "test", kTrain);
  const FeatureMapPixels data(feature_files(p.train));
  // Same settings as the cluster subcommand defaults.
  p.model = kmeans_fit(data, p.cfg.n_regions, 3, LloydConfig{}, 10);
  p.classmap = match_clusters(feature_confusion(p, 0, kTrain), MatchMode::one_to_one);
  const auto held = remap_predictions(feature_confusion(p, kTrain, kHeldOut), p.classmap);
  const double miou = mean_iou(held).mean;
  const double secs = seconds_since(t0);
  return {miou >= 0.95 && secs < 60.0,
          fmt("held-out mIoU %.4f at feature resolution (>= 0.95), %.1f s (< 60 s)", miou, secs)};
}

Verdict distillation(Pipeline& p) {
  const auto t0 = Clock::now();
  const auto syn = synth_dataset(p.train, p.model, p.classmap, p.dir / "syn");
  TrainConfig tc;
  tc.seed = 5;
  const auto trained = fcn_train<float>(syn, p.cfg.n_classes(), tc);
  ConfusionMatrix cm(p.cfg.n_classes(), p.cfg.n_classes());
  for (const auto& s : p.test.samples) {
    const auto img = to_image<float>(read_rgb_png(p.test.resolve(s.image_path)));
    accumulate(cm, fcn_predict(trained.params, img), read_mask_png(p.test.resolve(*s.mask_path)));
  }
  const double miou = mean_iou(cm).mean;
  const double secs = seconds_since(t0);
  return {miou >= 0.90 && secs < 300.0,
          fmt("held-out mIoU %.4f on %zu fresh images (>= 0.90), %.1f s (< 300 s), "
              "final loss %.4f",
              miou, p.test.samples.size(), secs, trained.loss_curve.back())};
}

Verdict lloyd_monotone() {
  SplitMix64 rng(20240101);
  std::size_t violations = 0, iterations = 0;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(10);
    const std::size_t d = 1 + rng.below(32);
    const std::size_t n = k + rng.below(5000 - k + 1);
    const std::size_t modes = 1 + rng.below(12);
    std::vector<double> centres(modes * d);
    for (auto& v : centres) v = rng.gaussian() * 4;
    std::vector<float> pts(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t m = rng.below(modes);
      for (std::size_t j = 0; j < d; ++j)
        pts[i * d + j] = static_cast<float>(centres[m * d + j] + rng.gaussian());
    }
    const InMemoryPixels data(std::move(pts), d);
    LloydConfig cfg;
    cfg.rel_tol = 0;
    const auto model = lloyd_fit(data, kmeanspp_init(data, k, rng.next()), cfg);
    const auto& h = model.inertia_history;
    iterations += h.size();
    const double eps = 1e-6 * h.front();
    for (std::size_t i = 1; i < h.size(); ++i) {
      worst = std::max(worst, (h[i] - h[i - 1]) / h.front());
      if (h[i] > h[i - 1] + eps) ++violations;
    }
  }
  return {violations == 0,
          fmt("100 datasets, %zu Lloyd iterations, %zu violations of eps = 1e-6 J0, "
              "largest relative rise %.2e",
              iterations, violations, worst)};
}

Verdict kmeans_oracle() {
  SplitMix64 rng(77);
  int hits = 0;
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4 + rng.below(9);
    const std::size_t k = 2 + rng.below(2);
    const std::size_t d = 1 + rng.below(3);
    std::vector<float> pts(n * d);
    for (auto& v : pts) v = static_cast<float>(rng.gaussian());
    const std::vector<double> as_double(pts.begin(), pts.end());
    const double opt = oracle::kmeans_optimum(as_double, d, k);
    const InMemoryPixels data(std::move(pts), d);
    LloydConfig cfg;
    cfg.rel_tol = 0;
    const auto model = kmeans_fit(data, k, rng.next(), cfg, 50);
    const double j = inertia(model, data);
    worst = std::max(worst, j - opt);
    if (std::abs(j - opt) <= 1e-9) ++hits;
  }
  return {hits >= 18,
          fmt("%d/20 instances within 1e-9 of the enumerated optimum (need 18), "
              "largest gap %.3e",
              hits, worst)};
}

Verdict gradient_check() {
  constexpr std::size_t kInstances = 20;
  std::vector<double> worst(kInstances, 0);
  std::vector<std::size_t> compared(kInstances, 0), kinked(kInstances, 0);
  parallel_for(kInstances, 0, [&](std::size_t inst) {
    SplitMix64 rng(derive_seed(4242, inst));
    const std::size_t nc = 2 + rng.below(4);
    auto p = fcn_init<double>(nc, rng.next());
    for (auto t : p.tensors())
      if (t.size() <= 32) for (auto& v : t) v = 0.1 * rng.gaussian();  // biases
    std::vector<TrainExample<double>> batch;
    const std::size_t nb = 1 + rng.below(2);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t h = 5 + rng.below(2), w = 5 + rng.below(2);
      TrainExample<double> ex{Image<double>{h, w, std::vector<double>(h * w * 3)}, MaskImage(w, h)};
      for (auto& v : ex.image.data) v = rng.uniform();
      for (auto& v : ex.mask.labels)
        v = rng.below(10) == 0 ? MaskImage::kIgnore : static_cast<std::uint8_t>(rng.below(nc));
      ex.mask.labels[0] = 0;
      batch.push_back(std::move(ex));
    }
    const auto analytic = fcn_loss_and_grad<double>(p, batch);
    const auto fd = oracle::fd_gradient(p, batch, 1e-5);
    std::vector<bool> skip;
    for (const auto& t : analytic.grad.tensors()) skip.resize(skip.size() + t.size(), false);
    for (const auto i : fd.kinked) skip[i] = true;
    kinked[inst] = fd.kinked.size();
    const auto ta = analytic.grad.tensors();
    const auto tf = fd.grad.tensors();
    std::size_t flat = 0;
    for (std::size_t t = 0; t < ta.size(); ++t) {
      for (std::size_t i = 0; i < ta[t].size(); ++i, ++flat) {
        if (skip[flat]) continue;
        const double a = ta[t][i], f = tf[t][i];
        worst[inst] = std::max(worst[inst], std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-6}));
        ++compared[inst];
      }
    }
  });
  double w = 0;
  std::size_t c = 0, kk = 0;
  for (std::size_t i = 0; i < kInstances; ++i) {
    w = std::max(w, worst[i]);
    c += compared[i];
    kk += kinked[i];
  }
  return {w <= 1e-3,
          fmt("20 instances, %zu parameters compared, max relative error %.2e (<= 1e-3, "
              "floor 1e-6); %zu steps straddled a ReLU kink and were skipped",
              c, w, kk)};
}

Verdict direction_recovery() {
  constexpr std::size_t kDim = 16;
  SplitMix64 rng(99);
  std::vector<double> truth(kDim);
  double n2 = 0;
  for (auto& v : truth) n2 += (v = rng.gaussian()) * v;
  for (auto& v : truth) v /= std::sqrt(n2);
  std::vector<LatentPair> pairs;
  while (pairs.size() < 1000) {
    LatentPair p;
    p.w.resize(kDim);
    double s = 0;
    for (std::size_t j = 0; j < kDim; ++j) s += (p.w[j] = rng.gaussian()) * truth[j];
    if (std::abs(s) < 0.5) continue;
    p.b = s > 0 ? 1 : 0;
    pairs.push_back(std::move(p));
  }
  const auto d = fit_direction(pairs);
  double cos = 0;
  for (std::size_t j = 0; j < kDim; ++j) cos += d.g[j] * truth[j];
  return {cos >= 0.99 && d.train_accuracy == 1.0,
          fmt("cosine %.5f (>= 0.99), train accuracy %.4f (== 1.0)", cos, d.train_accuracy)};
}

Verdict hungarian() {
  SplitMix64 rng(5150);
  int agree = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + rng.below(4);
    const std::size_t p = c + rng.below(7 - c);
    ConfusionMatrix cm(p, c);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < c; ++j) cm.at(i, j) = rng.below(trial % 3 == 0 ? 3 : 500);
    std::vector<std::vector<std::int64_t>> w(c, std::vector<std::int64_t>(p));
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t i = 0; i < p; ++i) w[j][i] = static_cast<std::int64_t>(cm.at(i, j));
    const auto cols = max_weight_assignment(w);
    std::uint64_t total = 0;
    for (std::size_t j = 0; j < c; ++j) total += cm.at(cols[j], j);
    if (total == oracle::best_matching_total(cm)) ++agree;
  }
  return {agree == 50, fmt("%d/50 random confusion matrices up to 6x4 match the brute-force maximum", agree)};
}

std::vector<std::string> run_pipeline(const fs::path& root, const std::string& threads) {
  auto p = [&](const char* name) { return (root / name).string(); };
  const std::vector<std::vector<std::string>> steps{
      {"toygen", "--out", p("train"), "--n", "40", "--seed", "11"},
      {"toygen", "--out", p("test"), "--n", "8", "--seed", "11", "--first-index", "40"},
      {"cluster", "--manifest", p("train/manifest.json"), "--k", "4", "--seed", "2", "--out",
       p("model"), "--max-samples", "0", "--f64"},
      {"synth", "--manifest", p("train/manifest.json"), "--model", p("model"), "--out", p("syn")},
      {"fit-direction", "--manifest", p("train/manifest.json"), "--out", p("dir")},
      {"manipulate", "--latent", p("train/s00000_latent.ft"), "--direction", p("dir"), "--alpha",
       "1.5", "--out", p("moved.ft")},
      {"distill", "--manifest", p("syn/manifest.json"), "--classes", "4", "--out", p("fcn"),
       "--epochs", "3", "--batch", "8", "--seed", "9", "--f64"},
      {"predict", "--params", p("fcn"), "--manifest", p("test/manifest.json"), "--out", p("pred"),
       "--f64"},
      {"eval", "--pred-manifest", p("pred/manifest.json"), "--gt-manifest", p("test/manifest.json"),
       "--match", "one_to_one", "--out", p("report.json")},
  };
  std::vector<std::string> failed;
  for (auto args : steps) {
    args.insert(args.begin(), {"--threads", threads});
    std::ostringstream out, err;
    if (run(args, out, err) != 0) failed.push_back(args[2] + ": " + err.str());
  }
  return failed;
}

Verdict determinism() {
  test::TempDir dir;
  const auto fa = run_pipeline(dir / "a", "1");
  const auto fb = run_pipeline(dir / "b", "4");
  if (!fa.empty() || !fb.empty()) {
    return {false, "pipeline step failed: " + (fa.empty() ? fb : fa).front()};
  }
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = dir / "b" / fs::relative(e.path(), dir / "a");
    if (!fs::exists(other) || read_file_bytes(e.path()) != read_file_bytes(other)) ++differ;
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "b")) files_b += e.is_regular_file();
  return {differ == 0 && files == files_b,
          fmt("two 64-bit runs (1 and 4 threads) of toygen, cluster, synth, fit-direction, "
              "manipulate, distill, predict, eval: %zu/%zu artifacts byte-identical",
              files - differ, files)};
}

std::vector<std::uint8_t> mutate(std::vector<std::uint8_t> b, SplitMix64& rng) {
  const int edits = 1 + static_cast<int>(rng.below(4));
  for (int e = 0; e < edits; ++e) {
    const std::uint64_t kind = rng.below(7);
    if (b.empty()) b.push_back(0);
    const std::size_t at = rng.below(b.size());
    switch (kind) {
      case 0: b[at] ^= static_cast<std::uint8_t>(1u << rng.below(8)); break;
      case 1: b[at] = static_cast<std::uint8_t>(rng.below(256)); break;
      case 2: b.resize(at); break;
      case 3: b.insert(b.begin() + static_cast<long>(at), static_cast<std::uint8_t>(rng.below(256))); break;
      case 4: b.erase(b.begin() + static_cast<long>(at)); break;
      case 5:  // interesting bytes
        b[at] = std::array<std::uint8_t, 6>{0, 0xFF, 0x7F, 0x80, '"', '{'}[rng.below(6)];
        break;
      default:  // splice a run of random bytes
        for (std::size_t i = 0, n = rng.below(16); i < n && at + i < b.size(); ++i)
          b[at + i] = static_cast<std::uint8_t>(rng.below(256));
        break;
    }
  }
  return b;
}

Verdict fuzz() {
  test::TempDir dir;
  SplitMix64 rng(31337);
  std::vector<std::vector<std::uint8_t>> tensors{
      encode_tensor(FeatureTensor::from_f32({3, 4, 4}, std::vector<float>(48, 0.5f))),
      encode_tensor(FeatureTensor::from_f32({1}, {1.0f})),
      encode_tensor(FeatureTensor::from_u8({2, 3}, {1, 2, 3, 4, 5, 6})),
  };
  // Manifest seeds reference files that exist, so valid parses are possible.
  for (const char* f : {"a.png", "a.ft", "b.png", "b.ft", "l.ft", "m.png"}) write_text_atomic(dir / f, "x");
  const std::vector<std::string> manifests{
      R"({"version":1,"feature_layer":3,"samples":[{"id":"a","image_path":"a.png","feature_path":"a.ft"},)"
      R"({"id":"b","image_path":"b.png","feature_path":"b.ft","latent_path":"l.ft","mask_path":"m.png","attr_label":1}]})",
      R"({"version":1,"feature_layer":0,"samples":[]})",
  };
  std::size_t typed = 0, parsed = 0, untyped = 0;
  std::string first_untyped;
  for (int i = 0; i < 10000; ++i) {
    const bool tensor = i % 2 == 0;
    std::vector<std::uint8_t> seed;
    if (tensor) {
      seed = tensors[rng.below(tensors.size())];
    } else {
      const auto& m = manifests[rng.below(manifests.size())];
      seed.assign(m.begin(), m.end());
    }
    const auto bytes = mutate(seed, rng);
    const auto path = dir / (tensor ? "f.ft" : "manifest.json");
    write_file_atomic(path, bytes);
    try {
      if (tensor) {
        const auto t = read_tensor(path);
        if (encode_tensor(t) != bytes) throw std::logic_error("tensor did not re-encode to its bytes");
      } else {
        const auto m = read_manifest(path);
        validate_manifest(m);
      }
      ++parsed;
    } catch (const Error&) {
      ++typed;
    } catch (const std::exception& e) {
      if (untyped++ == 0) first_untyped = e.what();
    }
  }
  return {untyped == 0 && typed + parsed == 10000,
          fmt("10000 mutated FT01/manifest files: %zu typed errors, %zu valid parses, %zu other "
              "outcomes%s%s",
              typed, parsed, untyped, untyped ? "; first: " : "", first_untyped.c_str())};
}

}  // namespace

int main() {
  Pipeline pipeline;
  report("end_to_end_clustering", [&] { return end_to_end(pipeline); });
  report("distillation", [&] { return distillation(pipeline); });
  report("lloyd_monotonicity", lloyd_monotone);
  report("kmeans_oracle_equivalence", kmeans_oracle);
  report("gradient_check", gradient_check);
  report("latent_direction_recovery", direction_recovery);
  report("hungarian_vs_brute_force", hungarian);
  report("determinism", determinism);
  report("format_fuzzing", fuzz);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
