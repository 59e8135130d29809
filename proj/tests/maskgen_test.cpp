#include <doctest.h>

#include <map>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/maskgen.hpp"
#include "featseg/rng.hpp"
#include "featseg/toygen.hpp"
#include "support.hpp"

using namespace featseg;

namespace {

LabelGrid grid(std::uint32_t w, std::uint32_t h, std::vector<std::uint32_t> labels) {
  LabelGrid g;
  g.width = w;
  g.height = h;
  g.labels = std::move(labels);
  return g;
}

ClusterModel toy_model(const ToyConfig& cfg) {
  // Centroids at the dataset embeddings: an exact clustering of toy features.
  const auto world = make_toy_world(cfg);
  ClusterModel m;
  m.k = cfg.n_classes();
  m.dim = cfg.feature_dim;
  m.centroids = world.embeddings;
  return m;
}

}  // namespace

TEST_CASE("2x2 grid upsamples to 2x2 blocks") {
  const auto m = upsample_labels(grid(2, 2, {0, 1, 2, 3}), 4, 4);
  const std::vector<std::uint8_t> want{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3};
  CHECK(m.labels == want);
}

TEST_CASE("upsampling to the same size is the identity") {
  const auto g = grid(3, 2, {4, 1, 0, 2, 2, 9});
  const auto m = upsample_labels(g, 3, 2);
  for (std::size_t i = 0; i < g.labels.size(); ++i) CHECK(m.labels[i] == g.labels[i]);
}

TEST_CASE("64x64 to 1024x1024 scales every cell by exactly 256 pixels") {
  SplitMix64 rng(3);
  std::vector<std::uint32_t> labels(64 * 64);
  for (auto& v : labels) v = static_cast<std::uint32_t>(rng.below(10));
  const auto g = grid(64, 64, labels);
  const auto m = upsample_labels(g, 1024, 1024);
  std::map<int, std::size_t> cells, pixels;
  for (const auto v : labels) ++cells[static_cast<int>(v)];
  for (const auto v : m.labels) ++pixels[v];
  for (const auto& [label, n] : cells) CHECK(pixels[label] == 256 * n);
  // Brute-force source cell for a sample of pixels.
  for (std::uint32_t y = 0; y < 1024; y += 37) {
    for (std::uint32_t x = 0; x < 1024; x += 29) {
      CHECK(m.at(x, y) == g.at(x / 16, y / 16));
    }
  }
}

TEST_CASE("non-integer scale follows the pixel-centre rule") {
  const auto g = grid(3, 1, {0, 1, 2});
  const auto m = upsample_labels(g, 7, 1);
  for (std::uint32_t x = 0; x < 7; ++x) {
    const double src = (x + 0.5) * 3.0 / 7.0;
    CHECK(m.at(x, 0) == static_cast<std::uint8_t>(src));
  }
}

TEST_CASE("upsample error contract") {
  CHECK_THROWS_AS(upsample_labels(grid(2, 2, {0, 1, 2, 3}), 0, 4), ValidationError);
  CHECK_THROWS_AS(upsample_labels(grid(2, 2, {0, 1, 2, 3}), 1, 1), ValidationError);
  CHECK_THROWS_AS(upsample_labels(grid(1, 1, {300}), 2, 2), ValidationError);
}

TEST_CASE("classmap relabelling") {
  MaskImage m(4, 1);
  m.labels = {0, 2, 5, 255};
  ClassMap merge;
  merge.n_classes = 2;
  merge.cluster_to_class = {0, 0, 1, 0, 0, 1};
  CHECK(apply_classmap(m, merge).labels == std::vector<std::uint8_t>{0, 1, 1, 255});
  CHECK(apply_classmap(m, ClassMap::identity(6)) == m);

  MaskImage seven(1, 1);
  seven.labels = {7};
  try {
    apply_classmap(seven, merge);
    FAIL("accepted");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("7") != std::string::npos);
  }
}

TEST_CASE("classmap file round trip and validation") {
  test::TempDir dir;
  ClassMap cm;
  cm.n_classes = 3;
  cm.cluster_to_class = {2, 0, 1, 1};
  write_classmap(cm, dir / "cm.json");
  CHECK(read_classmap(dir / "cm.json") == cm);
  cm.cluster_to_class[0] = 3;
  CHECK_THROWS_AS(validate_classmap(cm), ValidationError);
  write_text_atomic(dir / "bad.json", "{\"n_classes\": 2}");
  CHECK_THROWS_AS(read_classmap(dir / "bad.json"), FormatError);
}

TEST_CASE("synth on a toy dataset: one mask per sample at image size") {
  test::TempDir dir;
  ToyConfig cfg;
  cfg.dataset_seed = 5;
  const auto in = toy_dataset(cfg, 10, dir / "toy");
  const auto model = toy_model(cfg);
  const auto out = synth_dataset(in, model, std::nullopt, dir / "a");
  REQUIRE(out.samples.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& s = out.samples[i];
    REQUIRE(s.mask_path);
    const auto mask = read_mask_png(out.resolve(*s.mask_path));
    CHECK(mask.width == cfg.image_size);
    CHECK(mask.height == cfg.image_size);
    CHECK(s.id == in.samples[i].id);
  }
  // The written manifest reloads from its own directory.
  CHECK(read_manifest(dir / "a" / "manifest.json") == out);

  // Centroids at the embeddings reproduce the toy feature-cell labels.
  const auto sample = toy_sample(cfg, toy_sample_seed(cfg.dataset_seed, 3));
  const auto mask = read_mask_png(out.resolve(*out.samples[3].mask_path));
  const auto cells = upsample_labels(
      [&] {
        LabelGrid g;
        g.width = g.height = cfg.feature_size;
        g.labels.assign(sample.feature_mask.labels.begin(), sample.feature_mask.labels.end());
        return g;
      }(),
      cfg.image_size, cfg.image_size);
  CHECK(mask == cells);
}

TEST_CASE("synth is deterministic across output directories") {
  test::TempDir dir;
  ToyConfig cfg;
  const auto in = toy_dataset(cfg, 4, dir / "toy");
  const auto model = toy_model(cfg);
  const auto a = synth_dataset(in, model, std::nullopt, dir / "a");
  const auto b = synth_dataset(in, model, ClassMap::identity(4), dir / "b", {.threads = 3});
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(read_file_bytes(a.resolve(*a.samples[i].mask_path)) ==
          read_file_bytes(b.resolve(*b.samples[i].mask_path)));
  }
}

TEST_CASE("synth errors name the sample") {
  test::TempDir dir;
  ToyConfig cfg;
  auto in = toy_dataset(cfg, 3, dir / "toy");
  in.samples[1].feature_path = "s00001_missing.ft";
  try {
    synth_dataset(in, toy_model(cfg), std::nullopt, dir / "out");
    FAIL("accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
    CHECK(std::string(e.what()).find("s00001") != std::string::npos);
  }
  in = toy_dataset(cfg, 3, dir / "toy");
  in.samples[2].feature_path = "";
  try {
    synth_dataset(in, toy_model(cfg), std::nullopt, dir / "out2");
    FAIL("accepted");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("s00002") != std::string::npos);
  }
}

TEST_CASE("synth rejects a feature/model channel mismatch") {
  test::TempDir dir;
  ToyConfig cfg;
  const auto in = toy_dataset(cfg, 2, dir / "toy");
  ClusterModel m;
  m.k = 2;
  m.dim = 3;
  m.centroids = {0, 0, 0, 1, 1, 1};
  try {
    synth_dataset(in, m, std::nullopt, dir / "out");
    FAIL("accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::validation);
  }
}
