#include "featseg/toygen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "featseg/error.hpp"
#include "featseg/parallel.hpp"
#include "featseg/rng.hpp"

namespace featseg {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kMaxRegions = 8;
constexpr double kColorJitter = 0.08;
constexpr double kPixelNoise = 0.02;
constexpr double kMinColorGap = 0.35;
constexpr std::uint32_t kMaxEmbeddingDraws = 1000;

struct Geometry {
  double cx, cy, r, scale;
};

bool in_disk(double x, double y, double cx, double cy, double r) {
  return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
}

bool in_box(double x, double y, double cx, double cy, double hw, double hh) {
  return std::abs(x - cx) <= hw && std::abs(y - cy) <= hh;
}

// Region id for a pixel centre before the hat is painted.
std::uint8_t region_at(double x, double y, const Geometry& g,
                       std::uint32_t n_regions) {
  const double cx = g.cx, cy = g.cy, r = g.r;
  std::uint8_t label = 0;
  if (in_disk(x, y, cx, cy, r)) label = 1;
  if (label == 0) return 0;
  if (n_regions > 2 && (in_disk(x, y, cx - 0.4 * r, cy - 0.2 * r, 0.32 * r) ||
                        in_disk(x, y, cx + 0.4 * r, cy - 0.2 * r, 0.32 * r))) {
    label = 2;
  }
  if (n_regions > 3 && in_box(x, y, cx, cy + 0.45 * r, 0.45 * r, 0.22 * r)) {
    label = 3;
  }
  if (n_regions > 4 && in_box(x, y, cx, cy + 0.05 * r, 0.08 * r, 0.15 * r)) {
    label = 4;
  }
  if (n_regions > 5 && (in_box(x, y, cx - 0.4 * r, cy - 0.6 * r, 0.22 * r, 0.05 * r) ||
                        in_box(x, y, cx + 0.4 * r, cy - 0.6 * r, 0.22 * r, 0.05 * r))) {
    label = 5;
  }
  if (n_regions > 6 && (in_disk(x, y, cx - 0.62 * r, cy + 0.22 * r, 0.12 * r) ||
                        in_disk(x, y, cx + 0.62 * r, cy + 0.22 * r, 0.12 * r))) {
    label = 6;
  }
  if (n_regions > 7 && in_box(x, y, cx, cy + 0.8 * r, 0.18 * r, 0.06 * r)) {
    label = 7;
  }
  return label;
}

bool in_hat(double x, double y, const Geometry& g) {
  const double top = g.cy - g.r - 7.0 * g.scale;
  const double bottom = g.cy - 0.62 * g.r;
  return std::abs(x - g.cx) <= 0.85 * g.r && y >= top && y <= bottom;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

void validate_toy_config(const ToyConfig& cfg) {
  if (cfg.image_size < 8) throw ValidationError("toygen: image_size must be >= 8");
  if (cfg.feature_size == 0 || cfg.image_size % cfg.feature_size != 0) {
    throw ValidationError("toygen: feature_size must divide image_size");
  }
  if (cfg.n_regions < 2 || cfg.n_regions > kMaxRegions) {
    throw ValidationError("toygen: n_regions must be in 2..8");
  }
  if (cfg.feature_dim == 0) throw ValidationError("toygen: feature_dim must be > 0");
  if (cfg.latent_dim == 0) throw ValidationError("toygen: latent_dim must be > 0");
  if (!(cfg.noise_sigma >= 0.0)) {
    throw ValidationError("toygen: noise_sigma must be >= 0");
  }
}

ToyWorld make_toy_world(const ToyConfig& cfg) {
  validate_toy_config(cfg);
  SplitMix64 rng(cfg.dataset_seed);
  ToyWorld world;
  const std::size_t rows = cfg.n_classes();
  const std::size_t d = cfg.feature_dim;
  const double min_gap = 3.0 * cfg.noise_sigma * std::sqrt(static_cast<double>(d));
  for (;;) {
    if (world.embedding_draws == kMaxEmbeddingDraws) {
      throw ValidationError("toygen: cannot draw separable embeddings; "
                            "lower noise_sigma or raise feature_dim");
    }
    ++world.embedding_draws;
    world.embeddings.resize(rows * d);
    for (double& v : world.embeddings) v = rng.gaussian();
    bool separated = true;
    for (std::size_t a = 0; a < rows && separated; ++a) {
      for (std::size_t b = a + 1; b < rows; ++b) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = world.embeddings[a * d + j] - world.embeddings[b * d + j];
          d2 += diff * diff;
        }
        // Identical rows are never acceptable, even with zero noise.
        if (std::sqrt(d2) < min_gap || d2 == 0.0) {
          separated = false;
          break;
        }
      }
    }
    if (separated) break;
  }

  world.attr_direction.resize(cfg.latent_dim);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (double& v : world.attr_direction) {
      v = rng.gaussian();
      norm2 += v * v;
    }
  } while (norm2 == 0.0);
  for (double& v : world.attr_direction) v /= std::sqrt(norm2);

  // Base colours: rejection until every pair is visibly distinct.
  const std::size_t n_colors = cfg.n_regions + 1;
  for (;;) {
    world.colors.clear();
    for (std::size_t i = 0; i < n_colors; ++i) {
      world.colors.push_back({0.15 + 0.7 * rng.uniform(), 0.15 + 0.7 * rng.uniform(),
                              0.15 + 0.7 * rng.uniform()});
    }
    bool distinct = true;
    for (std::size_t a = 0; a < n_colors && distinct; ++a) {
      for (std::size_t b = a + 1; b < n_colors; ++b) {
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          d2 += (world.colors[a][c] - world.colors[b][c]) *
                (world.colors[a][c] - world.colors[b][c]);
        }
        if (std::sqrt(d2) < kMinColorGap) {
          distinct = false;
          break;
        }
      }
    }
    if (distinct) break;
  }
  return world;
}

std::uint64_t toy_sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  return derive_seed(dataset_seed, index);
}

MaskImage downsample_majority(const MaskImage& mask, std::uint32_t out_size,
                              const MaskImage* prefer) {
  if (out_size == 0 || mask.width % out_size != 0 || mask.height % out_size != 0) {
    throw ValidationError("downsample: size must divide the mask dimensions");
  }
  const std::uint32_t cw = mask.width / out_size;
  const std::uint32_t ch = mask.height / out_size;
  if (prefer && (prefer->width != out_size || prefer->height != out_size)) {
    throw ValidationError("downsample: tie-break grid has the wrong size");
  }
  MaskImage out(out_size, out_size);
  std::array<std::uint32_t, 256> counts{};
  for (std::uint32_t gy = 0; gy < out_size; ++gy) {
    for (std::uint32_t gx = 0; gx < out_size; ++gx) {
      counts.fill(0);
      for (std::uint32_t y = gy * ch; y < (gy + 1) * ch; ++y) {
        for (std::uint32_t x = gx * cw; x < (gx + 1) * cw; ++x) {
          ++counts[mask.at(x, y)];
        }
      }
      std::size_t best = 0;
      for (std::size_t l = 1; l < counts.size(); ++l) {
        if (counts[l] > counts[best]) best = l;
      }
      if (prefer) {
        const std::uint8_t p = prefer->at(gx, gy);
        if (p != best && counts[p] == counts[best]) best = p;
      }
      out.at(gx, gy) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

ToySample toy_sample(const ToyConfig& cfg, std::uint64_t sample_seed) {
  return toy_sample(cfg, make_toy_world(cfg), sample_seed);
}

ToySample toy_sample(const ToyConfig& cfg, const ToyWorld& world,
                     std::uint64_t sample_seed) {
  validate_toy_config(cfg);
  SplitMix64 rng(sample_seed);
  ToySample s;

  // Latent and planted attribute.
  s.latent.resize(cfg.latent_dim);
  double proj = 0.0;
  for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
    const double v = rng.gaussian();
    s.latent[j] = static_cast<float>(v);
    proj += static_cast<double>(s.latent[j]) * world.attr_direction[j];
  }
  s.attr_label = proj > 0.0 ? 1 : 0;

  const std::uint32_t size = cfg.image_size;
  const double scale = size / 64.0;
  Geometry g{};
  g.scale = scale;
  g.cx = size / 2.0 + (rng.uniform() * 6.0 - 3.0) * scale;
  g.cy = size / 2.0 + 2.0 * scale + (rng.uniform() * 6.0 - 3.0) * scale;
  g.r = (21.0 + 4.0 * rng.uniform()) * scale;

  std::vector<std::array<double, 3>> colors = world.colors;
  for (auto& c : colors) {
    for (double& v : c) v = clamp01(v + (rng.uniform() * 2.0 - 1.0) * kColorJitter);
  }

  const std::uint8_t hat_label =
      cfg.attr_class ? static_cast<std::uint8_t>(cfg.n_regions) : 0;
  s.gt_mask = MaskImage(size, size);
  s.image = RgbImage(size, size);
  for (std::uint32_t y = 0; y < size; ++y) {
    for (std::uint32_t x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      std::uint8_t region = region_at(px, py, g, cfg.n_regions);
      std::size_t color = region;
      if (s.attr_label == 1 && in_hat(px, py, g)) {
        region = hat_label;
        color = cfg.n_regions;
      }
      s.gt_mask.at(x, y) = region;
      std::uint8_t* rgb = s.image.pixels.data() + (std::size_t{y} * size + x) * 3;
      for (int c = 0; c < 3; ++c) {
        const double v = clamp01(colors[color][c] + kPixelNoise * rng.gaussian());
        rgb[c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }

  const std::uint32_t fs_ = cfg.feature_size;
  const std::size_t d = cfg.feature_dim;
  MaskImage centres(fs_, fs_);
  const double cell = static_cast<double>(size) / fs_;
  for (std::uint32_t gy = 0; gy < fs_; ++gy) {
    for (std::uint32_t gx = 0; gx < fs_; ++gx) {
      const double px = (gx + 0.5) * cell, py = (gy + 0.5) * cell;
      std::uint8_t region = region_at(px, py, g, cfg.n_regions);
      if (s.attr_label == 1 && in_hat(px, py, g)) region = hat_label;
      centres.at(gx, gy) = region;
    }
  }
  s.feature_mask = downsample_majority(s.gt_mask, fs_, &centres);
  const MaskImage& cells = s.feature_mask;
  std::vector<float> features(d * fs_ * fs_);
  for (std::size_t ch = 0; ch < d; ++ch) {
    for (std::size_t cell = 0; cell < std::size_t{fs_} * fs_; ++cell) {
      const std::size_t region = cells.labels[cell];
      features[ch * fs_ * fs_ + cell] = static_cast<float>(
          world.embeddings[region * d + ch] + cfg.noise_sigma * rng.gaussian());
    }
  }
  s.features = FeatureTensor::from_f32({d, fs_, fs_}, std::move(features));
  return s;
}

DatasetManifest toy_dataset(const ToyConfig& cfg, std::size_t n,
                            const fs::path& out_dir, std::size_t first_index,
                            unsigned threads) {
  if (n == 0) throw ValidationError("toygen: n must be >= 1");
  const ToyWorld world = make_toy_world(cfg);
  DatasetManifest m;
  m.feature_layer = 0;
  m.base_dir = out_dir;
  m.samples.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const std::size_t index = first_index + i;
    char id[32];
    std::snprintf(id, sizeof(id), "s%05zu", index);
    const ToySample s = toy_sample(cfg, world, toy_sample_seed(cfg.dataset_seed, index));
    SampleRecord rec;
    rec.id = id;
    rec.image_path = rec.id + "_image.png";
    rec.feature_path = rec.id + "_features.ft";
    rec.latent_path = rec.id + "_latent.ft";
    rec.mask_path = rec.id + "_gt.png";
    rec.attr_label = s.attr_label;
    write_rgb_png(s.image, out_dir / rec.image_path);
    write_tensor(s.features, out_dir / rec.feature_path);
    write_tensor(FeatureTensor::from_f32({s.latent.size()}, s.latent),
                 out_dir / *rec.latent_path);
    write_mask_png(s.gt_mask, out_dir / *rec.mask_path);
    m.samples[i] = std::move(rec);
  });
  write_palette_json(static_cast<int>(cfg.n_classes()), out_dir / "palette.json");
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace featseg
