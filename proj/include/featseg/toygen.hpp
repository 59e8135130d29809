#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "featseg/image.hpp"
#include "featseg/manifest.hpp"
#include "featseg/tensor.hpp"

namespace featseg {

/// Procedural stand-in for a generator: face-like images whose feature
/// maps cluster by region, with a planted latent attribute (a hat).
///
/// Regions in paint order: 0 background, 1 face disk, 2 eyes, 3 mouth,
/// 4 nose, 5 brows, 6 cheeks, 7 chin. n_regions keeps the first n.
struct ToyConfig {
  std::uint32_t image_size = 64;
  std::uint32_t feature_size = 16;
  std::uint32_t feature_dim = 24;
  std::uint32_t n_regions = 4;
  double noise_sigma = 0.1;
  std::uint32_t latent_dim = 16;
  std::uint64_t dataset_seed = 0;
  /// Label the hat as its own class (id n_regions) instead of background.
  bool attr_class = false;

  std::uint32_t n_classes() const { return n_regions + (attr_class ? 1 : 0); }
};

void validate_toy_config(const ToyConfig& cfg);

/// Per-dataset constants derived from dataset_seed.
struct ToyWorld {
  std::vector<double> embeddings;  // n_classes x feature_dim
  std::vector<double> attr_direction;  // unit vector, latent_dim
  std::vector<std::array<double, 3>> colors;  // n_regions + 1 (hat last)
  std::uint32_t embedding_draws = 0;  // rejection rounds used for E
};

/// Draws E until every pair of rows is at least 3 * sigma * sqrt(D)
/// apart, then the attribute direction and the region colour bases.
ToyWorld make_toy_world(const ToyConfig& cfg);

struct ToySample {
  RgbImage image;
  FeatureTensor features;  // D x fs x fs, f32
  MaskImage gt_mask;       // image resolution
  MaskImage feature_mask;  // region of every feature cell
  std::vector<float> latent;
  int attr_label = 0;
};

ToySample toy_sample(const ToyConfig& cfg, const ToyWorld& world,
                     std::uint64_t sample_seed);
ToySample toy_sample(const ToyConfig& cfg, std::uint64_t sample_seed);

/// Seed of sample `index`: the dataset seed mixed with the index through
/// SplitMix64.
std::uint64_t toy_sample_seed(std::uint64_t dataset_seed, std::uint64_t index);

/// Ground truth at feature resolution: each cell takes the most frequent
/// label of its pixels. Ties go to `prefer` at that cell when it is one of
/// the tied labels, otherwise to the lowest id. toy_sample passes the region
/// under each cell centre.
MaskImage downsample_majority(const MaskImage& mask, std::uint32_t out_size,
                              const MaskImage* prefer = nullptr);

/// Writes samples first_index .. first_index + n - 1 and manifest.json
/// into out_dir. mask_path carries the ground-truth mask.
DatasetManifest toy_dataset(const ToyConfig& cfg, std::size_t n,
                            const std::filesystem::path& out_dir,
                            std::size_t first_index = 0, unsigned threads = 0);

}  // namespace featseg
