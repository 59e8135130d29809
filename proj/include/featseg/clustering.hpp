#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "featseg/tensor.hpp"

namespace featseg {

/// A block of consecutive points, row-major (n x dim).
struct PointChunk {
  std::vector<float> owned;
  std::span<const float> points;
};

/// Read-only stream of N feature vectors of dimension D, delivered in a
/// fixed sequence of chunks. Chunk boundaries and order are part of the
/// numeric contract: every reduction over the dataset sums per-chunk
/// partials in chunk order.
class PixelDataset {
 public:
  virtual ~PixelDataset() = default;

  virtual std::size_t n_points() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t n_chunks() const = 0;
  /// Index of the first point of chunk `c`; chunk_offset(n_chunks()) is
  /// n_points().
  virtual std::size_t chunk_offset(std::size_t c) const = 0;
  /// Thread-safe.
  virtual PointChunk load_chunk(std::size_t c) const = 0;

  std::size_t chunk_size(std::size_t c) const {
    return chunk_offset(c + 1) - chunk_offset(c);
  }
};

/// Points held in memory, split into fixed-size chunks.
class InMemoryPixels final : public PixelDataset {
 public:
  static constexpr std::size_t kDefaultChunk = 8192;

  InMemoryPixels(std::vector<float> points, std::size_t dim,
                 bool l2_normalize = false,
                 std::size_t chunk_points = kDefaultChunk);

  std::size_t n_points() const override { return n_; }
  std::size_t dim() const override { return dim_; }
  std::size_t n_chunks() const override;
  std::size_t chunk_offset(std::size_t c) const override;
  PointChunk load_chunk(std::size_t c) const override;

 private:
  std::vector<float> points_;
  std::size_t dim_;
  std::size_t n_;
  std::size_t chunk_;
};

/// Pixels of a list of C x H x W feature maps; one chunk per file. Files
/// are preloaded when they fit in `preload_budget_bytes`, otherwise each
/// chunk is re-read from disk on demand.
class FeatureMapPixels final : public PixelDataset {
 public:
  static constexpr std::size_t kDefaultPreloadBudget = std::size_t{1} << 30;

  FeatureMapPixels(std::vector<std::filesystem::path> files,
                   bool l2_normalize = false,
                   std::size_t preload_budget_bytes = kDefaultPreloadBudget);

  std::size_t n_points() const override { return offsets_.back(); }
  std::size_t dim() const override { return dim_; }
  std::size_t n_chunks() const override { return files_.size(); }
  std::size_t chunk_offset(std::size_t c) const override {
    return offsets_[c];
  }
  PointChunk load_chunk(std::size_t c) const override;

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

 private:
  std::vector<float> load_points(std::size_t c) const;

  std::vector<std::filesystem::path> files_;
  std::vector<std::size_t> offsets_;
  std::vector<std::vector<float>> cache_;
  std::size_t dim_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  bool l2_normalize_;
};

/// Transposes a C x H x W feature map into H*W row-major points.
std::vector<float> feature_map_points(const FeatureTensor& features,
                                      bool l2_normalize);

/// Scales a vector to unit L2 norm; the zero vector is left unchanged.
void l2_normalize_in_place(std::span<float> v);

/// K centroids in D-dim feature space.
struct ClusterModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim, row-major
  int feature_layer = 0;
  bool l2_normalized = false;
  std::vector<double> inertia_history;

  std::span<const double> centroid(std::size_t i) const {
    return std::span(centroids).subspan(i * dim, dim);
  }
};

enum class Precision { f32, f64 };

struct LloydConfig {
  std::size_t max_iters = 300;
  double rel_tol = 1e-4;
  /// Unset selects full-batch Lloyd.
  std::optional<std::size_t> minibatch_size;
  std::uint64_t seed = 0;  // minibatch chunk order
  Precision precision = Precision::f32;
  unsigned threads = 0;  // 0: default_thread_count()
};

/// Above this many points the CLI switches to minibatch updates.
inline constexpr std::size_t kMinibatchThreshold = std::size_t{1} << 22;
inline constexpr std::size_t kDefaultMinibatch = 65536;

/// k-means++ seeding driven by SplitMix64(seed). Squared distances are
/// accumulated in double in chunk order, so the result depends only on
/// (data order, k, seed).
ClusterModel kmeanspp_init(const PixelDataset& data, std::size_t k,
                           std::uint64_t seed, unsigned threads = 0);

/// Lloyd iterations (or minibatch updates) from `init`.
ClusterModel lloyd_fit(const PixelDataset& data, const ClusterModel& init,
                       const LloydConfig& cfg);

/// Best of `restarts` runs of k-means++ followed by lloyd_fit. Run 0 uses
/// `seed`, run r > 0 uses derive_seed(seed, r) for both the init and
/// cfg.seed. The lowest final inertia wins, the earliest run on ties.
ClusterModel kmeans_fit(const PixelDataset& data, std::size_t k,
                        std::uint64_t seed, const LloydConfig& cfg,
                        std::size_t restarts = 1);

/// Objective J: sum of squared distances to the nearest centroid, in
/// double, reduced in chunk order.
double inertia(const ClusterModel& model, const PixelDataset& data,
               unsigned threads = 0);

/// Nearest centroid for every point (lowest index on ties), in double.
std::vector<std::uint32_t> assign_points(const ClusterModel& model,
                                         const PixelDataset& data,
                                         unsigned threads = 0);

/// H x W cluster ids for one feature map.
struct LabelGrid {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint32_t> labels;

  std::uint32_t at(std::uint32_t x, std::uint32_t y) const {
    return labels[std::size_t{y} * width + x];
  }

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

/// Labels each pixel of a C x H x W map with its nearest centroid,
/// computing distances in single precision. Ties go to the lowest index.
LabelGrid assign(const ClusterModel& model, const FeatureTensor& features);

/// Centroids as a K x D FT01 file plus JSON sidecar in directory `dir`.
void save_cluster_model(const ClusterModel& model,
                        const std::filesystem::path& dir);
ClusterModel load_cluster_model(const std::filesystem::path& dir);

}  // namespace featseg
