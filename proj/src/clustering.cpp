#include "featseg/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <json.hpp>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/parallel.hpp"
#include "featseg/rng.hpp"

namespace featseg {

namespace fs = std::filesystem;

void l2_normalize_in_place(std::span<float> v) {
  double norm2 = 0.0;
  for (const float x : v) norm2 += double{x} * x;
  if (norm2 <= 0.0) return;
  const double inv = 1.0 / std::sqrt(norm2);
  for (float& x : v) x = static_cast<float>(x * inv);
}

std::vector<float> feature_map_points(const FeatureTensor& features,
                                      bool l2_normalize) {
  if (features.ndim() != 3) {
    throw ValidationError("feature map must be C x H x W, got " +
                          std::to_string(features.ndim()) + " dims");
  }
  const auto data = features.f32();
  const std::size_t c = features.dims()[0];
  const std::size_t hw = features.dims()[1] * features.dims()[2];
  std::vector<float> points(hw * c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* plane = data.data() + ch * hw;
    for (std::size_t p = 0; p < hw; ++p) points[p * c + ch] = plane[p];
  }
  if (l2_normalize) {
    for (std::size_t p = 0; p < hw; ++p) {
      l2_normalize_in_place(std::span(points).subspan(p * c, c));
    }
  }
  return points;
}

// ---------------------------------------------------------------------------
// Datasets

InMemoryPixels::InMemoryPixels(std::vector<float> points, std::size_t dim,
                               bool l2_normalize, std::size_t chunk_points)
    : points_(std::move(points)), dim_(dim), chunk_(chunk_points) {
  if (dim_ == 0) throw ValidationError("point dimension must be > 0");
  if (chunk_ == 0) throw ValidationError("chunk size must be > 0");
  if (points_.size() % dim_ != 0) {
    throw ValidationError("point buffer is not a multiple of the dimension");
  }
  n_ = points_.size() / dim_;
  if (l2_normalize) {
    for (std::size_t i = 0; i < n_; ++i) {
      l2_normalize_in_place(std::span(points_).subspan(i * dim_, dim_));
    }
  }
}

std::size_t InMemoryPixels::n_chunks() const {
  return (n_ + chunk_ - 1) / chunk_;
}

std::size_t InMemoryPixels::chunk_offset(std::size_t c) const {
  return std::min(c * chunk_, n_);
}

PointChunk InMemoryPixels::load_chunk(std::size_t c) const {
  const std::size_t begin = chunk_offset(c);
  const std::size_t end = chunk_offset(c + 1);
  PointChunk chunk;
  chunk.points = std::span(points_).subspan(begin * dim_, (end - begin) * dim_);
  return chunk;
}

FeatureMapPixels::FeatureMapPixels(std::vector<fs::path> files,
                                   bool l2_normalize,
                                   std::size_t preload_budget_bytes)
    : files_(std::move(files)), l2_normalize_(l2_normalize) {
  if (files_.empty()) throw ValidationError("no feature files given");
  offsets_.push_back(0);
  std::size_t bytes = 0;
  bool preload = true;
  for (std::size_t i = 0; i < files_.size(); ++i) {
    const FeatureTensor t = read_tensor(files_[i]);
    if (t.ndim() != 3 || t.dtype() != DType::f32) {
      throw ValidationError(files_[i].string() +
                            ": feature map must be a 3-d f32 tensor");
    }
    const auto& d = t.dims();
    if (i == 0) {
      dim_ = d[0];
      height_ = d[1];
      width_ = d[2];
      if (dim_ == 0 || height_ == 0 || width_ == 0) {
        throw ValidationError(files_[i].string() + ": empty feature map");
      }
    } else if (d[0] != dim_ || d[1] != height_ || d[2] != width_) {
      throw ValidationError(files_[i].string() +
                            ": feature dims differ from the first sample");
    }
    offsets_.push_back(offsets_.back() + height_ * width_);
    bytes += t.size() * sizeof(float);
    if (preload && bytes <= preload_budget_bytes) {
      cache_.push_back(feature_map_points(t, l2_normalize_));
    } else {
      preload = false;
      cache_.clear();
    }
  }
}

std::vector<float> FeatureMapPixels::load_points(std::size_t c) const {
  const FeatureTensor t = read_tensor(files_[c]);
  const auto& d = t.dims();
  if (t.ndim() != 3 || d[0] != dim_ || d[1] != height_ || d[2] != width_) {
    throw ValidationError(files_[c].string() + ": feature dims changed on disk");
  }
  return feature_map_points(t, l2_normalize_);
}

PointChunk FeatureMapPixels::load_chunk(std::size_t c) const {
  PointChunk chunk;
  if (!cache_.empty()) {
    chunk.points = cache_[c];
  } else {
    chunk.owned = load_points(c);
    chunk.points = chunk.owned;
  }
  return chunk;
}

// ---------------------------------------------------------------------------
// Distance kernels

namespace {

template <typename T>
struct Nearest {
  std::uint32_t label;
  T dist;
};

// Squared Euclidean distance accumulated in T; ties keep the lower index.
template <typename T>
Nearest<T> nearest(const float* x, const T* centroids, std::size_t k,
                   std::size_t dim) {
  Nearest<T> best{0, std::numeric_limits<T>::infinity()};
  for (std::size_t c = 0; c < k; ++c) {
    const T* mu = centroids + c * dim;
    T d2 = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      const T diff = static_cast<T>(x[j]) - mu[j];
      d2 += diff * diff;
    }
    if (d2 < best.dist) best = {static_cast<std::uint32_t>(c), d2};
  }
  return best;
}

double squared_distance(const float* x, std::span<const double> mu) {
  double d2 = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    const double diff = double{x[j]} - mu[j];
    d2 += diff * diff;
  }
  return d2;
}

void check_dims(const ClusterModel& model, const PixelDataset& data) {
  if (model.dim != data.dim()) {
    throw ValidationError("dimension mismatch: model has " +
                          std::to_string(model.dim) + ", data has " +
                          std::to_string(data.dim()));
  }
  if (model.k == 0 || model.centroids.size() != model.k * model.dim) {
    throw ValidationError("cluster model has no centroids");
  }
}

std::vector<float> point_copy(const PixelDataset& data, std::size_t index) {
  const auto& offsets = data;
  std::size_t lo = 0, hi = offsets.n_chunks();
  while (hi - lo > 1) {
    const std::size_t mid = (lo + hi) / 2;
    if (offsets.chunk_offset(mid) <= index) lo = mid; else hi = mid;
  }
  const PointChunk chunk = data.load_chunk(lo);
  const std::size_t local = index - data.chunk_offset(lo);
  const auto row = chunk.points.subspan(local * data.dim(), data.dim());
  return {row.begin(), row.end()};
}

struct ChunkStats {
  std::vector<double> sums;
  std::vector<std::uint64_t> counts;
  double inertia = 0.0;
  std::size_t changed = 0;
};

template <typename T>
void assign_chunk(const PixelDataset& data, std::size_t c,
                  const std::vector<T>& centroids, std::size_t k,
                  bool first_pass, std::vector<std::uint32_t>& labels,
                  std::vector<double>& dists, ChunkStats& stats) {
  const std::size_t dim = data.dim();
  const PointChunk chunk = data.load_chunk(c);
  const std::size_t offset = data.chunk_offset(c);
  const std::size_t n = data.chunk_size(c);
  stats.sums.assign(k * dim, 0.0);
  stats.counts.assign(k, 0);
  stats.inertia = 0.0;
  stats.changed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* x = chunk.points.data() + i * dim;
    const auto best = nearest<T>(x, centroids.data(), k, dim);
    if (first_pass || labels[offset + i] != best.label) ++stats.changed;
    labels[offset + i] = best.label;
    dists[offset + i] = static_cast<double>(best.dist);
    double* sum = stats.sums.data() + best.label * dim;
    for (std::size_t j = 0; j < dim; ++j) sum[j] += x[j];
    ++stats.counts[best.label];
    stats.inertia += static_cast<double>(best.dist);
  }
}

// Moves the farthest points into empty clusters, one per empty cluster in
// index order. Candidates must come from clusters with more than one
// member so the repair never empties another cluster.
void repair_empty_clusters(const PixelDataset& data,
                           std::vector<std::uint32_t>& labels,
                           std::vector<double>& dists,
                           std::vector<double>& sums,
                           std::vector<std::uint64_t>& counts) {
  const std::size_t dim = data.dim();
  for (std::size_t e = 0; e < counts.size(); ++e) {
    if (counts[e] != 0) continue;
    std::size_t pick = labels.size();
    double best = -1.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (counts[labels[i]] > 1 && dists[i] > best) {
        best = dists[i];
        pick = i;
      }
    }
    if (pick == labels.size()) {
      throw ValidationError("cannot repair empty cluster " + std::to_string(e) +
                            ": not enough points");
    }
    const std::vector<float> x = point_copy(data, pick);
    const std::uint32_t old = labels[pick];
    for (std::size_t j = 0; j < dim; ++j) {
      sums[old * dim + j] -= x[j];
      sums[e * dim + j] = x[j];
    }
    --counts[old];
    counts[e] = 1;
    labels[pick] = static_cast<std::uint32_t>(e);
    dists[pick] = 0.0;
  }
}

template <typename T>
std::vector<T> centroid_copy(const ClusterModel& model) {
  return std::vector<T>(model.centroids.begin(), model.centroids.end());
}

bool converged(const std::vector<double>& history, double rel_tol) {
  const double j = history.back();
  if (j == 0.0) return true;
  if (history.size() < 2) return false;
  const double prev = history[history.size() - 2];
  return prev > 0.0 && (prev - j) / prev < rel_tol;
}

template <typename T>
ClusterModel lloyd_full(const PixelDataset& data, ClusterModel model,
                        const LloydConfig& cfg) {
  const std::size_t n = data.n_points();
  const std::size_t dim = data.dim();
  const std::size_t k = model.k;
  std::vector<std::uint32_t> labels(n, 0);
  std::vector<double> dists(n, 0.0);
  std::vector<ChunkStats> stats(data.n_chunks());

  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const std::vector<T> centroids = centroid_copy<T>(model);
    parallel_for(data.n_chunks(), cfg.threads, [&](std::size_t c) {
      assign_chunk<T>(data, c, centroids, k, it == 0, labels, dists, stats[c]);
    });

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::uint64_t> counts(k, 0);
    double j = 0.0;
    std::size_t changed = 0;
    for (const auto& s : stats) {
      for (std::size_t i = 0; i < sums.size(); ++i) sums[i] += s.sums[i];
      for (std::size_t i = 0; i < k; ++i) counts[i] += s.counts[i];
      j += s.inertia;
      changed += s.changed;
    }
    model.inertia_history.push_back(j);
    if ((it > 0 && changed == 0) || converged(model.inertia_history, cfg.rel_tol)) {
      break;
    }

    repair_empty_clusters(data, labels, dists, sums, counts);
    for (std::size_t c = 0; c < k; ++c) {
      const double inv = 1.0 / static_cast<double>(counts[c]);
      for (std::size_t d = 0; d < dim; ++d) {
        model.centroids[c * dim + d] = sums[c * dim + d] * inv;
      }
    }
  }
  return model;
}

// Standard minibatch k-means: per-centroid counts drive a running-mean
// step of 1/count. One iteration is a pass over all chunks in an order
// shuffled by the reference RNG; points are batched in that order.
template <typename T>
ClusterModel lloyd_minibatch(const PixelDataset& data, ClusterModel model,
                             const LloydConfig& cfg) {
  const std::size_t dim = data.dim();
  const std::size_t k = model.k;
  const std::size_t batch = *cfg.minibatch_size;
  SplitMix64 rng(cfg.seed);
  std::vector<std::uint64_t> seen(k, 0);
  std::vector<float> buffer;
  buffer.reserve(batch * dim);
  std::vector<std::uint32_t> batch_labels;

  auto flush = [&] {
    const std::size_t m = buffer.size() / dim;
    if (m == 0) return;
    const std::vector<T> centroids = centroid_copy<T>(model);
    batch_labels.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      batch_labels[i] =
          nearest<T>(buffer.data() + i * dim, centroids.data(), k, dim).label;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const std::uint32_t c = batch_labels[i];
      const double eta = 1.0 / static_cast<double>(++seen[c]);
      double* mu = model.centroids.data() + c * dim;
      const float* x = buffer.data() + i * dim;
      for (std::size_t d = 0; d < dim; ++d) mu[d] += eta * (x[d] - mu[d]);
    }
    buffer.clear();
  };

  std::vector<std::size_t> order(data.n_chunks());
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    for (const std::size_t c : order) {
      const PointChunk chunk = data.load_chunk(c);
      const std::size_t n = data.chunk_size(c);
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = chunk.points.subspan(i * dim, dim);
        buffer.insert(buffer.end(), row.begin(), row.end());
        if (buffer.size() == batch * dim) flush();
      }
    }
    flush();
    model.inertia_history.push_back(inertia(model, data, cfg.threads));
    if (converged(model.inertia_history, cfg.rel_tol)) break;
  }
  return model;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public operations

ClusterModel kmeanspp_init(const PixelDataset& data, std::size_t k,
                           std::uint64_t seed, unsigned threads) {
  const std::size_t n = data.n_points();
  const std::size_t dim = data.dim();
  if (n == 0) throw ValidationError("kmeans++: empty dataset");
  if (k == 0) throw ValidationError("kmeans++: k must be >= 1");
  if (k > n) {
    throw ValidationError("kmeans++: k = " + std::to_string(k) +
                          " exceeds the number of points " + std::to_string(n));
  }
  if (dim == 0) throw ValidationError("kmeans++: dimension must be > 0");

  ClusterModel model;
  model.k = k;
  model.dim = dim;
  model.centroids.reserve(k * dim);

  SplitMix64 rng(seed);
  std::vector<double> min_d2(n, 0.0);
  std::vector<double> chunk_sums(data.n_chunks(), 0.0);

  auto add_centroid = [&](std::size_t index, bool first) {
    const std::vector<float> x = point_copy(data, index);
    model.centroids.insert(model.centroids.end(), x.begin(), x.end());
    const std::span<const double> mu =
        std::span(model.centroids).subspan(model.centroids.size() - dim, dim);
    parallel_for(data.n_chunks(), threads, [&](std::size_t c) {
      const PointChunk chunk = data.load_chunk(c);
      const std::size_t offset = data.chunk_offset(c);
      double sum = 0.0;
      for (std::size_t i = 0; i < data.chunk_size(c); ++i) {
        const double d2 = squared_distance(chunk.points.data() + i * dim, mu);
        double& slot = min_d2[offset + i];
        slot = first ? d2 : std::min(slot, d2);
        sum += slot;
      }
      chunk_sums[c] = sum;
    });
  };

  add_centroid(rng.below(n), true);
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (const double s : chunk_sums) total += s;
    if (!(total > 0.0)) {
      throw ValidationError("kmeans++: fewer than k = " + std::to_string(k) +
                            " distinct points");
    }
    const double target = rng.uniform() * total;
    std::size_t c = 0;
    double acc = 0.0;
    while (c + 1 < chunk_sums.size() && acc + chunk_sums[c] <= target) {
      acc += chunk_sums[c];
      ++c;
    }
    // Walk the chosen chunk with the same summation order used above.
    const std::size_t begin = data.chunk_offset(c);
    const std::size_t end = data.chunk_offset(c + 1);
    std::size_t pick = end;
    std::size_t last_positive = end;
    double local = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      if (min_d2[i] > 0.0) last_positive = i;
      local += min_d2[i];
      if (acc + local > target && min_d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    if (pick == end) pick = last_positive;
    if (pick == end) {
      throw ValidationError("kmeans++: sampling fell into a zero-weight chunk");
    }
    add_centroid(pick, false);
  }
  return model;
}

ClusterModel lloyd_fit(const PixelDataset& data, const ClusterModel& init,
                       const LloydConfig& cfg) {
  check_dims(init, data);
  if (cfg.max_iters == 0) throw ValidationError("lloyd: max_iters must be >= 1");
  if (!(cfg.rel_tol >= 0.0)) throw ValidationError("lloyd: rel_tol must be >= 0");
  if (cfg.minibatch_size && *cfg.minibatch_size == 0) {
    throw ValidationError("lloyd: minibatch size must be >= 1");
  }
  if (data.n_points() < init.k) {
    throw ValidationError("lloyd: fewer points than clusters");
  }
  ClusterModel model = init;
  model.inertia_history.clear();
  if (cfg.minibatch_size) {
    return cfg.precision == Precision::f64
               ? lloyd_minibatch<double>(data, std::move(model), cfg)
               : lloyd_minibatch<float>(data, std::move(model), cfg);
  }
  return cfg.precision == Precision::f64
             ? lloyd_full<double>(data, std::move(model), cfg)
             : lloyd_full<float>(data, std::move(model), cfg);
}

double inertia(const ClusterModel& model, const PixelDataset& data,
               unsigned threads) {
  check_dims(model, data);
  std::vector<double> partial(data.n_chunks(), 0.0);
  parallel_for(data.n_chunks(), threads, [&](std::size_t c) {
    const PointChunk chunk = data.load_chunk(c);
    double sum = 0.0;
    for (std::size_t i = 0; i < data.chunk_size(c); ++i) {
      sum += nearest<double>(chunk.points.data() + i * model.dim,
                             model.centroids.data(), model.k, model.dim)
                 .dist;
    }
    partial[c] = sum;
  });
  double total = 0.0;
  for (const double p : partial) total += p;
  return total;
}

ClusterModel kmeans_fit(const PixelDataset& data, std::size_t k,
                        std::uint64_t seed, const LloydConfig& cfg,
                        std::size_t restarts) {
  if (restarts == 0) throw ValidationError("kmeans: restarts must be >= 1");
  ClusterModel best;
  double best_j = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    const std::uint64_t run_seed = r == 0 ? seed : derive_seed(seed, r);
    LloydConfig run_cfg = cfg;
    run_cfg.seed = run_seed;
    ClusterModel m = lloyd_fit(data, kmeanspp_init(data, k, run_seed, cfg.threads), run_cfg);
    const double j = inertia(m, data, cfg.threads);
    if (j < best_j) {
      best_j = j;
      best = std::move(m);
    }
  }
  return best;
}

std::vector<std::uint32_t> assign_points(const ClusterModel& model,
                                         const PixelDataset& data,
                                         unsigned threads) {
  check_dims(model, data);
  std::vector<std::uint32_t> labels(data.n_points());
  parallel_for(data.n_chunks(), threads, [&](std::size_t c) {
    const PointChunk chunk = data.load_chunk(c);
    const std::size_t offset = data.chunk_offset(c);
    for (std::size_t i = 0; i < data.chunk_size(c); ++i) {
      labels[offset + i] =
          nearest<double>(chunk.points.data() + i * model.dim,
                          model.centroids.data(), model.k, model.dim)
              .label;
    }
  });
  return labels;
}

LabelGrid assign(const ClusterModel& model, const FeatureTensor& features) {
  if (features.ndim() != 3) {
    throw ValidationError("assign: feature map must be C x H x W");
  }
  if (features.dims()[0] != model.dim) {
    throw ValidationError("assign: channel mismatch, features have " +
                          std::to_string(features.dims()[0]) +
                          " channels, model expects " +
                          std::to_string(model.dim));
  }
  if (model.k == 0 || model.centroids.size() != model.k * model.dim) {
    throw ValidationError("assign: cluster model has no centroids");
  }
  const std::vector<float> points =
      feature_map_points(features, model.l2_normalized);
  const std::vector<float> centroids = centroid_copy<float>(model);
  LabelGrid grid;
  grid.height = static_cast<std::uint32_t>(features.dims()[1]);
  grid.width = static_cast<std::uint32_t>(features.dims()[2]);
  grid.labels.resize(std::size_t{grid.height} * grid.width);
  for (std::size_t p = 0; p < grid.labels.size(); ++p) {
    grid.labels[p] = nearest<float>(points.data() + p * model.dim,
                                    centroids.data(), model.k, model.dim)
                         .label;
  }
  return grid;
}

void save_cluster_model(const ClusterModel& model, const fs::path& dir) {
  std::vector<float> values(model.centroids.begin(), model.centroids.end());
  write_tensor(FeatureTensor::from_f32({model.k, model.dim}, std::move(values)),
               dir / "centroids.ft");
  const nlohmann::json doc = {{"k", model.k},
                              {"dim", model.dim},
                              {"feature_layer", model.feature_layer},
                              {"l2_normalized", model.l2_normalized},
                              {"inertia_history", model.inertia_history}};
  write_text_atomic(dir / "model.json", doc.dump(2) + "\n");
}

ClusterModel load_cluster_model(const fs::path& dir) {
  const auto doc = nlohmann::json::parse(read_file_text(dir / "model.json"),
                                         nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw FormatError(FormatFault::bad_json, (dir / "model.json").string());
  }
  ClusterModel model;
  try {
    model.k = doc.at("k").get<std::size_t>();
    model.dim = doc.at("dim").get<std::size_t>();
    model.feature_layer = doc.at("feature_layer").get<int>();
    model.l2_normalized = doc.at("l2_normalized").get<bool>();
    model.inertia_history =
        doc.at("inertia_history").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatFault::bad_field,
                      (dir / "model.json").string() + ": " + e.what());
  }
  const FeatureTensor t = read_tensor(dir / "centroids.ft");
  if (t.dtype() != DType::f32 || t.ndim() != 2 || t.dims()[0] != model.k ||
      t.dims()[1] != model.dim) {
    throw FormatError(FormatFault::bad_field,
                      "centroids.ft does not match k x dim in model.json");
  }
  const auto values = t.f32();
  model.centroids.assign(values.begin(), values.end());
  return model;
}

}  // namespace featseg
