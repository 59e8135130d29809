#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "featseg/manifest.hpp"

namespace featseg {

struct LatentPair {
  std::vector<double> w;  // latent code
  int b = 0;              // attribute present (1) or absent (0)
};

/// Unit direction in latent space; moving along it raises the odds of the
/// attribute. The decision rule is sign(w . g + bias).
struct LatentDirection {
  std::vector<double> g;
  double bias = 0.0;
  double train_accuracy = 0.0;
  std::size_t n_pairs = 0;

  // Fit diagnostics, not persisted.
  std::vector<double> loss_history;
  double final_grad_norm = 0.0;
};

struct DirectionConfig {
  double l2_penalty = 1e-3;
  std::size_t max_iters = 10000;
  double tol = 1e-6;
  std::uint64_t seed = 0;  // recorded only; the convex fit starts at zero
};

/// L2-regularized logistic regression fitted by full-batch gradient
/// descent with Armijo backtracking; the weight vector is rescaled to
/// unit length (bias rescaled with it) so alpha keeps the same meaning
/// across fits.
LatentDirection fit_direction(std::span<const LatentPair> pairs,
                              const DirectionConfig& cfg = {});

/// w + alpha * g.
std::vector<double> manipulate(std::span<const double> w,
                               const LatentDirection& dir, double alpha);

/// Pairs from a manifest with latent_path and attr_label on every sample.
std::vector<LatentPair> load_latent_pairs(const DatasetManifest& manifest);

/// direction.ft (L-vector, f32) plus direction.json in `dir`.
void save_direction(const LatentDirection& d, const std::filesystem::path& dir);
LatentDirection load_direction(const std::filesystem::path& dir);

}  // namespace featseg
