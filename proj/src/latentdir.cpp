#include "featseg/latentdir.hpp"

#include <cmath>
#include <string>

#include <json.hpp>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/tensor.hpp"

namespace featseg {

namespace fs = std::filesystem;

namespace {

double softplus(double s) {
  return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
}

double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

struct Problem {
  std::span<const LatentPair> pairs;
  std::size_t dim;
  double l2;

  // Parameters are [weights..., bias].
  double loss(const std::vector<double>& theta) const {
    double total = 0.0;
    for (const auto& p : pairs) {
      const double s = margin(theta, p.w);
      total += softplus(s) - p.b * s;
    }
    double reg = 0.0;
    for (std::size_t j = 0; j < dim; ++j) reg += theta[j] * theta[j];
    return total / static_cast<double>(pairs.size()) + 0.5 * l2 * reg;
  }

  std::vector<double> gradient(const std::vector<double>& theta) const {
    std::vector<double> g(dim + 1, 0.0);
    for (const auto& p : pairs) {
      const double r = sigmoid(margin(theta, p.w)) - p.b;
      for (std::size_t j = 0; j < dim; ++j) g[j] += r * p.w[j];
      g[dim] += r;
    }
    const double inv_n = 1.0 / static_cast<double>(pairs.size());
    for (std::size_t j = 0; j < dim; ++j) g[j] = g[j] * inv_n + l2 * theta[j];
    g[dim] *= inv_n;
    return g;
  }

  double margin(const std::vector<double>& theta,
                const std::vector<double>& w) const {
    double s = theta[dim];
    for (std::size_t j = 0; j < dim; ++j) s += theta[j] * w[j];
    return s;
  }
};

double norm(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

LatentDirection fit_direction(std::span<const LatentPair> pairs,
                              const DirectionConfig& cfg) {
  if (pairs.size() < 2) {
    throw ValidationError("fit_direction: need at least 2 pairs");
  }
  const std::size_t dim = pairs.front().w.size();
  if (dim == 0) throw ValidationError("fit_direction: empty latent vectors");
  bool has0 = false, has1 = false;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].w.size() != dim) {
      throw ValidationError("fit_direction: pair " + std::to_string(i) +
                            " has dimension " +
                            std::to_string(pairs[i].w.size()) + ", expected " +
                            std::to_string(dim));
    }
    if (pairs[i].b == 0) has0 = true;
    else if (pairs[i].b == 1) has1 = true;
    else throw ValidationError("fit_direction: labels must be 0 or 1");
  }
  if (!has0 || !has1) {
    throw ValidationError("fit_direction: single-class input, both labels required");
  }
  if (!(cfg.l2_penalty >= 0.0) || !(cfg.tol > 0.0)) {
    throw ValidationError("fit_direction: l2_penalty must be >= 0, tol > 0");
  }

  const Problem problem{pairs, dim, cfg.l2_penalty};
  std::vector<double> theta(dim + 1, 0.0);
  double f = problem.loss(theta);
  LatentDirection out;
  out.loss_history.push_back(f);

  constexpr double kArmijo = 1e-4;
  double step = 1.0;
  std::vector<double> trial(dim + 1);
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const std::vector<double> g = problem.gradient(theta);
    const double gnorm = norm(g);
    out.final_grad_norm = gnorm;
    if (gnorm < cfg.tol) break;
    const double g2 = gnorm * gnorm;
    step = std::min(step * 2.0, 1e6);
    double f_trial = 0.0;
    for (;;) {
      for (std::size_t j = 0; j <= dim; ++j) trial[j] = theta[j] - step * g[j];
      f_trial = problem.loss(trial);
      if (f_trial <= f - kArmijo * step * g2) break;
      step *= 0.5;
      if (step < 1e-20) break;
    }
    if (!(f_trial <= f)) break;  // no descent possible at machine precision
    theta.swap(trial);
    f = f_trial;
    out.loss_history.push_back(f);
  }

  const double wnorm = norm(std::span(theta).first(dim));
  if (!(wnorm > 0.0)) {
    throw ValidationError("fit_direction: degenerate fit, zero weight vector");
  }
  out.g.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) out.g[j] = theta[j] / wnorm;
  out.bias = theta[dim] / wnorm;
  out.n_pairs = pairs.size();

  std::size_t correct = 0;
  for (const auto& p : pairs) {
    double s = out.bias;
    for (std::size_t j = 0; j < dim; ++j) s += out.g[j] * p.w[j];
    if ((s > 0.0 ? 1 : 0) == p.b) ++correct;
  }
  out.train_accuracy =
      static_cast<double>(correct) / static_cast<double>(pairs.size());
  return out;
}

std::vector<double> manipulate(std::span<const double> w,
                               const LatentDirection& dir, double alpha) {
  if (w.size() != dir.g.size()) {
    throw ValidationError("manipulate: latent has dimension " +
                          std::to_string(w.size()) + ", direction has " +
                          std::to_string(dir.g.size()));
  }
  std::vector<double> out(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) out[j] = w[j] + alpha * dir.g[j];
  return out;
}

std::vector<LatentPair> load_latent_pairs(const DatasetManifest& manifest) {
  std::vector<LatentPair> pairs;
  pairs.reserve(manifest.samples.size());
  for (const auto& s : manifest.samples) {
    if (!s.latent_path || !s.attr_label) {
      throw ValidationError("sample " + s.id +
                            ": latent_path and attr_label are required");
    }
    const FeatureTensor t = read_tensor(manifest.resolve(*s.latent_path));
    if (t.dtype() != DType::f32 || t.ndim() != 1) {
      throw ValidationError("sample " + s.id + ": latent must be a 1-d f32 tensor");
    }
    const auto v = t.f32();
    pairs.push_back({std::vector<double>(v.begin(), v.end()), *s.attr_label});
  }
  return pairs;
}

void save_direction(const LatentDirection& d, const fs::path& dir) {
  std::vector<float> g(d.g.begin(), d.g.end());
  const std::uint64_t n = g.size();
  write_tensor(FeatureTensor::from_f32({n}, std::move(g)),
               dir / "direction.ft");
  const nlohmann::json doc = {{"bias", d.bias},
                              {"train_accuracy", d.train_accuracy},
                              {"n_pairs", d.n_pairs}};
  write_text_atomic(dir / "direction.json", doc.dump(2) + "\n");
}

LatentDirection load_direction(const fs::path& dir) {
  const auto doc =
      nlohmann::json::parse(read_file_text(dir / "direction.json"), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw FormatError(FormatFault::bad_json, (dir / "direction.json").string());
  }
  LatentDirection d;
  try {
    d.bias = doc.at("bias").get<double>();
    d.train_accuracy = doc.at("train_accuracy").get<double>();
    d.n_pairs = doc.at("n_pairs").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatFault::bad_field,
                      (dir / "direction.json").string() + ": " + e.what());
  }
  const FeatureTensor t = read_tensor(dir / "direction.ft");
  if (t.dtype() != DType::f32 || t.ndim() != 1) {
    throw FormatError(FormatFault::bad_field, "direction.ft must be a 1-d f32 vector");
  }
  const auto v = t.f32();
  d.g.assign(v.begin(), v.end());
  return d;
}

}  // namespace featseg
