#include "featseg/metrics.hpp"

#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "featseg/error.hpp"

namespace featseg {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t sum = 0;
  for (const auto v : counts_) sum += v;
  return sum;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_pred_ != n_pred_ || other.n_gt_ != n_gt_) {
    throw ValidationError("confusion matrices have different shapes");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

void accumulate(ConfusionMatrix& cm, const MaskImage& pred, const MaskImage& gt) {
  if (pred.width != gt.width || pred.height != gt.height ||
      pred.labels.size() != gt.labels.size()) {
    throw ValidationError("accumulate: prediction is " + std::to_string(pred.width) +
                          "x" + std::to_string(pred.height) + ", ground truth is " +
                          std::to_string(gt.width) + "x" + std::to_string(gt.height));
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::uint8_t c = gt.labels[i];
    if (c == MaskImage::kIgnore) continue;
    const std::uint8_t p = pred.labels[i];
    if (p >= cm.n_pred()) {
      throw ValidationError("accumulate: predicted id " + std::to_string(p) +
                            " >= " + std::to_string(cm.n_pred()));
    }
    if (c >= cm.n_gt()) {
      throw ValidationError("accumulate: ground-truth id " + std::to_string(c) +
                            " >= " + std::to_string(cm.n_gt()));
    }
    ++cm.at(p, c);
  }
}

IouResult mean_iou(const ConfusionMatrix& cm) {
  if (cm.n_pred() != cm.n_gt()) {
    throw ValidationError("mean_iou: confusion matrix must be square; match clusters first");
  }
  const std::size_t n = cm.n_gt();
  IouResult r;
  r.per_class.resize(n);
  r.n_pixels = cm.total();
  double sum = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t pred_c = 0, gt_c = 0;
    for (std::size_t o = 0; o < n; ++o) {
      pred_c += cm.at(c, o);
      gt_c += cm.at(o, c);
    }
    const std::uint64_t uni = pred_c + gt_c - tp;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += *r.per_class[c];
    ++included;
  }
  if (included == 0) throw ValidationError("mean_iou: every class is empty");
  r.mean = sum / static_cast<double>(included);
  return r;
}

std::vector<std::size_t> max_weight_assignment(
    const std::vector<std::vector<std::int64_t>>& weights) {
  const std::size_t n = weights.size();
  if (n == 0) return {};
  const std::size_t m = weights.front().size();
  if (m < n) throw ValidationError("assignment: more rows than columns");
  for (const auto& row : weights) {
    if (row.size() != m) throw ValidationError("assignment: ragged weight matrix");
  }
  // Shortest augmenting path with potentials on cost = -weight; 1-based.
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(n + 1, 0), v(m + 1, 0), minv(m + 1);
  std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      std::int64_t delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const std::int64_t cur = -weights[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= m; ++j) {
    if (match[j] != 0) row_to_col[match[j] - 1] = j - 1;
  }
  return row_to_col;
}

namespace {

std::uint32_t majority_class(const ConfusionMatrix& cm, std::size_t p) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < cm.n_gt(); ++c) {
    if (cm.at(p, c) > cm.at(p, best)) best = c;
  }
  return static_cast<std::uint32_t>(best);
}

}  // namespace

ClassMap match_clusters(const ConfusionMatrix& cm, MatchMode mode) {
  if (cm.n_pred() == 0 || cm.n_gt() == 0) {
    throw ValidationError("match_clusters: empty confusion matrix");
  }
  if (cm.n_gt() > MaskImage::kIgnore) {
    throw ValidationError("match_clusters: too many classes");
  }
  ClassMap map;
  map.n_classes = static_cast<std::uint32_t>(cm.n_gt());
  map.cluster_to_class.resize(cm.n_pred());
  if (mode == MatchMode::majority) {
    for (std::size_t p = 0; p < cm.n_pred(); ++p) {
      map.cluster_to_class[p] = majority_class(cm, p);
    }
    return map;
  }
  if (cm.n_pred() < cm.n_gt()) {
    throw ValidationError("match_clusters: one_to_one needs at least as many "
                          "clusters as classes");
  }
  std::vector<std::vector<std::int64_t>> weights(
      cm.n_gt(), std::vector<std::int64_t>(cm.n_pred()));
  for (std::size_t c = 0; c < cm.n_gt(); ++c) {
    for (std::size_t p = 0; p < cm.n_pred(); ++p) {
      weights[c][p] = static_cast<std::int64_t>(cm.at(p, c));
    }
  }
  const auto class_to_cluster = max_weight_assignment(weights);
  std::vector<char> matched(cm.n_pred(), 0);
  for (std::size_t c = 0; c < class_to_cluster.size(); ++c) {
    map.cluster_to_class[class_to_cluster[c]] = static_cast<std::uint32_t>(c);
    matched[class_to_cluster[c]] = 1;
  }
  for (std::size_t p = 0; p < cm.n_pred(); ++p) {
    if (!matched[p]) map.cluster_to_class[p] = majority_class(cm, p);
  }
  return map;
}

ConfusionMatrix remap_predictions(const ConfusionMatrix& cm, const ClassMap& map) {
  if (map.cluster_to_class.size() != cm.n_pred()) {
    throw ValidationError("remap: class map does not cover every predicted id");
  }
  ConfusionMatrix out(map.n_classes, cm.n_gt());
  for (std::size_t p = 0; p < cm.n_pred(); ++p) {
    const std::size_t to = map.cluster_to_class[p];
    if (to >= map.n_classes) throw ValidationError("remap: class id out of range");
    for (std::size_t c = 0; c < cm.n_gt(); ++c) out.at(to, c) += cm.at(p, c);
  }
  return out;
}

std::uint64_t matched_intersection(const ConfusionMatrix& cm, const ClassMap& map) {
  std::uint64_t sum = 0;
  for (std::size_t p = 0; p < cm.n_pred(); ++p) {
    const std::size_t c = map.cluster_to_class.at(p);
    if (c < cm.n_gt()) sum += cm.at(p, c);
  }
  return sum;
}

std::string iou_report_json(const IouResult& r, const std::optional<ClassMap>& map) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : r.per_class) {
    per_class.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  }
  nlohmann::json doc = {{"per_class", per_class},
                        {"mean", r.mean},
                        {"n_pixels", r.n_pixels}};
  doc["mapping"] = map ? nlohmann::json(map->cluster_to_class) : nlohmann::json(nullptr);
  return doc.dump(2) + "\n";
}

std::string iou_report_table(const IouResult& r) {
  std::ostringstream out;
  out << "class  IoU\n";
  char line[64];
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    if (r.per_class[c]) {
      std::snprintf(line, sizeof(line), "%5zu  %.4f\n", c, *r.per_class[c]);
    } else {
      std::snprintf(line, sizeof(line), "%5zu  -\n", c);
    }
    out << line;
  }
  std::snprintf(line, sizeof(line), " mean  %.4f  (%llu px)\n", r.mean,
                static_cast<unsigned long long>(r.n_pixels));
  out << line;
  return out.str();
}

}  // namespace featseg
