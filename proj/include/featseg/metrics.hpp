#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "featseg/image.hpp"
#include "featseg/maskgen.hpp"

namespace featseg {

/// counts[p][c]: pixels predicted as p whose ground truth is c. Ground
/// truth ignore pixels are never counted.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  ConfusionMatrix(std::size_t n_pred, std::size_t n_gt)
      : n_pred_(n_pred), n_gt_(n_gt), counts_(n_pred * n_gt, 0) {}

  std::size_t n_pred() const { return n_pred_; }
  std::size_t n_gt() const { return n_gt_; }

  std::uint64_t at(std::size_t p, std::size_t c) const {
    return counts_[p * n_gt_ + c];
  }
  std::uint64_t& at(std::size_t p, std::size_t c) {
    return counts_[p * n_gt_ + c];
  }
  std::uint64_t total() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_pred_ = 0;
  std::size_t n_gt_ = 0;
  std::vector<std::uint64_t> counts_;
};

/// Adds one (prediction, ground truth) pair. Throws ValidationError on a
/// size mismatch or an id outside the matrix.
void accumulate(ConfusionMatrix& cm, const MaskImage& pred, const MaskImage& gt);

struct IouResult {
  std::vector<std::optional<double>> per_class;  // nullopt: zero union
  double mean = 0.0;
  std::uint64_t n_pixels = 0;
};

/// IoU_c = TP / (TP + FP + FN) on a square matrix; classes whose union is
/// empty are excluded from the unweighted mean.
IouResult mean_iou(const ConfusionMatrix& cm);

enum class MatchMode { one_to_one, majority };

/// Cluster -> class map. one_to_one maximises total matched intersection
/// (Hungarian) and sends unmatched clusters to their majority class;
/// majority sends every cluster to its argmax class (lowest on ties).
ClassMap match_clusters(const ConfusionMatrix& cm, MatchMode mode);

/// Merges prediction rows through `map`, producing an n_classes x C matrix.
ConfusionMatrix remap_predictions(const ConfusionMatrix& cm, const ClassMap& map);

/// Maximum-weight assignment of each row to a distinct column
/// (rows <= cols). Returns the column of every row.
std::vector<std::size_t> max_weight_assignment(
    const std::vector<std::vector<std::int64_t>>& weights);

/// Sum of counts[map(p)... ] on the diagonal after remapping, i.e. the
/// pixels the mapping gets right.
std::uint64_t matched_intersection(const ConfusionMatrix& cm, const ClassMap& map);

std::string iou_report_json(const IouResult& r, const std::optional<ClassMap>& map);
std::string iou_report_table(const IouResult& r);

}  // namespace featseg
