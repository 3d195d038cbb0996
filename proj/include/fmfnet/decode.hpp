#pragma once

#include <vector>

#include "fmfnet/head.hpp"

namespace fmfnet {

struct MatchConfig {
  /// Center-distance thresholds (meters) averaged into mAP. Ascending.
  std::vector<double> distance_thresholds{0.5, 1.0, 2.0, 4.0};
  /// Threshold at which the true-positive errors are measured.
  double tp_threshold = 2.0;
  double score_threshold = 0.1;
  int top_k = 100;

  void validate() const;
};

struct Detection {
  Box3D box;
  double score = 0.0;
  int class_id = 0;

  bool operator==(const Detection&) const = default;
};

struct Peak {
  int class_id = 0;
  int row = 0;
  int col = 0;
  double score = 0.0;

  bool operator==(const Peak&) const = default;
};

/// Local maxima of a [K, h, w] heatmap: v equals its 3x3 neighbourhood max
/// and no equal neighbour precedes it in (row, col) order. Sorted by score
/// descending, then class, row, col.
std::vector<Peak> find_peaks(std::span<const double> heatmap, int num_classes, int height, int width);

/// Peaks of the head heatmap turned into boxes. Keeps the first `top_k`
/// peaks whose score is >= score_threshold.
std::vector<Detection> decode(const HeadOutput& head, const BevGeometry& geometry, const MatchConfig& cfg);

}  // namespace fmfnet
