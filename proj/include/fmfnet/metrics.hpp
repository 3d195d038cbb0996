#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmfnet/decode.hpp"

namespace fmfnet {

/// Detections and ground truth of one frame.
struct EvalFrame {
  std::vector<Detection> detections;
  std::vector<Box3D> ground_truth;
};

/// One (detection, matched?) outcome, in the order matching processed them.
struct MatchRecord {
  std::size_t frame = 0;
  std::size_t detection = 0;
  double score = 0.0;
  bool true_positive = false;
};

struct ApResult {
  double ap = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_tp = 0;
  /// Means over matched pairs; 1.0 when there is no true positive.
  double ate = 1.0;
  double ase = 1.0;
  double aoe = 1.0;
  double ave = 1.0;
  std::vector<MatchRecord> matches;
};

/// Greedy center-distance matching for one class over all frames, then AP.
/// Detections are visited by descending score (ties: class, then center
/// x, y, z, then frame and index); each takes the nearest unmatched gt of
/// its frame closer than `threshold`.
ApResult match_and_ap(std::span<const EvalFrame> frames, int class_id, double threshold);

/// AP from a ranked TP/FP sequence: envelope precision on a 101-point recall
/// grid, bins above recall 0.1, minus 0.1 precision floor, rescaled by 1/0.9.
double average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt);

/// 1 - IoU of two boxes aligned at the same center and yaw (size only).
double scale_error(const Box3D& a, const Box3D& b);
/// Absolute yaw difference in [0, pi].
double yaw_error(double a, double b);

double nds(double map, double mate, double mase, double maoe, double mave, double maae);

struct ClassMetrics {
  std::string name;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  std::vector<double> ap;  // per distance threshold
  double mean_ap = 0.0;
  double ate = 1.0, ase = 1.0, aoe = 1.0, ave = 1.0, aae = 1.0;
};

struct EvalResult {
  double mAP = 0.0;
  double mATE = 1.0;
  double mASE = 1.0;
  double mAOE = 1.0;
  double mAVE = 1.0;
  /// No attribute labels exist: 0 for classes with a true positive, else 1.
  double mAAE = 1.0;
  double NDS = 0.0;
  std::vector<double> thresholds;
  /// Classes without ground truth are listed but excluded from the means.
  std::vector<ClassMetrics> per_class;
};

/// Class-averaged metrics. Detection or gt class ids outside `class_names`
/// raise UsageError.
EvalResult evaluate(std::span<const EvalFrame> frames, const std::vector<std::string>& class_names,
                    const MatchConfig& cfg = {});

nlohmann::json to_json(const EvalResult& r);
std::string format_table(const EvalResult& r);

// Detection files: one JSON record per line.

struct FrameDetection {
  std::size_t frame = 0;
  Detection det;
};

void write_detections(const std::string& path, const std::vector<FrameDetection>& dets,
                      const std::vector<std::string>& class_names);
std::vector<FrameDetection> read_detections(const std::string& path, const std::vector<std::string>& class_names);

}  // namespace fmfnet
