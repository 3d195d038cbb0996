#pragma once

#include <array>
#include <vector>

#include "fmfnet/data_model.hpp"
#include "fmfnet/geometry.hpp"
#include "fmfnet/layers.hpp"

namespace fmfnet {

struct HeadConfig {
  int head_channels = 32;
  /// Initial heatmap probability; sets the final heatmap bias to -log((1-p)/p).
  double heatmap_prior = 0.1;

  void validate() const;
};

/// conv3x3 -> ReLU -> conv1x1.
struct HeadBranch {
  Conv2d hidden;
  Conv2d out;

  Tensor forward(const Tensor& x) const { return out.forward(relu(hidden.forward(x))); }
};

struct CenterHead {
  HeadBranch heatmap, offset, height, size, rotation, velocity;
  int num_classes = 0;

  static CenterHead create(int in_channels, int num_classes, const HeadConfig& cfg, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
  static std::size_t param_count(int in_channels, int num_classes, const HeadConfig& cfg);
};

/// Per-pixel predictions on the output grid. Channel order:
/// offset (dx, dy) in cells, size (log w, log l, log h),
/// rotation (sin yaw, cos yaw), velocity (vx, vy) in m/s, height = box center z.
struct HeadOutput {
  Tensor heatmap;  // [1,K,h,w], after sigmoid
  Tensor offset;   // [1,2,h,w]
  Tensor height;   // [1,1,h,w]
  Tensor size;     // [1,3,h,w]
  Tensor rotation; // [1,2,h,w]
  Tensor velocity; // [1,2,h,w]
};

HeadOutput head_forward(const Tensor& bev, CenterHead& head);

// ---------------------------------------------------------------------------
// Targets

struct TargetConfig {
  double min_overlap = 0.1;
  double min_radius = 2.0;
};

/// Radius in output cells from the three corner-displacement IoU cases
/// (shift, shrink, grow) at `min_overlap`, clamped to `min_radius`.
double gaussian_radius(const Box3D& box, double cell_size, double min_overlap = 0.1, double min_radius = 2.0);

/// Gaussian spread in output cells: radius / 3.
double gaussian_sigma(const Box3D& box, double cell_size, double min_overlap = 0.1, double min_radius = 2.0);

struct CenterTarget {
  int row = 0;
  int col = 0;
  int class_id = 0;
  std::size_t object = 0;  // index into the source gt box list
};

struct TargetMaps {
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::vector<double> heatmap;  // [K, h, w]
  std::vector<CenterTarget> centers;
  std::vector<std::array<double, 2>> offset;
  std::vector<double> center_z;
  std::vector<std::array<double, 3>> log_size;
  std::vector<std::array<double, 2>> rotation;
  std::vector<std::array<double, 2>> velocity;
  std::vector<double> sigma;

  /// N: number of in-range objects.
  std::size_t num_objects() const { return centers.size(); }
  double heat(int k, int row, int col) const {
    return heatmap[(static_cast<std::size_t>(k) * height + row) * width + col];
  }
};

/// Per-class max of Gaussians exp(-|p - q|^2 / (2 sigma^2)) around the integer
/// center pixel q of each in-range box, plus regression targets at q.
TargetMaps render_targets(const std::vector<Box3D>& gt_boxes, const BevGeometry& geometry, int num_classes,
                          const TargetConfig& cfg = {});

/// Head output whose maps hold the targets exactly (heatmap = target heatmap,
/// regressions written at the center pixels, zero elsewhere).
HeadOutput targets_as_head_output(const TargetMaps& targets);

// ---------------------------------------------------------------------------
// Losses

struct FocalParams {
  double alpha = 2.0;
  double beta = 4.0;
};

struct LossWeights {
  double offset = 1.0;
  double size = 1.0;
  double height = 1.0;
  double rotation = 0.2;
  double velocity = 1.0;
};

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside log terms.
inline constexpr double kProbClamp = 1e-6;

/// Penalty-reduced pixelwise focal loss, normalized by max(N, 1).
Tensor focal_loss(const Tensor& pred_heatmap, const TargetMaps& target, const FocalParams& fp = {});

struct RegressionLosses {
  Tensor offset, size, height, rotation, velocity;
};

/// Mean absolute error over center pixels and vector components; zero when
/// there are no centers.
RegressionLosses regression_losses(const HeadOutput& head, const TargetMaps& target);

Tensor total_loss(const Tensor& heatmap_loss, const RegressionLosses& reg, const LossWeights& w = {});

struct LossBreakdown {
  Tensor heatmap;
  RegressionLosses regression;
  Tensor total;
};

LossBreakdown compute_losses(const HeadOutput& head, const TargetMaps& target, const FocalParams& fp,
                             const LossWeights& w);

}  // namespace fmfnet
