#pragma once

#include <optional>
#include <utility>

#include "fmfnet/data_model.hpp"
#include "fmfnet/geometry.hpp"
#include "fmfnet/layers.hpp"

namespace fmfnet {

struct FmfConfig {
  /// Off: the aggregation block is replaced by an identity pass-through.
  bool enabled = true;
  /// Warp the previous map into the current ego frame before aggregation.
  bool use_odometry = false;
  int kernel_size = 3;

  void validate() const;
};

/// Shared conv (2C -> C, k x k, same padding) followed by BN.
struct FmfParams {
  Conv2d conv;
  BatchNorm bn;

  static FmfParams create(int channels, int kernel_size, Rng& rng);
  int channels() const { return static_cast<int>(bn.channels()); }
  void collect(ParamSet& set, const std::string& prefix);
  static std::size_t param_count(int channels, int kernel_size);
};

/// Recurrent state: the previous step's neck output (before aggregation).
struct FmfState {
  Tensor prev_map;
  std::optional<Pose2D> prev_pose;
  bool initialized = false;
};

/// relu(bn(conv(concat(current, previous)))), same shape as `current`.
Tensor fmf_base(const Tensor& current, const Tensor& previous, FmfParams& params, Mode mode);

/// Resamples the previous map into the current ego frame. `relative_pose`
/// maps points of the previous frame into the current one, so each output
/// pixel center p samples the input at R(-yaw) * (p - t). Outside the input
/// field of view the result is zero.
Tensor warp_feature_map(const Tensor& map, const Pose2D& relative_pose, const BevGeometry& geometry);

/// Source pixel coordinates used by warp_feature_map, as a [1, h, w, 2] grid.
Tensor warp_grid(const Pose2D& relative_pose, const BevGeometry& geometry);

struct FmfStepResult {
  Tensor output;
  FmfState state;
};

/// One recurrent step. On the first frame the current map aggregates with
/// itself. With odometry (`use_odometry` and both poses known) the stored map
/// is warped first. The returned state holds `current` and `pose`.
FmfStepResult fmf_step(const Tensor& current, const FmfState& state, FmfParams& params, Mode mode,
                       const FmfConfig& cfg, const BevGeometry& geometry, const std::optional<Pose2D>& pose);

}  // namespace fmfnet
