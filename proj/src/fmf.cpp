#include "fmfnet/fmf.hpp"

#include <cmath>

#include "fmfnet/errors.hpp"

namespace fmfnet {

void FmfConfig::validate() const {
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("fmf.kernel_size must be a positive odd number");
}

FmfParams FmfParams::create(int channels, int kernel_size, Rng& rng) {
  FmfParams p;
  p.conv = Conv2d::create(2 * channels, channels, kernel_size, 1, rng);
  p.bn = BatchNorm::create(static_cast<std::size_t>(channels));
  return p;
}

void FmfParams::collect(ParamSet& set, const std::string& prefix) {
  conv.collect(set, prefix + ".conv");
  fmfnet::collect(bn, set, prefix + ".bn");
}

std::size_t FmfParams::param_count(int channels, int kernel_size) {
  return Conv2d::param_count(2 * channels, channels, kernel_size) + 2 * static_cast<std::size_t>(channels);
}

Tensor fmf_base(const Tensor& current, const Tensor& previous, FmfParams& params, Mode mode) {
  if (current.shape() != previous.shape()) {
    throw ShapeError("fmf_base: current " + shape_str(current.shape()) + " vs previous " + shape_str(previous.shape()));
  }
  if (current.ndim() != 4 || static_cast<int>(current.dim(1)) != params.channels()) {
    throw ShapeError("fmf_base: expected [N," + std::to_string(params.channels()) + ",h,w], got " +
                     shape_str(current.shape()));
  }
  return relu(batch_norm(params.conv.forward(concat_channels({current, previous})), params.bn, mode));
}

Tensor warp_grid(const Pose2D& relative_pose, const BevGeometry& geometry) {
  const auto h = static_cast<std::size_t>(geometry.height), w = static_cast<std::size_t>(geometry.width);
  const double c = std::cos(relative_pose.yaw);
  const double s = std::sin(relative_pose.yaw);
  auto snap = [](double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
  };
  std::vector<double> grid(h * w * 2);
  for (std::size_t row = 0; row < h; ++row)
    for (std::size_t col = 0; col < w; ++col) {
      const double px = geometry.x_min + (static_cast<double>(col) + 0.5) * geometry.cell - relative_pose.tx;
      const double py = geometry.y_min + (static_cast<double>(row) + 0.5) * geometry.cell - relative_pose.ty;
      // R(-yaw) * (p - t)
      const double qx = c * px + s * py;
      const double qy = -s * px + c * py;
      grid[(row * w + col) * 2] = snap((qx - geometry.x_min) / geometry.cell - 0.5);
      grid[(row * w + col) * 2 + 1] = snap((qy - geometry.y_min) / geometry.cell - 0.5);
    }
  return Tensor::from_vector({1, h, w, 2}, std::move(grid));
}

Tensor warp_feature_map(const Tensor& map, const Pose2D& relative_pose, const BevGeometry& geometry) {
  if (map.ndim() != 4 || map.dim(0) != 1 || static_cast<int>(map.dim(2)) != geometry.height ||
      static_cast<int>(map.dim(3)) != geometry.width) {
    throw ShapeError("warp_feature_map: map " + shape_str(map.shape()) + " does not match the BEV geometry");
  }
  if (relative_pose.tx == 0.0 && relative_pose.ty == 0.0 && relative_pose.yaw == 0.0) return map;
  return bilinear_sample(map, warp_grid(relative_pose, geometry));
}

FmfStepResult fmf_step(const Tensor& current, const FmfState& state, FmfParams& params, Mode mode,
                       const FmfConfig& cfg, const BevGeometry& geometry, const std::optional<Pose2D>& pose) {
  FmfStepResult result;
  result.state.prev_map = current;
  result.state.prev_pose = pose;
  result.state.initialized = true;

  Tensor previous = current;
  if (state.initialized) {
    if (state.prev_map.shape() != current.shape()) {
      throw StateError("feature map shape changed mid-sequence: " + shape_str(state.prev_map.shape()) + " -> " +
                       shape_str(current.shape()));
    }
    previous = state.prev_map;
    if (cfg.use_odometry && pose && state.prev_pose) {
      previous = warp_feature_map(previous, relative_pose(*state.prev_pose, *pose), geometry);
    }
  }
  result.output = fmf_base(current, previous, params, mode);
  return result;
}

}  // namespace fmfnet
