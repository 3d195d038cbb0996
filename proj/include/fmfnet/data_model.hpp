#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fmfnet {

struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Planar ego pose: translation in meters, yaw in radians within [-pi, pi).
struct Pose2D {
  double tx = 0.0;
  double ty = 0.0;
  double yaw = 0.0;

  friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

/// 2.5D box: BEV center plus height, size, planar heading and planar velocity.
/// `l` runs along the heading direction, `w` across it.
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double w = 1.0, l = 1.0, h = 1.0;
  double yaw = 0.0;
  double vx = 0.0, vy = 0.0;
  int class_id = 0;

  friend bool operator==(const Box3D&, const Box3D&) = default;
};

struct PointCloudFrame {
  std::vector<Point> points;
  double timestamp = 0.0;
  std::optional<Pose2D> ego_pose;
  std::vector<Box3D> gt_boxes;

  friend bool operator==(const PointCloudFrame&, const PointCloudFrame&) = default;
};

struct SceneSequence {
  std::vector<PointCloudFrame> frames;
  std::vector<std::string> class_names;

  friend bool operator==(const SceneSequence&, const SceneSequence&) = default;
};

/// Wraps an angle into [-pi, pi).
double wrap_angle(double a);

/// Relative transform mapping points expressed in the `prev` ego frame into
/// the `cur` ego frame: p_cur = R(rel.yaw) * p_prev + (rel.tx, rel.ty).
Pose2D relative_pose(const Pose2D& prev, const Pose2D& cur);

/// Inverse of a relative transform produced by `relative_pose`.
Pose2D invert_pose(const Pose2D& rel);

void validate(const Box3D& box, int num_classes);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneSpec {
  int num_frames = 10;
  int num_objects = 5;
  /// Half extent of the square BEV area in meters; objects stay inside it.
  double range = 12.8;
  /// Ego forward speed along +x in m/s.
  double ego_speed = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names{"car", "pedestrian"};
  /// Seconds between frames. A power of two keeps trajectories exact in float.
  double frame_interval = 0.5;
  int clutter_points = 1500;
  /// Surface samples per square meter before range dropout.
  double surface_density = 40.0;
};

/// Deterministic multi-frame scene: constant-velocity objects sampled on their
/// visible faces plus ground clutter. Every object stays in range for the
/// whole sequence and keeps its index in `gt_boxes` across frames.
/// All emitted coordinates are exactly representable in single precision.
SceneSequence generate_scene(const SceneSpec& spec);

/// Ground plane height in the sensor frame used by the generator.
inline constexpr double kGroundZ = -1.8;

}  // namespace fmfnet
