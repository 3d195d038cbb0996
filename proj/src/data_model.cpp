#include "fmfnet/data_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "fmfnet/errors.hpp"
#include "fmfnet/random.hpp"

namespace fmfnet {

namespace {

constexpr double kPi = std::numbers::pi;

struct ClassTemplate {
  double w, l, h;
  double max_speed;
};

ClassTemplate template_for(const std::string& name, std::size_t index) {
  if (name == "car") return {1.9, 4.5, 1.6, 6.0};
  if (name == "truck") return {2.6, 7.5, 3.0, 5.0};
  if (name == "bus") return {2.9, 10.5, 3.4, 4.0};
  if (name == "pedestrian") return {0.7, 0.7, 1.75, 1.5};
  if (name == "cyclist" || name == "bicycle") return {0.7, 1.8, 1.6, 4.0};
  if (name == "barrier") return {2.5, 0.5, 1.0, 0.0};
  if (name == "traffic_cone") return {0.4, 0.4, 1.0, 0.0};
  const double s = 1.0 + 0.5 * static_cast<double>(index % 4);
  return {s, 1.5 * s, 1.5, 3.0};
}

double quantize(double x, double step) { return std::round(x / step) * step; }

double to_float(double x) {
  volatile float f = static_cast<float>(x);
  return static_cast<double>(f);
}

/// Float-representable angle in [-pi, pi).
double float_angle(double a) {
  float f = static_cast<float>(wrap_angle(a));
  if (static_cast<double>(f) >= kPi) f = std::nextafter(static_cast<float>(kPi), 0.0f);
  if (static_cast<double>(f) < -kPi) f = std::nextafter(static_cast<float>(-kPi), 0.0f);
  return static_cast<double>(f);
}

struct ObjectTrack {
  Box3D box0;  // box at t = 0 (ego frame == world frame at t = 0)
  double intensity = 0.5;
};

}  // namespace

double wrap_angle(double a) {
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r < 0.0) r += 2.0 * kPi;
  r -= kPi;
  if (r >= kPi) r -= 2.0 * kPi;
  return r;
}

Pose2D relative_pose(const Pose2D& prev, const Pose2D& cur) {
  const double dx = prev.tx - cur.tx;
  const double dy = prev.ty - cur.ty;
  const double c = std::cos(cur.yaw);
  const double s = std::sin(cur.yaw);
  return {c * dx + s * dy, -s * dx + c * dy, wrap_angle(prev.yaw - cur.yaw)};
}

Pose2D invert_pose(const Pose2D& rel) {
  const double c = std::cos(rel.yaw);
  const double s = std::sin(rel.yaw);
  // -R(-yaw) * t
  return {-(c * rel.tx + s * rel.ty), -(-s * rel.tx + c * rel.ty), wrap_angle(-rel.yaw)};
}

void validate(const Box3D& box, int num_classes) {
  const std::array<double, 9> v{box.cx, box.cy, box.cz, box.w, box.l, box.h, box.yaw, box.vx, box.vy};
  for (double x : v) {
    if (!std::isfinite(x)) throw FormatError("box has non-finite field");
  }
  if (box.w <= 0.0 || box.l <= 0.0 || box.h <= 0.0) throw FormatError("box size must be positive");
  if (box.class_id < 0 || box.class_id >= num_classes) {
    throw FormatError("box class_id " + std::to_string(box.class_id) + " out of range");
  }
}

SceneSequence generate_scene(const SceneSpec& spec) {
  if (spec.num_frames < 1) throw ConfigError("num_frames must be >= 1");
  if (!(spec.range > 0.0) || !std::isfinite(spec.range)) throw ConfigError("scene range must be positive");
  if (spec.num_objects < 0) throw ConfigError("num_objects must be >= 0");
  if (spec.class_names.empty()) throw ConfigError("at least one class is required");
  if (!(spec.frame_interval > 0.0)) throw ConfigError("frame_interval must be positive");
  if (spec.clutter_points < 0 || spec.surface_density < 0.0) throw ConfigError("negative point budget");

  Rng rng(spec.seed);
  const double dt = spec.frame_interval;
  const double span_t = dt * static_cast<double>(spec.num_frames - 1);
  const double ego_v = quantize(spec.ego_speed, 1.0 / 64.0);
  const double limit = 0.85 * spec.range;
  const int num_classes = static_cast<int>(spec.class_names.size());

  auto center_at = [&](const Box3D& b, double t) {
    return std::array<double, 2>{b.cx + b.vx * t - ego_v * t, b.cy + b.vy * t};
  };
  auto inside = [&](const Box3D& b) {
    for (double t : {0.0, span_t}) {
      const auto c = center_at(b, t);
      if (std::abs(c[0]) > limit || std::abs(c[1]) > limit) return false;
    }
    return true;
  };

  std::vector<ObjectTrack> tracks;
  for (int i = 0; i < spec.num_objects; ++i) {
    const int cls = i % num_classes;
    const ClassTemplate tpl = template_for(spec.class_names[static_cast<std::size_t>(cls)],
                                           static_cast<std::size_t>(cls));
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      Box3D b;
      b.class_id = cls;
      b.w = quantize(tpl.w * rng.uniform(0.9, 1.1), 1.0 / 64.0);
      b.l = quantize(tpl.l * rng.uniform(0.9, 1.1), 1.0 / 64.0);
      b.h = quantize(tpl.h * rng.uniform(0.9, 1.1), 1.0 / 64.0);
      b.cz = to_float(kGroundZ + 0.5 * b.h);
      b.cx = quantize(rng.uniform(-limit, limit), 1.0 / 256.0);
      b.cy = quantize(rng.uniform(-limit, limit), 1.0 / 256.0);
      const double heading = rng.uniform(-kPi, kPi);
      const double speed = tpl.max_speed > 0.0 && rng.bernoulli(0.8) ? rng.uniform(0.3, 1.0) * tpl.max_speed : 0.0;
      b.vx = quantize(speed * std::cos(heading), 1.0 / 64.0);
      b.vy = quantize(speed * std::sin(heading), 1.0 / 64.0);
      // Shrink motion relative to the ego until the track fits the area.
      for (int k = 0; k < 12 && !inside(b); ++k) {
        b.vx = quantize(ego_v + 0.5 * (b.vx - ego_v), 1.0 / 64.0);
        b.vy = quantize(0.5 * b.vy, 1.0 / 64.0);
      }
      if (!inside(b)) continue;
      b.yaw = (b.vx != 0.0 || b.vy != 0.0) ? float_angle(std::atan2(b.vy, b.vx)) : float_angle(heading);

      const double diag = std::hypot(b.w, b.l);
      bool clear = true;
      for (int f = 0; f < spec.num_frames && clear; ++f) {
        const double t = dt * f;
        const auto c = center_at(b, t);
        if (std::hypot(c[0], c[1]) < 0.5 * diag + 1.0) clear = false;
        for (const auto& other : tracks) {
          const auto o = center_at(other.box0, t);
          const double sep = 0.5 * (diag + std::hypot(other.box0.w, other.box0.l)) + 1.0;
          if (std::hypot(c[0] - o[0], c[1] - o[1]) < sep) clear = false;
        }
      }
      if (!clear) continue;
      tracks.push_back({b, rng.uniform(0.4, 0.9)});
      placed = true;
    }
    if (!placed) throw ConfigError("cannot place " + std::to_string(spec.num_objects) + " objects in range");
  }

  SceneSequence seq;
  seq.class_names = spec.class_names;
  seq.frames.reserve(static_cast<std::size_t>(spec.num_frames));
  const double max_dist = spec.range * std::numbers::sqrt2;

  for (int f = 0; f < spec.num_frames; ++f) {
    const double t = dt * f;
    PointCloudFrame frame;
    frame.timestamp = t;
    frame.ego_pose = Pose2D{ego_v * t, 0.0, 0.0};

    for (const auto& track : tracks) {
      Box3D b = track.box0;
      const auto c = center_at(track.box0, t);
      b.cx = c[0];
      b.cy = c[1];
      frame.gt_boxes.push_back(b);

      const double ch = std::cos(b.yaw);
      const double sh = std::sin(b.yaw);
      const double z_lo = b.cz - 0.5 * b.h;
      const double z_hi = b.cz + 0.5 * b.h;
      // Faces: +heading, -heading, +lateral, -lateral (outward normals).
      const std::array<std::array<double, 2>, 4> normals{{{ch, sh}, {-ch, -sh}, {-sh, ch}, {sh, -ch}}};
      const std::array<double, 4> half_depth{0.5 * b.l, 0.5 * b.l, 0.5 * b.w, 0.5 * b.w};
      const std::array<double, 4> face_width{b.w, b.w, b.l, b.l};
      for (std::size_t k = 0; k < 4; ++k) {
        const auto& n = normals[k];
        const double fx = b.cx + n[0] * half_depth[k];
        const double fy = b.cy + n[1] * half_depth[k];
        if (n[0] * fx + n[1] * fy >= 0.0) continue;  // faces away from the sensor
        const double keep = std::clamp(1.0 - 0.8 * std::hypot(fx, fy) / max_dist, 0.15, 1.0);
        const double expected = face_width[k] * b.h * spec.surface_density;
        const auto count = static_cast<int>(std::floor(expected + rng.uniform()));
        for (int p = 0; p < count; ++p) {
          const double u = rng.uniform(-0.5, 0.5) * face_width[k];
          const double z = rng.uniform(z_lo, z_hi);
          const double jitter = rng.uniform(-0.05, 0.05);
          if (!rng.bernoulli(keep)) continue;
          // Tangent is the normal rotated by +90 degrees.
          frame.points.push_back({to_float(fx - n[1] * u), to_float(fy + n[0] * u), to_float(z),
                                  to_float(std::clamp(track.intensity + jitter, 0.0, 1.0))});
        }
      }
      if (z_hi < 0.0) {  // roof is visible from a sensor above it
        const double expected = b.w * b.l * spec.surface_density;
        const auto count = static_cast<int>(std::floor(expected + rng.uniform()));
        const double keep = std::clamp(1.0 - 0.8 * std::hypot(b.cx, b.cy) / max_dist, 0.15, 1.0);
        for (int p = 0; p < count; ++p) {
          const double a = rng.uniform(-0.5, 0.5) * b.l;
          const double q = rng.uniform(-0.5, 0.5) * b.w;
          const double jitter = rng.uniform(-0.05, 0.05);
          if (!rng.bernoulli(keep)) continue;
          frame.points.push_back({to_float(b.cx + ch * a - sh * q), to_float(b.cy + sh * a + ch * q), to_float(z_hi),
                                  to_float(std::clamp(track.intensity + jitter, 0.0, 1.0))});
        }
      }
    }

    for (int p = 0; p < spec.clutter_points; ++p) {
      const double x = rng.uniform(-spec.range, spec.range);
      const double y = rng.uniform(-spec.range, spec.range);
      const double z = kGroundZ + 0.03 * rng.normal();
      frame.points.push_back({to_float(x), to_float(y), to_float(z), to_float(rng.uniform(0.0, 0.2))});
    }
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

}  // namespace fmfnet
