#include "fmfnet/decode.hpp"

#include <algorithm>
#include <cmath>

#include "fmfnet/errors.hpp"

namespace fmfnet {

void MatchConfig::validate() const {
  if (distance_thresholds.empty()) throw ConfigError("match.distance_thresholds must be nonempty");
  for (std::size_t i = 0; i < distance_thresholds.size(); ++i) {
    if (!(distance_thresholds[i] > 0.0)) throw ConfigError("distance thresholds must be positive");
    if (i > 0 && !(distance_thresholds[i] > distance_thresholds[i - 1])) {
      throw ConfigError("distance thresholds must be strictly ascending");
    }
  }
  if (!(tp_threshold > 0.0)) throw ConfigError("match.tp_threshold must be positive");
  if (top_k < 1) throw ConfigError("match.top_k must be >= 1");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) throw ConfigError("match.score_threshold must lie in [0, 1]");
}

std::vector<Peak> find_peaks(std::span<const double> heatmap, int num_classes, int height, int width) {
  const auto K = static_cast<std::size_t>(num_classes), H = static_cast<std::size_t>(height),
             W = static_cast<std::size_t>(width);
  if (heatmap.size() != K * H * W) throw ShapeError("find_peaks: heatmap size does not match K*h*w");
  const Tensor pooled = max_pool2d(Tensor::from_vector({1, K, H, W}, {heatmap.begin(), heatmap.end()}), 3, 1, 1);
  auto mp = pooled.data();

  std::vector<Peak> peaks;
  for (int k = 0; k < num_classes; ++k) {
    const double* v = heatmap.data() + static_cast<std::size_t>(k) * H * W;
    const double* m = mp.data() + static_cast<std::size_t>(k) * H * W;
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        const double x = v[r * width + c];
        if (x != m[r * width + c]) continue;
        // Equal neighbours earlier in raster order win the tie.
        bool first = true;
        for (int dr = -1; dr <= 0 && first; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc >= 0) break;
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || cc < 0 || cc >= width) continue;
            if (v[rr * width + cc] == x) {
              first = false;
              break;
            }
          }
        if (first) peaks.push_back({k, r, c, x});
      }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.row != b.row) return a.row < b.row;
    return a.col < b.col;
  });
  return peaks;
}

std::vector<Detection> decode(const HeadOutput& head, const BevGeometry& geometry, const MatchConfig& cfg) {
  const Tensor& hm = head.heatmap;
  if (hm.ndim() != 4 || hm.dim(0) != 1 || static_cast<int>(hm.dim(2)) != geometry.height ||
      static_cast<int>(hm.dim(3)) != geometry.width) {
    throw ShapeError("decode: heatmap " + shape_str(hm.shape()) + " does not match the output geometry");
  }
  const int K = static_cast<int>(hm.dim(1));
  const std::size_t plane = static_cast<std::size_t>(geometry.height) * geometry.width;
  auto off = head.offset.data();
  auto z = head.height.data();
  auto sz = head.size.data();
  auto rot = head.rotation.data();
  auto vel = head.velocity.data();

  std::vector<Detection> out;
  for (const Peak& p : find_peaks(hm.data(), K, geometry.height, geometry.width)) {
    if (static_cast<int>(out.size()) >= cfg.top_k || p.score < cfg.score_threshold) break;
    const std::size_t at = static_cast<std::size_t>(p.row) * geometry.width + p.col;
    Detection d;
    d.score = p.score;
    d.class_id = p.class_id;
    d.box.class_id = p.class_id;
    d.box.cx = (p.col + off[at]) * geometry.cell + geometry.x_min;
    d.box.cy = (p.row + off[plane + at]) * geometry.cell + geometry.y_min;
    d.box.cz = z[at];
    d.box.w = std::exp(sz[at]);
    d.box.l = std::exp(sz[plane + at]);
    d.box.h = std::exp(sz[2 * plane + at]);
    d.box.yaw = std::atan2(rot[at], rot[plane + at]);
    d.box.vx = vel[at];
    d.box.vy = vel[plane + at];
    out.push_back(d);
  }
  return out;
}

}  // namespace fmfnet
