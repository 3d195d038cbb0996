#pragma once

// Brute-force reference implementations used by the unit and acceptance
// tests. They share no code with the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <tuple>
#include <vector>

#include "fmfnet/data_model.hpp"

namespace oracle {

// Largest r in [0, hi] with f(r) >= o, for f decreasing in r.
inline double bisect_decreasing(const std::function<double(double)>& f, double o, double hi) {
  double lo = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) >= o) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

/// Gaussian radius in cells from the three corner-perturbation overlap
/// curves, each solved numerically.
inline double gaussian_radius(double w_m, double l_m, double cell, double overlap, double min_radius) {
  const double w = w_m / cell, l = l_m / cell, area = w * l;
  auto shifted = [&](double r) {
    const double inter = std::max(0.0, w - r) * std::max(0.0, l - r);
    return inter / (2.0 * area - inter);
  };
  auto shrunk = [&](double r) { return std::max(0.0, w - 2 * r) * std::max(0.0, l - 2 * r) / area; };
  auto grown = [&](double r) { return area / ((w + 2 * r) * (l + 2 * r)); };
  const double big = 10.0 * (w + l) + 10.0;
  const double r = std::min({bisect_decreasing(shifted, overlap, std::min(w, l)),
                             bisect_decreasing(shrunk, overlap, 0.5 * std::min(w, l)),
                             bisect_decreasing(grown, overlap, big)});
  return std::max(min_radius, r);
}

/// Per-pixel maximum over boxes of the unnormalized Gaussian, class-major.
inline std::vector<double> render_heatmap(const std::vector<fmfnet::Box3D>& boxes, int num_classes, int height,
                                          int width, double x_min, double y_min, double cell, double overlap,
                                          double min_radius) {
  std::vector<double> hm(static_cast<std::size_t>(num_classes) * height * width, 0.0);
  for (int k = 0; k < num_classes; ++k) {
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        double best = 0.0;
        for (const auto& b : boxes) {
          if (b.class_id != k) continue;
          const double px = (b.cx - x_min) / cell, py = (b.cy - y_min) / cell;
          const int col = static_cast<int>(std::floor(px)), row = static_cast<int>(std::floor(py));
          if (col < 0 || row < 0 || col >= width || row >= height) continue;
          const double sigma = gaussian_radius(b.w, b.l, cell, overlap, min_radius) / 3.0;
          const double d2 = static_cast<double>((c - col) * (c - col) + (r - row) * (r - row));
          best = std::max(best, std::exp(-d2 / (2.0 * sigma * sigma)));
        }
        hm[(static_cast<std::size_t>(k) * height + r) * width + c] = best;
      }
    }
  }
  return hm;
}

struct Peak {
  int class_id, row, col;
  double score;
  bool operator<(const Peak& o) const {
    return std::tie(class_id, row, col, score) < std::tie(o.class_id, o.row, o.col, o.score);
  }
  bool operator==(const Peak& o) const = default;
};

/// Local maxima over the 8-neighbourhood; among equal neighbours only the
/// first in raster order survives.
inline std::vector<Peak> local_maxima(const std::vector<double>& hm, int num_classes, int height, int width) {
  std::vector<Peak> out;
  auto at = [&](int k, int r, int c) { return hm[(static_cast<std::size_t>(k) * height + r) * width + c]; };
  for (int k = 0; k < num_classes; ++k) {
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        const double v = at(k, r, c);
        bool peak = true;
        for (int dr = -1; dr <= 1 && peak; ++dr) {
          for (int dc = -1; dc <= 1 && peak; ++dc) {
            const int rr = r + dr, cc = c + dc;
            if ((dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= height || cc >= width) continue;
            const double n = at(k, rr, cc);
            const bool earlier = rr < r || (rr == r && cc < c);
            if (n > v || (n == v && earlier)) peak = false;
          }
        }
        if (peak) out.push_back({k, r, c, v});
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct Det {
  std::size_t frame;
  double score, x, y;
};

struct Gt {
  std::size_t frame;
  double x, y;
};

/// Greedy matching in score order (ties by position) followed by an exact
/// rational precision/recall sweep.
inline double average_precision(std::vector<Det> dets, const std::vector<Gt>& gts, double threshold) {
  if (gts.empty()) return 0.0;
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.frame < b.frame;
  });
  std::vector<bool> used(gts.size(), false);
  std::vector<std::int64_t> tp_prefix;
  std::int64_t tp = 0;
  for (const auto& d : dets) {
    std::size_t best = gts.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].frame != d.frame) continue;
      const double dist = std::hypot(d.x - gts[g].x, d.y - gts[g].y);
      if (dist < best_d) {
        best_d = dist;
        best = g;
      }
    }
    if (best < gts.size() && best_d < threshold) {
      used[best] = true;
      ++tp;
    }
    tp_prefix.push_back(tp);
  }
  const auto npos = static_cast<std::int64_t>(gts.size());
  // Precision at recall r: max over prefixes i with recall_i >= r of tp_i / (i+1).
  // Compared as fractions, so no bin is misplaced by rounding.
  double sum = 0.0;
  for (std::int64_t j = 11; j <= 100; ++j) {
    std::int64_t num = 0, den = 1;
    for (std::size_t i = 0; i < tp_prefix.size(); ++i) {
      const std::int64_t t = tp_prefix[i], n = static_cast<std::int64_t>(i) + 1;
      if (t * 100 < j * npos) continue;
      if (t * den > num * n) {
        num = t;
        den = n;
      }
    }
    const double p = static_cast<double>(num) / static_cast<double>(den);
    sum += std::max(0.0, p - 0.1);
  }
  return std::clamp(sum / 90.0 / 0.9, 0.0, 1.0);
}

}  // namespace oracle
