#include "fmfnet/voxelizer.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "fmfnet/errors.hpp"
#include "fmfnet/random.hpp"

namespace fmfnet {

namespace {

int cells_along(const Range& r, double cell, const char* axis) {
  const double ratio = r.extent() / cell;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) > 1e-6 || rounded < 1.0) {
    throw ConfigError(std::string("range along ") + axis + " is not an integer number of cells");
  }
  return static_cast<int>(rounded);
}

}  // namespace

std::string to_string(GridMode mode) { return mode == GridMode::kPillar ? "pillar" : "voxel"; }

GridMode grid_mode_from_string(const std::string& s) {
  if (s == "pillar") return GridMode::kPillar;
  if (s == "voxel") return GridMode::kVoxel;
  throw ConfigError("unknown grid mode '" + s + "'");
}

void GridConfig::validate() const {
  for (const Range* r : {&x_range, &y_range, &z_range}) {
    if (!std::isfinite(r->min) || !std::isfinite(r->max) || !(r->max > r->min)) {
      throw ConfigError("grid ranges must be finite and nonempty");
    }
  }
  for (double c : cell_size) {
    if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("cell sizes must be positive");
  }
  if (cell_size[0] != cell_size[1]) throw ConfigError("BEV cells must be square (dx == dy)");
  if (max_points_per_cell < 1 || max_cells < 1) throw ConfigError("cell caps must be >= 1");
  cells_along(x_range, cell_size[0], "x");
  cells_along(y_range, cell_size[1], "y");
  cells_along(z_range, cell_size[2], "z");
}

int GridConfig::width() const { return cells_along(x_range, cell_size[0], "x"); }
int GridConfig::height() const { return cells_along(y_range, cell_size[1], "y"); }
int GridConfig::depth() const { return cells_along(z_range, cell_size[2], "z"); }

GridConfig default_pillar_config() {
  GridConfig cfg;
  cfg.x_range = {-51.2, 51.2};
  cfg.y_range = {-51.2, 51.2};
  cfg.z_range = {-3.0, 3.0};
  cfg.cell_size = {0.32, 0.32, 6.0};
  cfg.max_points_per_cell = 20;
  cfg.max_cells = 60000;
  cfg.mode = GridMode::kPillar;
  return cfg;
}

GridConfig default_voxel_config() {
  GridConfig cfg;
  cfg.x_range = {-51.2, 51.2};
  cfg.y_range = {-51.2, 51.2};
  cfg.z_range = {-3.0, 3.0};
  cfg.cell_size = {0.1, 0.1, 0.15};
  cfg.max_points_per_cell = 10;
  cfg.max_cells = 150000;
  cfg.mode = GridMode::kVoxel;
  return cfg;
}

GridConfig desk_pillar_config() {
  GridConfig cfg = default_pillar_config();
  cfg.x_range = {-12.8, 12.8};
  cfg.y_range = {-12.8, 12.8};
  return cfg;
}

GridConfig desk_voxel_config() {
  GridConfig cfg = default_voxel_config();
  cfg.x_range = {-12.8, 12.8};
  cfg.y_range = {-12.8, 12.8};
  return cfg;
}

PillarTensor voxelize(const PointCloudFrame& frame, const GridConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int W = cfg.width();
  const int H = cfg.height();
  const int D = cfg.depth();
  const bool pillar = cfg.mode == GridMode::kPillar;

  PillarTensor out;
  out.mode = cfg.mode;
  out.max_points = cfg.max_points_per_cell;
  out.feature_dim = cfg.feature_dim();
  out.grid_width = W;
  out.grid_height = H;
  out.grid_depth = pillar ? 1 : D;

  // (cell key, point index); stable sort keeps the input order within a cell.
  std::vector<std::pair<std::int64_t, std::int32_t>> keyed;
  keyed.reserve(frame.points.size());
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    const Point& p = frame.points[i];
    if (!(p.x >= cfg.x_range.min && p.x < cfg.x_range.max)) continue;
    if (!(p.y >= cfg.y_range.min && p.y < cfg.y_range.max)) continue;
    if (!(p.z >= cfg.z_range.min && p.z < cfg.z_range.max)) continue;
    const auto ix = static_cast<std::int64_t>(std::floor((p.x - cfg.x_range.min) / cfg.cell_size[0]));
    const auto iy = static_cast<std::int64_t>(std::floor((p.y - cfg.y_range.min) / cfg.cell_size[1]));
    const auto iz = pillar ? 0 : static_cast<std::int64_t>(std::floor((p.z - cfg.z_range.min) / cfg.cell_size[2]));
    if (ix < 0 || ix >= W || iy < 0 || iy >= H || iz < 0 || iz >= (pillar ? 1 : D)) continue;
    keyed.emplace_back((iz * H + iy) * W + ix, static_cast<std::int32_t>(i));
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  // Group boundaries.
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    if (i == 0 || keyed[i].first != keyed[i - 1].first) starts.push_back(i);
  }
  starts.push_back(keyed.size());
  const std::size_t occupied = starts.size() - 1;

  Rng rng(seed);
  std::vector<std::size_t> cells;
  if (occupied > static_cast<std::size_t>(cfg.max_cells)) {
    cells = rng.sample_without_replacement(occupied, static_cast<std::size_t>(cfg.max_cells));
  } else {
    cells.resize(occupied);
    for (std::size_t c = 0; c < occupied; ++c) cells[c] = c;
  }

  const int F = out.feature_dim;
  const int N = out.max_points;
  out.num_cells = static_cast<int>(cells.size());
  out.features.assign(cells.size() * static_cast<std::size_t>(N) * F, 0.0);
  out.coords.reserve(cells.size() * static_cast<std::size_t>(out.coord_dim()));
  out.point_counts.reserve(cells.size());

  std::vector<std::int32_t> members;
  for (std::size_t slot = 0; slot < cells.size(); ++slot) {
    const std::size_t c = cells[slot];
    const std::size_t begin = starts[c];
    const std::size_t count = starts[c + 1] - begin;
    members.clear();
    if (count > static_cast<std::size_t>(N)) {
      for (std::size_t k : rng.sample_without_replacement(count, static_cast<std::size_t>(N))) {
        members.push_back(keyed[begin + k].second);
      }
    } else {
      for (std::size_t k = 0; k < count; ++k) members.push_back(keyed[begin + k].second);
    }

    const std::int64_t key = keyed[begin].first;
    const auto ix = static_cast<std::int32_t>(key % W);
    const auto iy = static_cast<std::int32_t>((key / W) % H);
    const auto iz = static_cast<std::int32_t>(key / (static_cast<std::int64_t>(W) * H));
    out.coords.push_back(ix);
    out.coords.push_back(iy);
    if (!pillar) out.coords.push_back(iz);
    out.point_counts.push_back(static_cast<std::int32_t>(members.size()));

    double mx = 0.0, my = 0.0, mz = 0.0;
    for (auto idx : members) {
      const Point& p = frame.points[static_cast<std::size_t>(idx)];
      mx += p.x;
      my += p.y;
      mz += p.z;
    }
    const auto n = static_cast<double>(members.size());
    mx /= n;
    my /= n;
    mz /= n;
    const double cx = cfg.x_range.min + (ix + 0.5) * cfg.cell_size[0];
    const double cy = cfg.y_range.min + (iy + 0.5) * cfg.cell_size[1];

    double* row = out.features.data() + slot * static_cast<std::size_t>(N) * F;
    for (auto idx : members) {
      const Point& p = frame.points[static_cast<std::size_t>(idx)];
      row[0] = p.x;
      row[1] = p.y;
      row[2] = p.z;
      row[3] = p.intensity;
      row[4] = p.x - mx;
      row[5] = p.y - my;
      row[6] = p.z - mz;
      if (pillar) {
        row[7] = p.x - cx;
        row[8] = p.y - cy;
      }
      row += F;
    }
  }
  return out;
}

}  // namespace fmfnet
