#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fmfnet/data_model.hpp"

namespace fmfnet {

enum class GridMode { kPillar, kVoxel };

std::string to_string(GridMode mode);
GridMode grid_mode_from_string(const std::string& s);

struct Range {
  double min = 0.0;
  double max = 0.0;
  double extent() const { return max - min; }
};

struct GridConfig {
  Range x_range{-12.8, 12.8};
  Range y_range{-12.8, 12.8};
  Range z_range{-3.0, 3.0};
  /// (dx, dy, dz) in meters; dx must equal dy (square BEV cells).
  std::array<double, 3> cell_size{0.32, 0.32, 6.0};
  int max_points_per_cell = 20;
  int max_cells = 60000;
  GridMode mode = GridMode::kPillar;

  /// Throws ConfigError when ranges, cell sizes or caps are invalid.
  void validate() const;

  int width() const;   // cells along x
  int height() const;  // cells along y
  int depth() const;   // cells along z
  /// Decorated per-point feature width: 9 for pillars, 7 for voxels.
  int feature_dim() const { return mode == GridMode::kPillar ? 9 : 7; }
};

/// Full-scale presets (point caps and cell sizes used for the benchmark runs).
GridConfig default_pillar_config();
GridConfig default_voxel_config();
/// Desk-scale presets: same cell sizes and caps, smaller area.
GridConfig desk_pillar_config();
GridConfig desk_voxel_config();

/// Capped pillars/voxels with decorated point features.
///
/// Pillar features per point: (x, y, z, i, x-mx, y-my, z-mz, x-cx, y-cy) where
/// (mx, my, mz) is the mean of the retained points of the cell and (cx, cy) the
/// cell center. Voxel features drop the last two entries.
struct PillarTensor {
  GridMode mode = GridMode::kPillar;
  int num_cells = 0;
  int max_points = 0;
  int feature_dim = 0;
  int grid_width = 0;
  int grid_height = 0;
  int grid_depth = 1;
  /// [num_cells x max_points x feature_dim], rows past point_counts are zero.
  std::vector<double> features;
  /// [num_cells x coord_dim] as (ix, iy) or (ix, iy, iz).
  std::vector<std::int32_t> coords;
  std::vector<std::int32_t> point_counts;

  int coord_dim() const { return mode == GridMode::kPillar ? 2 : 3; }
  double feature(int cell, int point, int channel) const {
    return features[(static_cast<std::size_t>(cell) * max_points + point) * feature_dim + channel];
  }

  friend bool operator==(const PillarTensor&, const PillarTensor&) = default;
};

/// Buckets in-range points by floor((p - min) / cell). Ranges are half-open,
/// so points on the max boundary are discarded. Over-full cells keep a seeded
/// uniform subset of their points; if too many cells are occupied, a seeded
/// uniform subset of cells is kept. Cells are ordered by (iz, iy, ix).
PillarTensor voxelize(const PointCloudFrame& frame, const GridConfig& cfg, std::uint64_t seed);

}  // namespace fmfnet
