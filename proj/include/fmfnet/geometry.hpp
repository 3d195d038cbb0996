#pragma once

#include "fmfnet/voxelizer.hpp"

namespace fmfnet {

/// Geometry of a BEV feature map: pixel (row, col) covers
/// [x_min + col*cell, x_min + (col+1)*cell) x [y_min + row*cell, ...).
struct BevGeometry {
  double x_min = 0.0;
  double y_min = 0.0;
  double cell = 1.0;
  int width = 0;
  int height = 0;

  /// Continuous pixel coordinates of a metric position (pixel (0,0) spans [0,1)).
  double to_px(double x) const { return (x - x_min) / cell; }
  double to_py(double y) const { return (y - y_min) / cell; }
};

/// Geometry of the map produced at `output_stride` from the voxel grid.
BevGeometry output_geometry(const GridConfig& grid, int output_stride);

}  // namespace fmfnet
