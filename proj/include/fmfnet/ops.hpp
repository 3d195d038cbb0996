#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "fmfnet/tensor.hpp"

namespace fmfnet {

// Elementwise and reductions ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Convolutional building blocks ---------------------------------------------

/// Cross-correlation of x [N,C,H,W] with w [F,C,kh,kw]; bias [F] may be
/// undefined. Output [N,F,(H+2p-kh)/s+1,(W+2p-kw)/s+1].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);

/// Affine per-channel normalization with running statistics.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNorm create(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

enum class Mode { kTrain, kEval };

/// Input [N, C, ...]. Train mode normalizes with batch statistics over every
/// axis but 1 and updates the running statistics (unbiased variance); eval
/// mode uses the running statistics.
Tensor batch_norm(const Tensor& x, BatchNorm& bn, Mode mode);

/// Channel concatenation of [N,Ci,H,W] tensors.
Tensor concat_channels(const std::vector<Tensor>& parts);

/// Forward-only max pooling with -inf padding (used for peak extraction).
Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);

/// Nearest-neighbour upsampling of [N,C,H,W] by an integer factor.
Tensor upsample_nearest(const Tensor& x, int factor);

/// x [M, in] times w [out, in] transposed, plus bias [out] when defined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Maximum along one axis (the axis is removed). Ties route the gradient to
/// the first maximal element.
Tensor max_over_axis(const Tensor& x, std::size_t axis);

/// Rows of x [M, C] grouped into consecutive segments of the given sizes;
/// returns the per-segment max [P, C]. Every segment must be nonempty.
Tensor segment_max(const Tensor& x, std::span<const std::int32_t> counts);

// BEV grid operations -------------------------------------------------------

/// Writes features [P, C] into a zero [1, C, height, width] grid at
/// coords (ix, iy) pairs. Coordinates must be unique and in range.
Tensor scatter_to_grid(const Tensor& features, std::span<const std::int32_t> coords, int width, int height);

/// Like scatter_to_grid but coordinates may repeat; values are summed after
/// multiplying by `factor`.
Tensor scatter_add_to_grid(const Tensor& features, std::span<const std::int32_t> coords, int width, int height,
                           double factor);

/// Reads map [1, C, H, W] at (row, col) pixels; returns [n, C].
Tensor gather_pixels(const Tensor& map, std::span<const std::array<int, 2>> pixels);

/// Bilinear resampling of map [N,C,H,W] at grid [N,Ho,Wo,2] holding source
/// (x, y) positions in pixel units, where integer positions are pixel
/// centers. Samples outside the map read zero. Differentiable w.r.t. map.
Tensor bilinear_sample(const Tensor& map, const Tensor& grid);

}  // namespace fmfnet
