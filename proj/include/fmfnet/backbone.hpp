#pragma once

#include <vector>

#include "fmfnet/layers.hpp"
#include "fmfnet/voxelizer.hpp"

namespace fmfnet {

struct BackboneConfig {
  int pfn_channels = 32;
  /// Output channels and downsampling stride of each neck stage.
  std::vector<int> neck_channels{32, 64};
  std::vector<int> neck_strides{1, 2};
  /// Extra stride-1 conv blocks after the first conv of each stage.
  int layers_per_stage = 1;
  /// Channels of each stage after resampling to the output resolution.
  int upsample_channels = 32;
  int out_channels = 64;
  int output_stride = 2;

  void validate() const;
  /// Product of all stage strides.
  int total_stride() const;
};

/// Per-point linear -> BN -> ReLU, masked max over each pillar, scatter to BEV.
struct PillarFeatureNet {
  Tensor weight;  // [pfn_channels, feature_dim], no bias (BN follows)
  BatchNorm bn;
  int feature_dim = 0;

  static PillarFeatureNet create(int feature_dim, int channels, Rng& rng);
  int channels() const { return static_cast<int>(bn.channels()); }
  void collect(ParamSet& set, const std::string& prefix);
  static std::size_t param_count(int feature_dim, int channels);
};

/// Pseudo-image [1, pfn_channels, H, W]. Cells without pillars are zero.
/// BN statistics cover the valid (non-padding) points only. Voxel inputs are
/// collapsed along z by averaging over all z-bins.
Tensor pillar_feature_net(const PillarTensor& pillars, PillarFeatureNet& params, Mode mode);

struct Neck {
  struct Stage {
    std::vector<ConvBnRelu> blocks;
    ConvBnRelu resample;
  };
  std::vector<Stage> stages;
  ConvBnRelu fuse;  // 1x1 over the concatenated resampled stages
  BackboneConfig cfg;

  static Neck create(int in_channels, const BackboneConfig& cfg, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
  static std::size_t param_count(int in_channels, const BackboneConfig& cfg);
};

/// RPN-style multi-scale neck: [1, C_in, H, W] -> [1, C, H/s_out, W/s_out].
Tensor neck_forward(const Tensor& pseudo_image, Neck& params, Mode mode);

}  // namespace fmfnet
