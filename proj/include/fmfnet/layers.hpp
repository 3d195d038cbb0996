#pragma once

#include <string>
#include <vector>

#include "fmfnet/ops.hpp"
#include "fmfnet/random.hpp"
#include "fmfnet/tensor.hpp"

namespace fmfnet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Non-trainable state that must survive a checkpoint (BN running stats).
struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

struct ParamSet {
  std::vector<NamedTensor> params;
  std::vector<NamedBuffer> buffers;

  std::size_t count() const;
  void zero_grad();
};

/// Uniform He initialization for a weight with the given fan-in.
Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng);
/// Uniform in +-1/sqrt(fan_in).
Tensor init_bias(std::size_t size, std::size_t fan_in, Rng& rng);

struct Conv2d {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;

  static Conv2d create(int in_channels, int out_channels, int kernel, int stride, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(ParamSet& set, const std::string& prefix);
  static std::size_t param_count(int in_channels, int out_channels, int kernel);
};

void collect(BatchNorm& bn, ParamSet& set, const std::string& prefix);

/// Optional nearest upsampling, then conv -> batch norm -> ReLU.
struct ConvBnRelu {
  Conv2d conv;
  BatchNorm bn;
  int upsample = 1;

  static ConvBnRelu create(int in_channels, int out_channels, int kernel, int stride, Rng& rng, int upsample = 1);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(ParamSet& set, const std::string& prefix);
  static std::size_t param_count(int in_channels, int out_channels, int kernel);
};

}  // namespace fmfnet
