#include "fmfnet/layers.hpp"

#include <cmath>

namespace fmfnet {

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : params) p.tensor.zero_grad();
}

Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

Tensor init_bias(std::size_t size, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(size);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_vector({size}, std::move(v), true);
}

Conv2d Conv2d::create(int in_channels, int out_channels, int kernel, int stride, Rng& rng) {
  const auto cin = static_cast<std::size_t>(in_channels), cout = static_cast<std::size_t>(out_channels),
             k = static_cast<std::size_t>(kernel);
  Conv2d c;
  c.weight = init_weight({cout, cin, k, k}, cin * k * k, rng);
  c.bias = init_bias(cout, cin * k * k, rng);
  c.stride = stride;
  c.padding = kernel / 2;
  return c;
}

void Conv2d::collect(ParamSet& set, const std::string& prefix) {
  set.params.push_back({prefix + ".weight", weight});
  set.params.push_back({prefix + ".bias", bias});
}

std::size_t Conv2d::param_count(int in_channels, int out_channels, int kernel) {
  return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel + static_cast<std::size_t>(out_channels);
}

void collect(BatchNorm& bn, ParamSet& set, const std::string& prefix) {
  set.params.push_back({prefix + ".gamma", bn.gamma});
  set.params.push_back({prefix + ".beta", bn.beta});
  set.buffers.push_back({prefix + ".running_mean", &bn.running_mean});
  set.buffers.push_back({prefix + ".running_var", &bn.running_var});
}

ConvBnRelu ConvBnRelu::create(int in_channels, int out_channels, int kernel, int stride, Rng& rng, int upsample) {
  ConvBnRelu b;
  b.conv = Conv2d::create(in_channels, out_channels, kernel, stride, rng);
  b.bn = BatchNorm::create(static_cast<std::size_t>(out_channels));
  b.upsample = upsample;
  return b;
}

Tensor ConvBnRelu::forward(const Tensor& x, Mode mode) {
  const Tensor in = upsample > 1 ? upsample_nearest(x, upsample) : x;
  return relu(batch_norm(conv.forward(in), bn, mode));
}

void ConvBnRelu::collect(ParamSet& set, const std::string& prefix) {
  conv.collect(set, prefix + ".conv");
  fmfnet::collect(bn, set, prefix + ".bn");
}

std::size_t ConvBnRelu::param_count(int in_channels, int out_channels, int kernel) {
  return Conv2d::param_count(in_channels, out_channels, kernel) + 2 * static_cast<std::size_t>(out_channels);
}

}  // namespace fmfnet
