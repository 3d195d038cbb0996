#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fmfnet/config.hpp"
#include "fmfnet/tensor.hpp"

namespace fmfnet {

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_error < tolerance; }
};

/// |a - n| / max(|a|, |n|, 1e-3).
double gradient_error(double analytic, double numeric);

/// Central differences of the scalar `loss` with respect to every element of
/// every input (or a seeded subset of `max_per_input` elements per input
/// when nonzero), compared against backward().
GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                const std::vector<Tensor>& inputs, double tolerance, double eps = 1e-6,
                                std::size_t max_per_input = 0, std::uint64_t seed = 0);

/// Every differentiable op, the head losses and the FMF block, each at 1e-5.
std::vector<GradCheckResult> op_gradcheck_suite(std::uint64_t seed = 7);

/// Model small enough for an exhaustive parameter sweep (< 5k parameters).
ModelConfig tiny_model_config();

/// Total loss of the tiny model on a frame pair, all parameters, at 1e-4.
GradCheckResult model_gradcheck(std::uint64_t seed = 7);

}  // namespace fmfnet
