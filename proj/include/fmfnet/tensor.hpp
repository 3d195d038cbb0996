#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fmfnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class OpContext;

/// Reverse-mode rule of one recorded operation. It reads the output gradient
/// and adds into the gradients of the inputs that want one.
using BackwardFn = std::function<void(const OpContext&)>;

/// Handle to a dense row-major double array that may take part in a recorded
/// computation. Copies share storage; use clone() for a deep copy.
///
/// An operation records its inputs only while gradient mode is on and at
/// least one input requires a gradient, so the tape is simply the graph
/// reachable from a loss. Dropping the loss releases the step's graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Builds an operation output. `backward` is kept only when recording.
  static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                            BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// In-place access for parameter updates and test perturbations.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  /// Allocates a zero gradient if needed.
  std::span<double> mutable_grad();
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires a
  /// gradient. Intermediate gradients are recomputed on every call; leaf
  /// gradients accumulate until zero_grad(). Throws UsageError on non-scalars.
  void backward() const;

  /// New leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class OpContext;
};

/// View handed to a BackwardFn.
class OpContext {
 public:
  std::span<const double> grad_output() const;
  std::span<const double> output() const;
  std::size_t num_inputs() const;
  std::span<const double> input(std::size_t i) const;
  const Shape& input_shape(std::size_t i) const;
  bool wants_grad(std::size_t i) const;
  /// Gradient buffer of input i (allocated on first use).
  std::span<double> input_grad(std::size_t i) const;

 private:
  explicit OpContext(detail::Node* node) : node_(node) {}
  detail::Node* node_;
  friend class Tensor;
};

/// Gradient recording switch, per thread.
bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Free-function form of Tensor::backward.
inline void backward(const Tensor& loss) { loss.backward(); }

}  // namespace fmfnet
