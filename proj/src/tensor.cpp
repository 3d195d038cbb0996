#include "fmfnet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "fmfnet/errors.hpp"

namespace fmfnet {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

namespace {

thread_local bool g_grad_mode = true;

detail::Node& deref(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw UsageError("operation on an undefined tensor");
  return *n;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_vector(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_vector({}, {value}, requires_grad); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out = from_vector(std::move(shape), std::move(values));
  if (!g_grad_mode) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto& node = *out.node_;
  node.requires_grad = true;
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(t.node_);
  return out;
}

const Shape& Tensor::shape() const { return deref(node_).shape; }

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dimension index out of range for shape " + shape_str(s));
  return s[i];
}

std::size_t Tensor::numel() const { return deref(node_).data.size(); }

std::span<const double> Tensor::data() const { return deref(node_).data; }

std::span<double> Tensor::mutable_data() { return deref(node_).data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for shape " + shape_str(s));
  std::size_t off = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= s[k]) throw IndexError("index out of range for shape " + shape_str(s));
    off = off * s[k] + i;
    ++k;
  }
  return node_->data[off];
}

bool Tensor::requires_grad() const { return deref(node_).requires_grad; }

void Tensor::set_requires_grad(bool value) {
  auto& n = deref(node_);
  if (!n.is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  n.requires_grad = value;
}

bool Tensor::has_grad() const { return !deref(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return deref(node_).grad; }

std::span<double> Tensor::mutable_grad() {
  auto& n = deref(node_);
  n.ensure_grad();
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = deref(node_);
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tensor::backward() const {
  auto& root = deref(node_);
  if (root.data.size() != 1) throw UsageError("backward() requires a scalar loss, got " + shape_str(root.shape));
  if (!root.requires_grad) throw UsageError("loss does not depend on any tensor that requires grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf()) n->backward(OpContext(n));
  }
}

Tensor Tensor::detach() const {
  const auto& n = deref(node_);
  return from_vector(n.shape, n.data, false);
}

std::span<const double> OpContext::grad_output() const { return node_->grad; }
std::span<const double> OpContext::output() const { return node_->data; }
std::size_t OpContext::num_inputs() const { return node_->inputs.size(); }
std::span<const double> OpContext::input(std::size_t i) const { return node_->inputs.at(i)->data; }
const Shape& OpContext::input_shape(std::size_t i) const { return node_->inputs.at(i)->shape; }

bool OpContext::wants_grad(std::size_t i) const {
  const auto& in = node_->inputs.at(i);
  return in && in->requires_grad;
}

std::span<double> OpContext::input_grad(std::size_t i) const {
  auto& in = *node_->inputs.at(i);
  in.ensure_grad();
  return in.grad;
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

}  // namespace fmfnet
