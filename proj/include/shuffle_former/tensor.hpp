#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shuffle_former/errors.hpp"

namespace shuffle_former {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Row-major strides: the linear index of coordinate (i0, ..., ik) is
// sum_j i_j * stride_j with stride_k = 1 and stride_j = stride_{j+1} * shape_{j+1}.
Shape row_major_strides(const Shape& shape);

template <typename T>
struct DTypeName;
template <>
struct DTypeName<float> {
  static constexpr const char* value = "float32";
};
template <>
struct DTypeName<double> {
  static constexpr const char* value = "float64";
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(const std::vector<T>&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major array with optional gradient tracking.
//
// A Tensor is a reference-counted handle: copies alias the same storage and
// graph node. Use clone() or detach() for an independent copy. Results of
// operations record their parents (and hence a backward closure) only when
// at least one input requires grad, so tensors built from frozen inputs
// carry no graph.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value),
                     requires_grad);
  }
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // In-place access for initialization, optimizers and probes. Writing
  // through this after the tensor fed a recorded graph invalidates that graph.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (node_->data.size() != 1) throw CallError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::int64_t linear) const { return node_->data.at(static_cast<std::size_t>(linear)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const { return from_data(shape(), node_->data, false); }
  Tensor clone() const { return from_data(shape(), node_->data, requires_grad()); }

  const void* id() const { return node_.get(); }
  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

// Topologically ordered view of the nodes reachable from a root through
// requires-grad edges. Built fresh for each backward pass.
template <typename T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root);

  // Replays adjoints from the root (which must hold a seeded grad).
  // Returns the number of nodes whose backward closure ran.
  std::size_t run_backward() const;

  std::size_t node_count() const { return order_.size(); }

 private:
  std::vector<detail::Node<T>*> order_;  // parents before children
};

// Reverse-mode differentiation of a scalar loss. Gradients accumulate into
// every requires-grad tensor that contributed to the loss.
template <typename T>
std::size_t backward(const Tensor<T>& loss);

namespace detail {

// Builds the result of an operation. The backward closure is kept only if
// some parent requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(const std::vector<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool track = false;
  for (const auto& p : parents) track = track || p->requires_grad;
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace shuffle_former
