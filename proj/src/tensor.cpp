#include "shuffle_former/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace shuffle_former {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

template <typename T>
Graph<T> Graph<T>::trace(const Tensor<T>& root) {
  Graph g;
  if (!root.defined() || !root.requires_grad()) return g;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

template <typename T>
std::size_t Graph<T>::run_backward() const {
  std::size_t visited = 0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(node->grad);
    ++visited;
  }
  return visited;
}

template <typename T>
std::size_t backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw CallError("backward needs a scalar loss, got shape " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw CallError("loss does not depend on any requires-grad tensor");
  auto graph = Graph<T>::trace(loss);
  loss.node()->ensure_grad()[0] += T(1);
  return graph.run_backward();
}

template class Graph<float>;
template class Graph<double>;
template std::size_t backward(const Tensor<float>&);
template std::size_t backward(const Tensor<double>&);

}  // namespace shuffle_former
