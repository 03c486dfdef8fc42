#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "usamnet/errors.hpp"

namespace usam {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Disables graph recording for the lifetime of the guard (inference, metrics).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Dense row-major N-d array with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets a parameter be both a model member and a node of the autograd graph.
/// Use clone() for an independent copy. T is float for training and
/// inference, double for gradient checking.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape)
      if (e == 0) throw ConfigError("tensor extents must be positive, got " + shape_str(shape));
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size())
      throw ConfigError("tensor shape " + shape_str(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  Tensor clone() const { return Tensor(shape(), node_->data); }
  Tensor detach() const { return clone(); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
bool needs_graph(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Builds an output node. The backward closure is attached only when some
// input participates in the graph.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (needs_graph<T>(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) node->parents.push_back(t->node());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

/// Reverse-mode accumulation from a scalar loss. Gradients add into existing
/// grad buffers, so callers zero parameter grads between steps. The graph is
/// released afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  using NodeT = detail::Node<T>;

  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
  for (NodeT* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }
}

template <typename T>
bool same_values(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace usam
