// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with tape-free reverse-mode differentiation.  Every tensor
// owns a node; nodes produced by differentiable operations keep references
// to their inputs and a closure that pushes the node's gradient back to
// them.  backward() orders the reachable nodes topologically and runs the
// closures once each.
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lslm/errors.hpp"

namespace lslm {

using Shape = std::vector<std::int64_t>;

/// 64-byte aligned allocation.  Vectorized kernels peel unaligned heads, so
/// fixing the base alignment keeps float rounding independent of where the
/// heap happens to place a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Buffer<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() : node_(std::make_shared<Node<T>>()) {}
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
    return from_buffer(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }

  static Tensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_buffer(std::move(shape), Buffer<T>(static_cast<std::size_t>(n), fill), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t dim(int i) const {
    const int r = static_cast<int>(rank());
    return node_->shape.at(static_cast<std::size_t>(i < 0 ? r + i : i));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  /// Writable view; only leaves may be mutated (optimizer updates, init).
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw Error("tensor: cannot mutate a non-leaf value");
    return node_->value;
  }
  const Buffer<T>& values() const { return node_->value; }
  std::vector<T> to_vector() const { return {node_->value.begin(), node_->value.end()}; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  /// Gradient buffer; zeros if no gradient has arrived yet.
  std::vector<T> grad() const {
    if (has_grad()) return {node_->grad.begin(), node_->grad.end()};
    return std::vector<T>(node_->value.size(), T(0));
  }
  std::span<const T> grad_view() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  /// A new leaf holding a copy of this tensor's values (no graph history).
  Tensor detach() const { return from_buffer(shape(), node_->value, false); }
  Tensor clone(bool requires_grad) const { return from_buffer(shape(), node_->value, requires_grad); }

  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  NodePtr node_;
};

namespace detail {

/// Creates the result node of an operation.  The node joins the graph only
/// when recording is on and some operand requires gradients.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  if (grad_enabled()) {
    for (const auto& p : parents) any = any || p->requires_grad;
  }
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

}  // namespace detail

/// Topologically ordered view of the nodes reachable from a root.
template <class T>
class ComputeGraph {
 public:
  explicit ComputeGraph(const Tensor<T>& root) {
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!root.requires_grad()) return;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(n);
        stack.pop_back();
      }
    }
  }

  /// Inputs come before the nodes that consume them; the root is last.
  const std::vector<Node<T>*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires
/// gradients.  Intermediate gradients are recomputed from scratch on each
/// call so repeated calls add exactly one more copy to the leaves.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  ComputeGraph<T> graph(loss);
  const auto& order = graph.nodes();
  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward_fn(*n);
  }
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace lslm
