#pragma once

#include <atomic>
#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "mumt/common.hpp"

namespace mumt {

// Reverse-mode autodiff over dense row-major tensors. A Tensor is a shared
// handle to a graph node; ops (tensor_ops.hpp) create fresh nodes that point
// back at their inputs, so the recorded chain of primitives *is* the compute
// graph. backward() replays it once, in reverse topological order. Nodes hold
// parent references only (never children), so dropping the loss handle
// releases every intermediate buffer.
//
// Scalar is float for training and double for gradient checking; both are
// instantiated from the same op definitions.

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily; same length as data once present
  bool requires_grad = false;
  bool is_leaf = true;

  const char* op = "";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's completed grad and accumulates into parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  TensorNode() { ++live_nodes(); }
  ~TensorNode() { --live_nodes(); }
  TensorNode(const TensorNode&) = delete;
  TensorNode& operator=(const TensorNode&) = delete;

  // Live-node count; lets tests assert that clearing a graph releases
  // its intermediate buffers.
  static std::atomic<int64_t>& live_nodes() {
    static std::atomic<int64_t> n{0};
    return n;
  }
};

// Thread-local switch: when off, ops do not record the graph (eval mode).
inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_enabled()) { grad_mode_enabled() = false; }
  ~NoGradGuard() { grad_mode_enabled() = prev; }
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(Shape shape, S value, bool requires_grad = false) {
    check_shape(shape);
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(size_t(mumt::numel(t.node_->shape)), value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    check_shape(shape);
    if (int64_t(data.size()) != mumt::numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return int64_t(node_->data.size()); }

  std::span<const S> data() const { return node_->data; }
  std::span<S> data_mut() { return node_->data; }
  S item() const {
    if (node_->data.size() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(node_->shape));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const S> grad() const {
    if (!has_grad()) throw ValueError("tensor has no gradient (backward not run?)");
    return node_->grad;
  }
  std::span<S> grad_mut() {
    if (!has_grad()) throw ValueError("tensor has no gradient (backward not run?)");
    return node_->grad;
  }

  void zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }
  void drop_grad() {
    if (node_) {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  // Leaf copy of the values; never carries graph history.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(node_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = T(node_->data[i]);
    return Tensor<T>::from_data(node_->shape, std::move(out));
  }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

 private:
  static void check_shape(const Shape& s) {
    for (int64_t d : s)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
  }

  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <typename S>
void accumulate_grad(TensorNode<S>& node, const S* src, size_t n) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), S(0));
  S* dst = node.grad.data();
  for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace detail

// Reverse-mode pass from a scalar loss. Each reachable node is visited exactly
// once; repeated calls without zeroing accumulate into leaf grads.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  if (!loss.requires_grad())
    throw ValueError("backward on a constant: loss is not attached to a live graph");

  // Reverse DFS post-order = topological order (node before its parents).
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto* root = loss.node().get();
  if (root->grad.empty()) root->grad.assign(1, S(0));
  root->grad[0] += S(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (!node->backward_fn) continue;
    if (node->grad.empty()) continue;  // unreachable contribution
    node->backward_fn(*node);
    if (!node->is_leaf) {
      // Intermediate grads are consumed exactly once; release eagerly.
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

}  // namespace mumt
