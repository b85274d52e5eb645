#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "gfrrn/tensor.hpp"

namespace gfrrn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Backward closure: reads self.grad and accumulates into self.parents[i]->grad.
using BackwardFn = std::function<void(Node& self)>;

/// One value in the computation graph. Leaves are parameters or inputs.
struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  /// Returns grad, allocating zeros of value's shape on first use.
  Tensor& grad_buffer();
  void zero_grad() { grad = Tensor(); }
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// A leaf that never receives gradients.
  static Var constant(Tensor value);
  /// A leaf that accumulates gradients when requires_grad is set.
  static Var leaf(Tensor value, bool requires_grad);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient after backward(); zeros if nothing reached this node.
  Tensor grad() const;

  Node* get() const { return node_.get(); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds a result node. Parents that do not require grad are still kept so
/// that shapes are available, but no backward closure is recorded when none
/// of them needs a gradient or when grad mode is disabled.
Var make_result(Tensor value, std::vector<Var> parents, BackwardFn backward);

/// Reverse sweep from a scalar root, seeding d(root)/d(root) = 1.
void backward(const Var& root);
/// Reverse sweep with an explicit output cotangent.
void backward(const Var& root, const Tensor& seed);

bool grad_enabled();

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace gfrrn
