#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "longiseg/tensor.hpp"

namespace longiseg {

/// One value in the recorded computation graph.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  /// Zero-initialised gradient buffer shaped like value.
  Tensor& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

  /// Scalar value of a single-element tensor.
  double item() const;

 private:
  std::shared_ptr<Node> node_;
};

/// Trainable leaf.
inline Var parameter(Tensor value) { return Var(std::move(value), true); }

/// Value-only copy with no gradient path (stop-gradient).
Var detach(const Var& v);

/// Records an op result. The node only keeps its inputs and backward closure
/// when at least one input requires a gradient and recording is enabled.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// Reverse-mode sweep from a scalar root (seed gradient 1).
void backward(const Var& root);

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace longiseg
