// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "protoseg/tensor.hpp"

namespace protoseg {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

}  // namespace detail

/// Handle to a value in the computation graph. Copies share the node.
///
/// Leaves created with requires_grad act as trainable parameters: gradients
/// accumulate into them across backward() calls until zero_grad().
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  /// Mutable access for optimizers and checkpoint loading. Do not mutate
  /// values that feed a live graph.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.numel() > 0; }
  /// Accumulated gradient; zeros when nothing has been accumulated.
  Tensor grad() const;
  void zero_grad();

  bool defined() const { return static_cast<bool>(node_); }
  bool same_node(const Var& other) const { return node_ == other.node_; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  /// Builds an interior node. `backward` is dropped when no parent needs grad
  /// or when a NoGradGuard is active.
  static Var make(Tensor value, std::vector<Var> parents,
                  std::function<void(detail::Node&)> backward);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
void backward(const Var& root);

/// Runs reverse-mode accumulation from `root` with an explicit seed.
void backward(const Var& root, const Tensor& seed);

/// Disables graph recording on the current thread while alive.
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

/// Named trainable leaf.
struct Parameter {
  std::string name;
  Var var;
};

using ParameterList = std::vector<Parameter>;

std::size_t parameter_count(const ParameterList& params);

}  // namespace protoseg
