// SPDX-License-Identifier: Apache-2.0
#include "protoseg/autograd.hpp"

#include <unordered_set>

#include "protoseg/error.hpp"

namespace protoseg {

namespace {
thread_local bool g_grad_enabled = true;
}

namespace detail {

Tensor& Node::ensure_grad() {
  if (grad.numel() != value.numel() || !(grad.shape() == value.shape())) {
    grad = Tensor::zeros(value.shape());
  }
  return grad;
}

}  // namespace detail

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!has_grad()) return Tensor::zeros(shape());
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var Var::make(Tensor value, std::vector<Var> parents,
              std::function<void(detail::Node&)> backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward = std::move(backward);
  return out;
}

void backward(const Var& root) {
  PROTOSEG_REQUIRE(root.value().numel() == 1, "backward() without seed needs a scalar root");
  backward(root, Tensor::filled(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  PROTOSEG_REQUIRE(root.defined(), "backward() on undefined Var");
  PROTOSEG_REQUIRE(seed.shape() == root.shape(), "backward() seed shape mismatch");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor& g = root.node()->ensure_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.numel() > 0) {
      node->backward(*node);
      // Interior gradients are not needed after propagation.
      node->grad = Tensor();
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

std::size_t parameter_count(const ParameterList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.var.value().numel();
  return total;
}

}  // namespace protoseg
