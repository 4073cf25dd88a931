// Copyright 2026 The devisp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "devisp/autograd.hpp"

#include <unordered_set>

namespace devisp::ag {
namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Variable::Variable(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor& Variable::grad_buffer() const {
  if (node_->grad.empty() || !node_->grad.same_shape(node_->value))
    node_->grad = Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

void Variable::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Variable Variable::from_op(Tensor value, const std::vector<Variable>& inputs, BackwardFn fn) {
  Variable out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->backward_fn = std::move(fn);
  for (const auto& in : inputs)
    if (in.requires_grad()) out.node_->inputs.push_back(in.node_);
  return out;
}

void Variable::backward() {
  require(numel() == 1, "shape", "backward() without a seed needs a single-element variable");
  backward(Tensor(shape(), 1.0));
}

void Variable::backward(const Tensor& seed) {
  require(seed.same_shape(value()), "shape", "backward seed shape mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor& root_grad = grad_buffer();
  for (size_t i = 0; i < seed.numel(); ++i) root_grad[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(node->grad);
    // Interior gradients are not needed once propagated.
    node->grad = Tensor();
  }
}

}  // namespace devisp::ag
