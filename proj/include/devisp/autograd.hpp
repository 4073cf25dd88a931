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

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "devisp/tensor.hpp"

namespace devisp::ag {

/// A tensor that records the operations producing it. Copies share the same
/// node. Leaves created with requires_grad accumulate gradients in grad().
class Variable {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_output)>;

  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  int rank() const { return node_->value.rank(); }
  size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  /// The gradient buffer, allocated as zeros on first access.
  Tensor& grad_buffer() const;
  void zero_grad();

  /// Reverse pass from a single-element variable (seed 1).
  void backward();
  void backward(const Tensor& seed);

  /// Internal: builds an op result. `fn` receives the output gradient.
  static Variable from_op(Tensor value, const std::vector<Variable>& inputs, BackwardFn fn);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward_fn;
  };
  std::shared_ptr<Node> node_;
};

/// Gradient recording is on by default; NoGradGuard disables it for a scope.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline Variable constant(Tensor t) { return Variable(std::move(t), false); }
inline Variable parameter(Tensor t) { return Variable(std::move(t), true); }

// Elementwise, numpy-style broadcasting (shapes right-aligned).
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable div(const Variable& a, const Variable& b);
Variable add_scalar(const Variable& a, double s);
Variable mul_scalar(const Variable& a, double s);
Variable neg(const Variable& a);
Variable exp(const Variable& a);
Variable log(const Variable& a);
Variable sqrt(const Variable& a);
Variable abs(const Variable& a);
Variable square(const Variable& a);
Variable relu(const Variable& a);
Variable gelu(const Variable& a);
Variable sigmoid(const Variable& a);
Variable softplus(const Variable& a);

inline Variable operator+(const Variable& a, const Variable& b) { return add(a, b); }
inline Variable operator-(const Variable& a, const Variable& b) { return sub(a, b); }
inline Variable operator*(const Variable& a, const Variable& b) { return mul(a, b); }
inline Variable operator/(const Variable& a, const Variable& b) { return div(a, b); }
inline Variable operator*(const Variable& a, double s) { return mul_scalar(a, s); }
inline Variable operator*(double s, const Variable& a) { return mul_scalar(a, s); }
inline Variable operator+(const Variable& a, double s) { return add_scalar(a, s); }
inline Variable operator-(const Variable& a) { return neg(a); }

// Reductions. sum/mean return shape [1]; the *_axes variants keep reduced
// dimensions with size 1.
Variable sum(const Variable& a);
Variable mean(const Variable& a);
Variable sum_axes(const Variable& a, const std::vector<int>& axes);
Variable mean_axes(const Variable& a, const std::vector<int>& axes);

// Layout.
Variable reshape(const Variable& a, const Shape& shape);
Variable permute(const Variable& a, const std::vector<int>& perm);
Variable concat(const std::vector<Variable>& parts, int axis);
Variable slice(const Variable& a, int axis, int start, int length);

/// a[..., M, K] · b[..., K, N]; b may also be a plain [K, N] matrix.
Variable matmul(const Variable& a, const Variable& b);
/// x[..., in] · wᵀ + bias, with w laid out [out, in]. `bias` may be undefined.
Variable linear(const Variable& x, const Variable& w, const Variable& bias);

/// NCHW convolution, w laid out [out, in, k, k]. `bias` may be undefined.
Variable conv2d(const Variable& x, const Variable& w, const Variable& bias, int stride, int pad);
/// Per-channel convolution, w laid out [C, 1, k, k].
Variable depthwise_conv2d(const Variable& x, const Variable& w, const Variable& bias, int stride,
                          int pad);

Variable softmax(const Variable& a);  // over the last axis
Variable layer_norm(const Variable& x, const Variable& gamma, const Variable& beta,
                    double eps = 1e-5);  // over the last axis

/// Batch normalization of NCHW (or N×C via rank-2) input over all non-channel
/// axes. In training mode the batch statistics are used and the running
/// statistics are updated in place (momentum, unbiased variance); otherwise
/// the running statistics normalize and are left untouched.
Variable batch_norm(const Variable& x, const Variable& gamma, const Variable& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

Variable avg_pool2(const Variable& x);
/// Orthonormal Haar analysis: [N,C,H,W] -> [N,4C,H/2,W/2], bands LL,HL,LH,HH
/// stacked as band*C + c.
Variable dwt_haar(const Variable& x);
Variable idwt_haar(const Variable& x);
/// [N, C·r², H, W] -> [N, C, H·r, W·r] (pixel shuffle).
Variable depth_to_space(const Variable& x, int r);

}  // namespace devisp::ag
