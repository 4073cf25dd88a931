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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "devisp/autograd.hpp"
#include "devisp/kernels.hpp"

namespace devisp::ag {
namespace {

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<size_t> stride_a, stride_b;  // 0 on broadcast axes
  size_t numel = 0;
};

std::vector<size_t> strides_for(const Shape& padded, const Shape& out) {
  std::vector<size_t> s(out.size(), 0);
  size_t acc = 1;
  for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
    s[i] = padded[i] == 1 && out[i] != 1 ? 0 : acc;
    acc *= static_cast<size_t>(padded[i]);
  }
  return s;
}

Broadcast plan(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  Broadcast p;
  p.out.resize(r);
  for (size_t i = 0; i < r; ++i) {
    require(pa[i] == pb[i] || pa[i] == 1 || pb[i] == 1, "shape",
            "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[i] = std::max(pa[i], pb[i]);
  }
  p.stride_a = strides_for(pa, p.out);
  p.stride_b = strides_for(pb, p.out);
  p.numel = shape_numel(p.out);
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each(const Broadcast& p, F&& f) {
  const int r = static_cast<int>(p.out.size());
  if (r == 0) return;
  const int inner = p.out[r - 1];
  const size_t sa = p.stride_a[r - 1], sb = p.stride_b[r - 1];
  std::vector<int> idx(r, 0);
  size_t ia = 0, ib = 0;
  for (size_t o = 0; o < p.numel; o += inner) {
    for (int j = 0; j < inner; ++j) f(o + j, ia + j * sa, ib + j * sb);
    for (int d = r - 2; d >= 0; --d) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Variable binary(const Variable& a, const Variable& b, Fwd fwd, GradA ga, GradB gb) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i], bv[i]);
    return Variable::from_op(std::move(out), {a, b}, [a, b, ga, gb](const Tensor& g) mutable {
      const Tensor& x = a.value();
      const Tensor& y = b.value();
      if (a.requires_grad()) {
        Tensor& gx = a.grad_buffer();
        for (size_t i = 0; i < g.numel(); ++i) gx[i] += ga(g[i], x[i], y[i]);
      }
      if (b.requires_grad()) {
        Tensor& gy = b.grad_buffer();
        for (size_t i = 0; i < g.numel(); ++i) gy[i] += gb(g[i], x[i], y[i]);
      }
    });
  }
  Broadcast p = plan(av.shape(), bv.shape());
  Tensor out(p.out);
  for_each(p, [&](size_t o, size_t i, size_t j) { out[o] = fwd(av[i], bv[j]); });
  return Variable::from_op(std::move(out), {a, b}, [a, b, ga, gb, p](const Tensor& g) mutable {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (a.requires_grad()) {
      Tensor& gx = a.grad_buffer();
      for_each(p, [&](size_t o, size_t i, size_t j) { gx[i] += ga(g[o], x[i], y[j]); });
    }
    if (b.requires_grad()) {
      Tensor& gy = b.grad_buffer();
      for_each(p, [&](size_t o, size_t i, size_t j) { gy[j] += gb(g[o], x[i], y[j]); });
    }
  });
}

// Elementwise unary op; `df` gets (x, y) and returns dy/dx.
template <class F, class DF>
Variable unary(const Variable& a, F f, DF df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = f(av[i]);
  Tensor saved = out;
  return Variable::from_op(std::move(out), {a}, [a, df, saved](const Tensor& g) mutable {
    const Tensor& x = a.value();
    Tensor& gx = a.grad_buffer();
    for (size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(x[i], saved[i]);
  });
}

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "shape", "axis out of range");
  return axis;
}

// outer × axis × inner decomposition of a shape around one axis.
struct AxisSplit {
  size_t outer = 1, len = 1, inner = 1;
};
AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Variable add(const Variable& a, const Variable& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Variable sub(const Variable& a, const Variable& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Variable mul(const Variable& a, const Variable& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Variable div(const Variable& a, const Variable& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Variable add_scalar(const Variable& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Variable mul_scalar(const Variable& a, double s) {
  return unary(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Variable neg(const Variable& a) { return mul_scalar(a, -1.0); }

Variable exp(const Variable& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Variable log(const Variable& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Variable sqrt(const Variable& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Variable abs(const Variable& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Variable square(const Variable& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Variable relu(const Variable& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Variable gelu(const Variable& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
        return cdf + x * pdf;
      });
}

Variable sigmoid(const Variable& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Variable softplus(const Variable& a) {
  return unary(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ---------------------------------------------------------------------------
// Reductions

Variable sum(const Variable& a) {
  const Tensor& v = a.value();
  double s = 0.0;
  for (size_t i = 0; i < v.numel(); ++i) s += v[i];
  return Variable::from_op(Tensor::scalar(s), {a}, [a](const Tensor& g) mutable {
    Tensor& gx = a.grad_buffer();
    for (size_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
  });
}

Variable mean(const Variable& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Variable sum_axes(const Variable& a, const std::vector<int>& axes) {
  Shape out_shape = a.shape();
  for (int ax : axes) out_shape[norm_axis(ax, a.rank())] = 1;
  Broadcast p = plan(a.shape(), out_shape);  // b indexes the reduced tensor
  const Tensor& v = a.value();
  Tensor out(out_shape);
  for_each(p, [&](size_t o, size_t, size_t j) { out[j] += v[o]; });
  return Variable::from_op(std::move(out), {a}, [a, p](const Tensor& g) mutable {
    Tensor& gx = a.grad_buffer();
    for_each(p, [&](size_t o, size_t, size_t j) { gx[o] += g[j]; });
  });
}

Variable mean_axes(const Variable& a, const std::vector<int>& axes) {
  size_t count = 1;
  for (int ax : axes) count *= a.dim(norm_axis(ax, a.rank()));
  return mul_scalar(sum_axes(a, axes), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Layout

Variable reshape(const Variable& a, const Shape& shape) {
  Tensor out = a.value().reshaped(shape);
  return Variable::from_op(std::move(out), {a}, [a](const Tensor& g) mutable {
    Tensor& gx = a.grad_buffer();
    for (size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

namespace {

// Copies `src` into permuted layout; when `inverse` the roles are swapped so
// the same index walk scatters a gradient back.
void permute_copy(const Tensor& src, const std::vector<int>& perm, Tensor& dst, bool accumulate_back,
                  Tensor* back) {
  const Shape& s = src.shape();
  const int r = static_cast<int>(s.size());
  std::vector<size_t> in_stride(r);
  size_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_stride[i] = acc;
    acc *= s[i];
  }
  Shape out_shape(r);
  std::vector<size_t> step(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = s[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  std::vector<int> idx(r, 0);
  size_t in_off = 0;
  const size_t n = src.numel();
  for (size_t o = 0; o < n; ++o) {
    if (accumulate_back)
      (*back)[in_off] += dst[o];
    else
      dst[o] = src[in_off];
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      in_off += step[d];
      if (idx[d] < out_shape[d]) break;
      in_off -= step[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Variable permute(const Variable& a, const std::vector<int>& perm) {
  require(static_cast<int>(perm.size()) == a.rank(), "shape", "permute rank mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  Tensor out(out_shape);
  permute_copy(a.value(), perm, out, false, nullptr);
  return Variable::from_op(std::move(out), {a}, [a, perm](const Tensor& g) mutable {
    Tensor& gx = a.grad_buffer();
    Tensor gcopy = g;
    permute_copy(a.value(), perm, gcopy, true, &gx);
  });
}

Variable concat(const std::vector<Variable>& parts, int axis) {
  require(!parts.empty(), "shape", "concat of nothing");
  const int r = parts[0].rank();
  axis = norm_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == r, "shape", "concat rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis)
        require(p.dim(i) == out_shape[i], "shape",
                "concat shape mismatch " + shape_str(p.shape()));
    out_shape[axis] += p.dim(axis);
  }
  Tensor out(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  size_t offset = 0;
  std::vector<size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisSplit ps = split_at(p.shape(), axis);
    const size_t block = ps.len * ps.inner;
    for (size_t o = 0; o < ps.outer; ++o)
      std::copy_n(p.value().data() + o * block, block,
                  out.data() + o * os.len * os.inner + offset * os.inner);
    offset += ps.len;
  }
  return Variable::from_op(std::move(out), parts, [parts, offsets, os](const Tensor& g) mutable {
    for (size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      Tensor& gx = parts[k].grad_buffer();
      const size_t len = gx.numel() / (os.outer * os.inner);
      const size_t block = len * os.inner;
      for (size_t o = 0; o < os.outer; ++o) {
        const double* src = g.data() + o * os.len * os.inner + offsets[k] * os.inner;
        double* dst = gx.data() + o * block;
        for (size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
}

Variable slice(const Variable& a, int axis, int start, int length) {
  axis = norm_axis(axis, a.rank());
  require(start >= 0 && length >= 0 && start + length <= a.dim(axis), "shape", "slice out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const AxisSplit s = split_at(a.shape(), axis);
  Tensor out(out_shape);
  const size_t block = static_cast<size_t>(length) * s.inner;
  for (size_t o = 0; o < s.outer; ++o)
    std::copy_n(a.value().data() + o * s.len * s.inner + start * s.inner, block, out.data() + o * block);
  return Variable::from_op(std::move(out), {a}, [a, s, start, block](const Tensor& g) mutable {
    Tensor& gx = a.grad_buffer();
    for (size_t o = 0; o < s.outer; ++o) {
      double* dst = gx.data() + o * s.len * s.inner + start * s.inner;
      const double* src = g.data() + o * block;
      for (size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Variable matmul(const Variable& a, const Variable& b) {
  require(a.rank() >= 2 && b.rank() >= 2, "shape", "matmul needs rank >= 2");
  const int m = a.dim(-2), k = a.dim(-1);
  const int kb = b.dim(-2), n = b.dim(-1);
  require(k == kb, "shape", "matmul inner mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const size_t batch = a.numel() / (static_cast<size_t>(m) * k);
  const bool shared_b = b.rank() == 2;
  if (!shared_b)
    require(b.numel() / (static_cast<size_t>(k) * n) == batch && b.rank() == a.rank(), "shape",
            "matmul batch mismatch");
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  for (size_t i = 0; i < batch; ++i)
    kernels::gemm(m, n, k, a.value().data() + i * m * k,
                  b.value().data() + (shared_b ? 0 : i * static_cast<size_t>(k) * n),
                  out.data() + i * static_cast<size_t>(m) * n, false);
  return Variable::from_op(std::move(out), {a, b}, [a, b, m, n, k, batch, shared_b](const Tensor& g) mutable {
    std::vector<double> tmp;
    if (a.requires_grad()) {
      // ga = g · bᵀ
      Tensor& ga = a.grad_buffer();
      tmp.resize(static_cast<size_t>(k) * n);
      for (size_t i = 0; i < batch; ++i) {
        const double* bi = b.value().data() + (shared_b ? 0 : i * static_cast<size_t>(k) * n);
        kernels::transpose(k, n, bi, tmp.data());
        kernels::gemm(m, k, n, g.data() + i * static_cast<size_t>(m) * n, tmp.data(),
                      ga.data() + i * static_cast<size_t>(m) * k, true);
      }
    }
    if (b.requires_grad()) {
      // gb = aᵀ · g
      Tensor& gb = b.grad_buffer();
      tmp.resize(static_cast<size_t>(m) * k);
      for (size_t i = 0; i < batch; ++i) {
        kernels::transpose(m, k, a.value().data() + i * static_cast<size_t>(m) * k, tmp.data());
        kernels::gemm(k, n, m, tmp.data(), g.data() + i * static_cast<size_t>(m) * n,
                      gb.data() + (shared_b ? 0 : i * static_cast<size_t>(k) * n), true);
      }
    }
  });
}

Variable linear(const Variable& x, const Variable& w, const Variable& bias) {
  require(w.rank() == 2, "shape", "linear weight must be [out, in]");
  const int out_f = w.dim(0), in_f = w.dim(1);
  require(x.dim(-1) == in_f, "shape",
          "linear input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == static_cast<size_t>(out_f), "shape", "linear bias size");
  const int rows = static_cast<int>(x.numel() / in_f);
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  std::vector<double> wt(static_cast<size_t>(in_f) * out_f);
  kernels::transpose(out_f, in_f, w.value().data(), wt.data());
  if (has_bias)
    for (int r = 0; r < rows; ++r)
      std::copy_n(bias.value().data(), out_f, out.data() + static_cast<size_t>(r) * out_f);
  kernels::gemm(rows, out_f, in_f, x.value().data(), wt.data(), out.data(), has_bias);
  std::vector<Variable> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Variable::from_op(std::move(out), inputs, [x, w, bias, rows, in_f, out_f, has_bias](const Tensor& g) mutable {
    if (x.requires_grad())
      kernels::gemm(rows, in_f, out_f, g.data(), w.value().data(), x.grad_buffer().data(), true);
    if (w.requires_grad()) {
      std::vector<double> gt(static_cast<size_t>(rows) * out_f);
      kernels::transpose(rows, out_f, g.data(), gt.data());
      kernels::gemm(out_f, in_f, rows, gt.data(), x.value().data(), w.grad_buffer().data(), true);
    }
    if (has_bias && bias.requires_grad()) {
      Tensor& gb = bias.grad_buffer();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < out_f; ++j) gb[j] += g[static_cast<size_t>(r) * out_f + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

Variable conv2d(const Variable& x, const Variable& w, const Variable& bias, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4, "shape", "conv2d expects NCHW input and OIHW weight");
  require(w.dim(1) == x.dim(1), "shape",
          "conv2d channel mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  require(w.dim(2) == w.dim(3), "shape", "conv2d kernel must be square");
  ConvGeom geom{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad};
  require(geom.out_h() > 0 && geom.out_w() > 0, "shape", "conv2d input too small");
  const bool has_bias = bias.defined();
  Tensor out(Shape{geom.batch, geom.out_ch, geom.out_h(), geom.out_w()});
  kernels::conv2d_forward(geom, x.value().data(), w.value().data(),
                          has_bias ? bias.value().data() : nullptr, out.data());
  std::vector<Variable> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Variable::from_op(std::move(out), inputs, [x, w, bias, geom, has_bias](const Tensor& g) mutable {
    kernels::conv2d_backward(geom, x.value().data(), w.value().data(), g.data(),
                             x.requires_grad() ? x.grad_buffer().data() : nullptr,
                             w.requires_grad() ? w.grad_buffer().data() : nullptr,
                             has_bias && bias.requires_grad() ? bias.grad_buffer().data() : nullptr);
  });
}

Variable depthwise_conv2d(const Variable& x, const Variable& w, const Variable& bias, int stride,
                          int pad) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == 1 && w.dim(0) == x.dim(1), "shape",
          "depthwise_conv2d expects weight [C,1,k,k] matching input channels");
  ConvGeom geom{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(1), w.dim(2), stride, pad};
  require(geom.out_h() > 0 && geom.out_w() > 0, "shape", "depthwise_conv2d input too small");
  const bool has_bias = bias.defined();
  Tensor out(Shape{geom.batch, geom.out_ch, geom.out_h(), geom.out_w()});
  kernels::depthwise_forward(geom, x.value().data(), w.value().data(),
                             has_bias ? bias.value().data() : nullptr, out.data());
  std::vector<Variable> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Variable::from_op(std::move(out), inputs, [x, w, bias, geom, has_bias](const Tensor& g) mutable {
    kernels::depthwise_backward(geom, x.value().data(), w.value().data(), g.data(),
                                x.requires_grad() ? x.grad_buffer().data() : nullptr,
                                w.requires_grad() ? w.grad_buffer().data() : nullptr,
                                has_bias && bias.requires_grad() ? bias.grad_buffer().data() : nullptr);
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers

Variable softmax(const Variable& a) {
  const int len = a.dim(-1);
  const size_t rows = a.numel() / len;
  const Tensor& v = a.value();
  Tensor out(a.shape());
  for (size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * len;
    double* y = out.data() + r * len;
    const double mx = *std::max_element(x, x + len);
    double s = 0.0;
    for (int i = 0; i < len; ++i) s += (y[i] = std::exp(x[i] - mx));
    for (int i = 0; i < len; ++i) y[i] /= s;
  }
  Tensor saved = out;
  return Variable::from_op(std::move(out), {a}, [a, saved, rows, len](const Tensor& g) mutable {
    Tensor& gx = a.grad_buffer();
    for (size_t r = 0; r < rows; ++r) {
      const double* y = saved.data() + r * len;
      const double* gy = g.data() + r * len;
      double dot = 0.0;
      for (int i = 0; i < len; ++i) dot += gy[i] * y[i];
      double* out_g = gx.data() + r * len;
      for (int i = 0; i < len; ++i) out_g[i] += y[i] * (gy[i] - dot);
    }
  });
}

Variable layer_norm(const Variable& x, const Variable& gamma, const Variable& beta, double eps) {
  const int d = x.dim(-1);
  require(gamma.numel() == static_cast<size_t>(d) && beta.numel() == static_cast<size_t>(d), "shape",
          "layer_norm affine size mismatch");
  const size_t rows = x.numel() / d;
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  Tensor out(x.shape());
  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) {
      const double h = (xr[i] - mu) * inv_std[r];
      xhat[r * d + i] = h;
      out[r * d + i] = gv[i] * h + bv[i];
    }
  }
  return Variable::from_op(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat, inv_std, rows, d](const Tensor& g) mutable {
    const double* gv = gamma.value().data();
    if (gamma.requires_grad() || beta.requires_grad()) {
      Tensor* gg = gamma.requires_grad() ? &gamma.grad_buffer() : nullptr;
      Tensor* gb = beta.requires_grad() ? &beta.grad_buffer() : nullptr;
      for (size_t r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) {
          if (gg) (*gg)[i] += g[r * d + i] * xhat[r * d + i];
          if (gb) (*gb)[i] += g[r * d + i];
        }
    }
    if (x.requires_grad()) {
      Tensor& gx = x.grad_buffer();
      std::vector<double> gh(d);
      for (size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (int i = 0; i < d; ++i) {
          gh[i] = g[r * d + i] * gv[i];
          m1 += gh[i];
          m2 += gh[i] * xhat[r * d + i];
        }
        m1 /= d;
        m2 /= d;
        for (int i = 0; i < d; ++i)
          gx[r * d + i] += inv_std[r] * (gh[i] - m1 - xhat[r * d + i] * m2);
      }
    }
  });
}

Variable batch_norm(const Variable& x, const Variable& gamma, const Variable& beta,
                    Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                    double eps) {
  require(x.rank() >= 2, "shape", "batch_norm needs rank >= 2");
  const int c = x.dim(1);
  require(gamma.numel() == static_cast<size_t>(c) && running_mean.numel() == static_cast<size_t>(c) &&
              running_var.numel() == static_cast<size_t>(c),
          "shape", "batch_norm channel mismatch");
  const size_t n = x.dim(0);
  size_t spatial = 1;
  for (int i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  const size_t count = n * spatial;
  std::vector<double> mu(c), inv_std(c);
  const Tensor& xv = x.value();
  if (training) {
    require(count > 1, "shape", "batch_norm training needs more than one value per channel");
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (size_t b = 0; b < n; ++b)
        for (size_t i = 0; i < spatial; ++i) s += xv[(b * c + ch) * spatial + i];
      mu[ch] = s / count;
      double v = 0.0;
      for (size_t b = 0; b < n; ++b)
        for (size_t i = 0; i < spatial; ++i) {
          const double dlt = xv[(b * c + ch) * spatial + i] - mu[ch];
          v += dlt * dlt;
        }
      const double biased = v / count;
      inv_std[ch] = 1.0 / std::sqrt(biased + eps);
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu[ch];
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * v / (count - 1);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (size_t b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (size_t i = 0; i < spatial; ++i) {
        const size_t k = (b * c + ch) * spatial + i;
        xhat[k] = (xv[k] - mu[ch]) * inv_std[ch];
        out[k] = gamma.value()[ch] * xhat[k] + beta.value()[ch];
      }
  return Variable::from_op(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat, inv_std, n, c, spatial, count, training](const Tensor& g) mutable {
    std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
    for (size_t b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < spatial; ++i) {
          const size_t k = (b * c + ch) * spatial + i;
          sum_g[ch] += g[k];
          sum_gh[ch] += g[k] * xhat[k];
        }
    if (gamma.requires_grad()) {
      Tensor& gg = gamma.grad_buffer();
      for (int ch = 0; ch < c; ++ch) gg[ch] += sum_gh[ch];
    }
    if (beta.requires_grad()) {
      Tensor& gb = beta.grad_buffer();
      for (int ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
    }
    if (!x.requires_grad()) return;
    Tensor& gx = x.grad_buffer();
    for (size_t b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        const double gam = gamma.value()[ch];
        for (size_t i = 0; i < spatial; ++i) {
          const size_t k = (b * c + ch) * spatial + i;
          if (training) {
            gx[k] += gam * inv_std[ch] *
                     (g[k] - sum_g[ch] / count - xhat[k] * sum_gh[ch] / count);
          } else {
            gx[k] += gam * inv_std[ch] * g[k];
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Resampling

Variable avg_pool2(const Variable& x) {
  require(x.rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, "shape",
          "avg_pool2 needs NCHW with even spatial dims");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, c, h / 2, w / 2});
  const Tensor& v = x.value();
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx) {
        const size_t base = static_cast<size_t>(p) * h * w;
        out[(static_cast<size_t>(p) * (h / 2) + y) * (w / 2) + xx] =
            0.25 * (v[base + (2 * y) * w + 2 * xx] + v[base + (2 * y) * w + 2 * xx + 1] +
                    v[base + (2 * y + 1) * w + 2 * xx] + v[base + (2 * y + 1) * w + 2 * xx + 1]);
      }
  return Variable::from_op(std::move(out), {x}, [x, n, c, h, w](const Tensor& g) mutable {
    Tensor& gx = x.grad_buffer();
    for (int p = 0; p < n * c; ++p)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          gx[(static_cast<size_t>(p) * h + y) * w + xx] +=
              0.25 * g[(static_cast<size_t>(p) * (h / 2) + y / 2) * (w / 2) + xx / 2];
  });
}

namespace {

// Orthonormal Haar on one 2×2 block. The transform matrix is symmetric and
// orthogonal, so it is its own inverse and its own adjoint.
inline void haar4(double a, double b, double c, double d, double* out) {
  out[0] = 0.5 * (a + b + c + d);
  out[1] = 0.5 * (a - b + c - d);
  out[2] = 0.5 * (a + b - c - d);
  out[3] = 0.5 * (a - b - c + d);
}

void dwt_into(const Tensor& x, Tensor& out, bool accumulate) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int h2 = h / 2, w2 = w / 2;
  double band[4];
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) {
          haar4(x.at(b, ch, 2 * y, 2 * xx), x.at(b, ch, 2 * y, 2 * xx + 1), x.at(b, ch, 2 * y + 1, 2 * xx),
                x.at(b, ch, 2 * y + 1, 2 * xx + 1), band);
          for (int k = 0; k < 4; ++k) {
            double& dst = out.at(b, k * c + ch, y, xx);
            dst = accumulate ? dst + band[k] : band[k];
          }
        }
}

void idwt_into(const Tensor& x, Tensor& out, bool accumulate) {
  const int n = x.dim(0), c = x.dim(1) / 4, h2 = x.dim(2), w2 = x.dim(3);
  double px[4];
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) {
          haar4(x.at(b, ch, y, xx), x.at(b, c + ch, y, xx), x.at(b, 2 * c + ch, y, xx),
                x.at(b, 3 * c + ch, y, xx), px);
          double* dst[4] = {&out.at(b, ch, 2 * y, 2 * xx), &out.at(b, ch, 2 * y, 2 * xx + 1),
                            &out.at(b, ch, 2 * y + 1, 2 * xx), &out.at(b, ch, 2 * y + 1, 2 * xx + 1)};
          for (int k = 0; k < 4; ++k) *dst[k] = accumulate ? *dst[k] + px[k] : px[k];
        }
}

}  // namespace

Variable dwt_haar(const Variable& x) {
  require(x.rank() == 4, "shape", "dwt_haar expects NCHW");
  require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, "shape",
          "dwt_haar needs even spatial dims, got " + shape_str(x.shape()));
  Tensor out(Shape{x.dim(0), 4 * x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  dwt_into(x.value(), out, false);
  return Variable::from_op(std::move(out), {x}, [x](const Tensor& g) mutable {
    idwt_into(g, x.grad_buffer(), true);
  });
}

Variable idwt_haar(const Variable& x) {
  require(x.rank() == 4 && x.dim(1) % 4 == 0, "shape", "idwt_haar expects NCHW with 4k channels");
  Tensor out(Shape{x.dim(0), x.dim(1) / 4, 2 * x.dim(2), 2 * x.dim(3)});
  idwt_into(x.value(), out, false);
  return Variable::from_op(std::move(out), {x}, [x](const Tensor& g) mutable {
    dwt_into(g, x.grad_buffer(), true);
  });
}

Variable depth_to_space(const Variable& x, int r) {
  require(x.rank() == 4 && x.dim(1) % (r * r) == 0, "shape", "depth_to_space channel mismatch");
  const int n = x.dim(0), c = x.dim(1) / (r * r), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, c, h * r, w * r});
  const Tensor& v = x.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              out.at(b, ch, y * r + i, xx * r + j) = v.at(b, ch * r * r + i * r + j, y, xx);
  return Variable::from_op(std::move(out), {x}, [x, n, c, h, w, r](const Tensor& g) mutable {
    Tensor& gx = x.grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < r; ++j)
            for (int y = 0; y < h; ++y)
              for (int xx = 0; xx < w; ++xx)
                gx.at(b, ch * r * r + i * r + j, y, xx) += g.at(b, ch, y * r + i, xx * r + j);
  });
}

}  // namespace devisp::ag
