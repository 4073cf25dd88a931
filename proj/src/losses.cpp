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

#include "devisp/losses.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "devisp/color.hpp"
#include "devisp/error.hpp"
#include "devisp/rng.hpp"

namespace devisp::loss {
namespace {

void check_pair(const Shape& y, const Tensor& gt, const Tensor& m) {
  require(y.size() == 4, "shape", "loss input must be NCHW, got " + shape_str(y));
  require(gt.shape() == y, "shape", "prediction " + shape_str(y) + " vs target " + shape_str(gt.shape()));
  require(m.shape() == Shape{y[0], 1, y[2], y[3]}, "shape",
          "mask must be [N,1,H,W], got " + shape_str(m.shape()));
}

double tensor_sum(const Tensor& t) {
  double s = 0;
  for (double v : t.vec()) s += v;
  return s;
}

// Valid-mode 1-D correlation along `axis`: out[.., l, ..] = Σ_t g[t] x[.., l+t, ..].
Variable correlate_valid(const Variable& x, const std::vector<double>& g, int axis) {
  const Shape& s = x.shape();
  const int k = static_cast<int>(g.size());
  const int len = s[axis], out_len = len - k + 1;
  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = out_len;
  Tensor out(os);
  const Tensor& v = x.value();
#pragma omp parallel for schedule(static)
  for (long o = 0; o < static_cast<long>(outer); ++o)
    for (int l = 0; l < out_len; ++l) {
      double* dst = out.data() + (o * out_len + l) * inner;
      for (int t = 0; t < k; ++t) {
        const double* src = v.data() + (o * len + l + t) * inner;
        for (size_t i = 0; i < inner; ++i) dst[i] += g[t] * src[i];
      }
    }
  return Variable::from_op(std::move(out), {x}, [x, g, k, len, out_len, outer, inner](const Tensor& go) {
    Tensor& gx = x.grad_buffer();
#pragma omp parallel for schedule(static)
    for (long o = 0; o < static_cast<long>(outer); ++o)
      for (int l = 0; l < out_len; ++l) {
        const double* src = go.data() + (o * out_len + l) * inner;
        for (int t = 0; t < k; ++t) {
          double* dst = gx.data() + (o * len + l + t) * inner;
          for (size_t i = 0; i < inner; ++i) dst[i] += g[t] * src[i];
        }
      }
  });
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  double total = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  return g;
}

Variable blur(const Variable& x, const std::vector<double>& g) {
  return correlate_valid(correlate_valid(x, g, 2), g, 3);
}

// 2×2 min pooling: a coarse pixel is valid only if all four children are.
Tensor min_pool2(const Tensor& m) {
  const int n = m.dim(0), c = m.dim(1), h = m.dim(2) / 2, w = m.dim(3) / 2;
  Tensor out(Shape{n, c, h, w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out.at(b, ch, y, x) = std::min({m.at(b, ch, 2 * y, 2 * x), m.at(b, ch, 2 * y, 2 * x + 1),
                                          m.at(b, ch, 2 * y + 1, 2 * x), m.at(b, ch, 2 * y + 1, 2 * x + 1)});
  return out;
}

// Σ m·|a − b| / (C·Σm) with m broadcast over channels.
Variable masked_mean_abs(const Variable& a, const Variable& b, const Tensor& m) {
  const double msum = tensor_sum(m);
  const double denom = msum > 0 ? a.dim(1) * msum : 1.0;
  return ag::mul_scalar(ag::sum(ag::abs(a - b) * ag::constant(m)), 1.0 / denom);
}

Tensor crop_mask(const Tensor& m, int border) {
  const int n = m.dim(0), h = m.dim(2) - 2 * border, w = m.dim(3) - 2 * border;
  Tensor out(Shape{n, 1, h, w});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(b, 0, y, x) = m.at(b, 0, y + border, x + border);
  return out;
}

Tensor batch1(const Tensor& t) {
  require(t.rank() == 3, "shape", "metric input must be [C,H,W], got " + shape_str(t.shape()));
  return t.reshaped(Shape{1, t.dim(0), t.dim(1), t.dim(2)});
}

// Full-frame mask when `mask` is empty; otherwise validated [H,W] -> [1,1,H,W].
Tensor metric_mask(const Tensor& y, const Tensor& mask) {
  if (mask.empty()) return Tensor(Shape{1, 1, y.dim(1), y.dim(2)}, 1.0);
  require(mask.shape() == Shape{y.dim(1), y.dim(2)}, "shape",
          "metric mask must be [H,W], got " + shape_str(mask.shape()));
  return mask.reshaped(Shape{1, 1, y.dim(1), y.dim(2)});
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_l1, lambda_vgg, lambda_ssim, lambda_illu})
    require(std::isfinite(v) && v >= 0, "value", "loss weights must be finite and non-negative");
}

json LossWeights::to_json() const {
  return {{"lambda_l1", lambda_l1}, {"lambda_vgg", lambda_vgg}, {"lambda_ssim", lambda_ssim},
          {"lambda_illu", lambda_illu}};
}

LossWeights LossWeights::from_json(const json& j) {
  LossWeights w;
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda_l1") w.lambda_l1 = value.get<double>();
    else if (key == "lambda_vgg") w.lambda_vgg = value.get<double>();
    else if (key == "lambda_ssim") w.lambda_ssim = value.get<double>();
    else if (key == "lambda_illu") w.lambda_illu = value.get<double>();
    else fail("config", "unknown loss weight '" + key + "'");
  }
  w.validate();
  return w;
}

Variable masked_l1(const Variable& y, const Tensor& gt, const Tensor& m) {
  check_pair(y.shape(), gt, m);
  return masked_mean_abs(y, ag::constant(gt), m);
}

FeatureStack::FeatureStack(uint64_t seed) : seed_(seed) {
  Rng rng(seed);
  const int widths[] = {3, 8, 16, 32};
  for (int s = 0; s < 3; ++s) {
    const int in = widths[s], out = widths[s + 1];
    Tensor w(Shape{out, in, 3, 3});
    const double stddev = std::sqrt(2.0 / (in * 9));
    for (double& v : w.vec()) v = rng.normal(0.0, stddev);
    weights_.push_back(ag::constant(std::move(w)));
    biases_.push_back(ag::constant(Tensor(Shape{out}, 0.0)));
  }
}

std::vector<Variable> FeatureStack::features(const Variable& x) const {
  require(x.rank() == 4 && x.dim(1) == 3, "shape", "feature stack expects [N,3,H,W]");
  require(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0, "shape",
          "feature stack needs spatial dims divisible by 4, got " + shape_str(x.shape()));
  std::vector<Variable> out;
  Variable h = x;
  for (size_t s = 0; s < weights_.size(); ++s) {
    if (s > 0) h = ag::avg_pool2(h);
    h = ag::gelu(ag::conv2d(h, weights_[s], biases_[s], 1, 1));
    out.push_back(h);
  }
  return out;
}

Variable masked_perceptual(const Variable& y, const Tensor& gt, const Tensor& m, const FeatureStack& stack) {
  check_pair(y.shape(), gt, m);
  std::vector<Variable> fy = stack.features(y);
  std::vector<Variable> fg;
  {
    ag::NoGradGuard guard;
    fg = stack.features(ag::constant(gt));
  }
  Tensor ms = m;
  Variable total;
  for (size_t s = 0; s < fy.size(); ++s) {
    if (s > 0) ms = min_pool2(ms);
    Variable term = masked_mean_abs(fy[s], fg[s], ms);
    total = total.defined() ? total + term : term;
  }
  return ag::mul_scalar(total, 1.0 / fy.size());
}

Variable ssim_map(const Variable& y, const Variable& gt, const SsimParams& p) {
  require(y.rank() == 4 && y.shape() == gt.shape(), "shape", "ssim needs two NCHW tensors of equal shape");
  require(y.dim(2) >= p.window && y.dim(3) >= p.window, "shape",
          "image " + shape_str(y.shape()) + " is smaller than the " + std::to_string(p.window) + "px SSIM window");
  const std::vector<double> g = gaussian_window(p.window, p.sigma);
  const double c1 = (p.k1 * p.range) * (p.k1 * p.range), c2 = (p.k2 * p.range) * (p.k2 * p.range);
  Variable mu_x = blur(y, g), mu_y = blur(gt, g);
  Variable mu_xx = mu_x * mu_x, mu_yy = mu_y * mu_y, mu_xy = mu_x * mu_y;
  Variable s_xx = blur(y * y, g) - mu_xx;
  Variable s_yy = blur(gt * gt, g) - mu_yy;
  Variable s_xy = blur(y * gt, g) - mu_xy;
  Variable num = (2.0 * mu_xy + c1) * (2.0 * s_xy + c2);
  Variable den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2);
  return num / den;
}

double ssim(const Tensor& y, const Tensor& gt, const SsimParams& p) {
  ag::NoGradGuard guard;
  const Tensor map = ssim_map(ag::constant(y), ag::constant(gt), p).value();
  return tensor_sum(map) / map.numel();
}

Variable masked_ssim_loss(const Variable& y, const Tensor& gt, const Tensor& m, const SsimParams& p) {
  check_pair(y.shape(), gt, m);
  Variable map = ssim_map(y, ag::constant(gt), p);
  const Tensor mc = crop_mask(m, (p.window - 1) / 2);
  const double msum = tensor_sum(mc);
  if (msum == 0) return ag::mul_scalar(ag::sum(map), 0.0);
  // mean of m·(1 − map) = (C·Σm − Σ m·map) / (C·Σm)
  const double denom = y.dim(1) * msum;
  return ag::add_scalar(ag::mul_scalar(ag::sum(map * ag::constant(mc)), -1.0 / denom), 1.0);
}

LossTerms total_loss(const Variable& y, const Tensor& gt, const Tensor& m, const LossWeights& w,
                     const FeatureStack& stack) {
  w.validate();
  LossTerms t;
  Variable l1 = masked_l1(y, gt, m);
  t.l1 = l1.value()[0];
  t.total = ag::mul_scalar(l1, w.lambda_l1);
  if (w.lambda_vgg > 0) {
    Variable vgg = masked_perceptual(y, gt, m, stack);
    t.perceptual = vgg.value()[0];
    t.total = t.total + ag::mul_scalar(vgg, w.lambda_vgg);
  }
  if (w.lambda_ssim > 0) {
    Variable s = masked_ssim_loss(y, gt, m);
    t.ssim = s.value()[0];
    t.total = t.total + ag::mul_scalar(s, w.lambda_ssim);
  }
  return t;
}

LossTerms total_loss_wb(const Variable& y, const Tensor& gt, const Tensor& m, const Variable& wb_pred,
                        const Tensor& wb_gt, const LossWeights& w, const FeatureStack& stack) {
  require(wb_pred.rank() == 2 && wb_pred.dim(1) == 4 && wb_pred.dim(0) == y.dim(0), "shape",
          "white-balance prediction must be [N,4], got " + shape_str(wb_pred.shape()));
  require(wb_gt.shape() == wb_pred.shape(), "shape", "white-balance target shape mismatch");
  LossTerms t = total_loss(y, gt, m, w, stack);
  Variable illu = ag::mul_scalar(ag::sum(ag::abs(wb_pred - ag::constant(wb_gt))), 1.0 / wb_pred.dim(0));
  t.illu = illu.value()[0];
  t.total = t.total + ag::mul_scalar(illu, w.lambda_illu);
  return t;
}

double psnr(const Tensor& y, const Tensor& gt, const Tensor& mask) {
  require(y.rank() == 3 && y.shape() == gt.shape(), "shape", "psnr needs two [C,H,W] tensors of equal shape");
  const Tensor m = metric_mask(y, mask);
  const int c = y.dim(0);
  const size_t plane = static_cast<size_t>(y.dim(1)) * y.dim(2);
  double se = 0, count = 0;
  for (size_t i = 0; i < plane; ++i) {
    if (m[i] == 0) continue;
    for (int ch = 0; ch < c; ++ch) {
      const double d = y[ch * plane + i] - gt[ch * plane + i];
      se += d * d;
    }
    count += c;
  }
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  const double mse = se / count;
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double masked_ssim(const Tensor& y, const Tensor& gt, const Tensor& mask, const SsimParams& p) {
  require(y.rank() == 3 && y.shape() == gt.shape(), "shape", "ssim needs two [C,H,W] tensors of equal shape");
  const Tensor m = metric_mask(y, mask);
  ag::NoGradGuard guard;
  const Tensor map = ssim_map(ag::constant(batch1(y)), ag::constant(batch1(gt)), p).value();
  const Tensor mc = crop_mask(m, (p.window - 1) / 2);
  const size_t plane = mc.numel();
  double s = 0, count = 0;
  for (size_t i = 0; i < plane; ++i) {
    if (mc[i] == 0) continue;
    for (int ch = 0; ch < y.dim(0); ++ch) s += map[ch * plane + i];
    count += y.dim(0);
  }
  return count > 0 ? s / count : std::numeric_limits<double>::quiet_NaN();
}

double delta_e(const Tensor& y, const Tensor& gt, const Tensor& mask) {
  require(y.rank() == 3 && y.dim(0) == 3 && y.shape() == gt.shape(), "shape",
          "delta_e needs two [3,H,W] tensors of equal shape");
  const Tensor m = metric_mask(y, mask);
  const size_t plane = static_cast<size_t>(y.dim(1)) * y.dim(2);
  double s = 0;
  long count = 0;
#pragma omp parallel for reduction(+ : s, count) schedule(static)
  for (long i = 0; i < static_cast<long>(plane); ++i) {
    if (m[i] == 0) continue;
    const color::Vec3 a{y[i], y[plane + i], y[2 * plane + i]};
    const color::Vec3 b{gt[i], gt[plane + i], gt[2 * plane + i]};
    s += color::ciede2000(color::srgb_to_lab(a), color::srgb_to_lab(b));
    ++count;
  }
  return count > 0 ? s / count : std::numeric_limits<double>::quiet_NaN();
}

json metric_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return nullptr;
  return v;
}

void MetricReport::add(int device, double psnr_db, double ssim_value, double de) {
  // Running means; an inf PSNR keeps the device mean at inf.
  DeviceMetrics& d = devices[device];
  const double n = d.images;
  d.psnr = (d.psnr * n + psnr_db) / (n + 1);
  if (std::isinf(psnr_db)) d.psnr = psnr_db;
  d.ssim = (d.ssim * n + ssim_value) / (n + 1);
  d.delta_e = (d.delta_e * n + de) / (n + 1);
  d.images += 1;
}

double MetricReport::mean_psnr() const {
  if (devices.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (const auto& [id, d] : devices) s += d.psnr;
  return s / devices.size();
}

json MetricReport::to_json() const {
  json devs = json::object();
  for (const auto& [id, d] : devices)
    devs[std::to_string(id)] = {{"psnr", metric_to_json(d.psnr)},
                                {"delta_e", metric_to_json(d.delta_e)},
                                {"ssim", metric_to_json(d.ssim)},
                                {"images", d.images}};
  return {{"devices", devs}, {"mean_psnr", metric_to_json(mean_psnr())}, {"missing", missing}};
}

std::string MetricReport::to_table() const {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-8s %10s %10s %10s %7s\n", "device", "PSNR(up)", "dE(down)", "SSIM(up)",
                "images");
  os << line;
  auto fmt = [](double v, int prec) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    if (std::isnan(v)) return std::string("nan");
    char b[32];
    std::snprintf(b, sizeof b, "%.*f", prec, v);
    return std::string(b);
  };
  for (const auto& [id, d] : devices) {
    std::snprintf(line, sizeof line, "%-8d %10s %10s %10s %7d\n", id, fmt(d.psnr, 2).c_str(),
                  fmt(d.delta_e, 3).c_str(), fmt(d.ssim, 4).c_str(), d.images);
    os << line;
  }
  for (const auto& m : missing) os << "missing: " << m << "\n";
  return os.str();
}

}  // namespace devisp::loss
