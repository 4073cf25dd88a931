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

#include "devisp/gradsuite.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <memory>

#include "devisp/losses.hpp"
#include "devisp/rng.hpp"

namespace devisp::train {

using ag::Variable;
using Wrt = std::vector<std::pair<std::string, Variable>>;

namespace {

constexpr double kBlockTol = 1e-4;
constexpr double kLinearTol = 1e-8;
constexpr double kFullTol = 1e-3;

// FNV-1a, so block seeds do not depend on the standard library's hash.
uint64_t name_hash(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

Tensor random(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Scalar probe <v, R> with a fixed random R, so every output entry matters.
struct Projector {
  std::map<Shape, Variable> cache;
  Rng rng{99};
  Variable operator()(const Variable& v) {
    auto it = cache.find(v.shape());
    if (it == cache.end()) it = cache.emplace(v.shape(), ag::constant(random(v.shape(), rng))).first;
    return ag::sum(ag::mul(v, it->second));
  }
};

Wrt params_with_prefix(const nn::Network& net, const std::vector<std::string>& prefixes) {
  Wrt out;
  for (const auto& [name, p] : net.params())
    for (const auto& pre : prefixes)
      if (name.rfind(pre, 0) == 0) {
        out.emplace_back(name, p);
        break;
      }
  require(!out.empty(), "value", "no parameters match the requested block");
  return out;
}

struct Case {
  double tol;
  std::function<Variable()> loss;
  Wrt wrt;
};

Case make_case(const std::string& block, const nn::ModelConfig& model, Rng& rng,
               std::shared_ptr<nn::Network>& keep, Projector& proj) {
  auto param = [&](const Shape& s, double lo = -1.0, double hi = 1.0) { return ag::parameter(random(s, rng, lo, hi)); };
  auto net_for = [&](nn::ModelConfig cfg) {
    keep = std::make_shared<nn::Network>(std::move(cfg));
    return keep;
  };

  if (block == "linear") {
    Variable x = param({3, 5}), w = param({4, 5}), b = param({4});
    return {kLinearTol, [=, &proj] { return proj(ag::linear(x, w, b)); }, {{"x", x}, {"w", w}, {"b", b}}};
  }
  if (block == "conv2d") {
    Variable x = param({2, 3, 7, 6}), w = param({4, 3, 3, 3}), b = param({4});
    return {kBlockTol, [=, &proj] { return proj(ag::conv2d(x, w, b, 2, 1)); }, {{"x", x}, {"w", w}, {"b", b}}};
  }
  if (block == "depthwise_conv2d") {
    Variable x = param({2, 3, 6, 6}), w = param({3, 1, 3, 3}), b = param({3});
    return {kBlockTol, [=, &proj] { return proj(ag::depthwise_conv2d(x, w, b, 1, 1)); },
            {{"x", x}, {"w", w}, {"b", b}}};
  }
  if (block == "layer_norm") {
    Variable x = param({2, 3, 6}), g = param({6}), b = param({6});
    return {kBlockTol, [=, &proj] { return proj(ag::layer_norm(x, g, b)); }, {{"x", x}, {"g", g}, {"b", b}}};
  }
  if (block == "batch_norm") {
    Variable x = param({3, 4, 3, 3}), g = param({4}), b = param({4});
    auto rm = std::make_shared<Tensor>(Shape{4}, 0.0);
    auto rv = std::make_shared<Tensor>(Shape{4}, 1.0);
    return {kBlockTol, [=, &proj] { return proj(ag::batch_norm(x, g, b, *rm, *rv, true)); },
            {{"x", x}, {"g", g}, {"b", b}}};
  }
  if (block == "softmax_gelu") {
    Variable x = param({3, 7}, -2, 2);
    return {kBlockTol, [=, &proj] { return proj(ag::softmax(ag::gelu(x))); }, {{"x", x}}};
  }
  if (block == "haar_wavelet") {
    Variable x = param({2, 4, 6, 8});
    return {kBlockTol,
            [=, &proj] { return ag::add(proj(ag::dwt_haar(x)), proj(ag::idwt_haar(ag::mul_scalar(x, 0.5)))); },
            {{"x", x}}};
  }
  if (block == "depth_to_space") {
    Variable x = param({2, 8, 3, 3});
    return {kBlockTol, [=, &proj] { return proj(ag::depth_to_space(ag::sigmoid(x), 2)); }, {{"x", x}}};
  }

  // Network branches.
  if (block == "embedding") {
    auto net = net_for(model);
    const Tensor w = random({3, model.num_devices}, rng, 0.0, 1.0);
    return {kBlockTol, [=, &proj] { return proj(net->embed_device(w)); }, params_with_prefix(*net, {"embed."})};
  }
  if (block == "wb_branch") {
    auto net = net_for(model);
    Variable wb = param({2, 4}, 1.0, 2.5);
    Wrt wrt = params_with_prefix(*net, {"wb."});
    wrt.emplace_back("input.wb", wb);
    return {kBlockTol,
            [=, &proj] {
              auto [s0, s1] = net->wb_branch(wb);
              return ag::add(proj(s0), proj(s1));
            },
            wrt};
  }
  if (block == "illum_branch") {
    nn::ModelConfig cfg = model;
    cfg.pipeline = "learned-wb";
    auto net = net_for(cfg);
    const Tensor full = random({2, 4, 16, 16}, rng, 0.0, 1.0);
    Wrt wrt = params_with_prefix(*net, {"illum."});
    Variable e;
    if (cfg.conditioned) {
      e = param({2, cfg.embed_dim}, -0.5, 0.5);
      wrt.emplace_back("input.e", e);
    }
    return {kBlockTol, [=, &proj] { return proj(net->illum_branch(full, e)); }, wrt};
  }
  if (block == "iso_exp_branch") {
    auto net = net_for(model);
    // ISO 100 maps to 0, the kink of the lift ReLU under a zero bias; stay off it.
    const std::vector<double> iso{200, 800}, exposure{0.01, 0.002};
    return {kBlockTol,
            [=, &proj] {
              auto [a, b] = net->iso_exp_branch(iso, exposure);
              return ag::add(proj(a), proj(b));
            },
            params_with_prefix(*net, {"isoexp."})};
  }
  if (block == "encoder_attention" || block == "decoder_attention") {
    auto net = net_for(model);
    const bool enc = block == "encoder_attention";
    const int c = model.widths[0];
    Variable f = param({2, c, 4, 4});
    const Tensor pos = nn::positional_encoding(c, 4, 4, 1, {{{0, 4}}, {{8, 0}}}, 2);
    Wrt wrt = params_with_prefix(*net, {enc ? "enc0.block0.attn." : "dec0.block0.attn."});
    wrt.emplace_back("input.f", f);
    if (enc) return {kBlockTol, [=, &proj] { return proj(net->encoder_attention(0, f, pos)); }, wrt};
    Variable e;
    if (model.conditioned) {
      e = param({2, model.embed_dim}, -0.5, 0.5);
      wrt.emplace_back("input.e", e);
    }
    return {kBlockTol, [=, &proj] { return proj(net->decoder_attention(0, f, e, pos)); }, wrt};
  }
  if (block == "xca") {
    auto net = net_for(model);
    Variable tokens = param({2, 5, model.xcit.dim});
    Wrt wrt = params_with_prefix(*net, {"xcit.block0.qkv.", "xcit.block0.temperature", "xcit.block0.proj."});
    wrt.emplace_back("input.tokens", tokens);
    return {kBlockTol, [=, &proj] { return proj(net->xca("xcit.block0", tokens)); }, wrt};
  }
  if (block == "global_semantics") {
    nn::ModelConfig cfg = model;
    cfg.features.global_semantics = true;
    auto net = net_for(cfg);
    const Tensor full = random({2, 4, 24, 24}, rng, 0.0, 1.0);
    return {kBlockTol, [=, &proj] { return proj(net->global_semantics(full, nn::Mode::kTrain)); },
            params_with_prefix(*net, {"xcit."})};
  }

  // Losses.
  const Tensor gt = random({2, 3, 16, 16}, rng, 0.0, 1.0);
  Tensor mask(Shape{2, 1, 16, 16}, 1.0);
  for (size_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.8 ? 1.0 : 0.0;
  if (block == "masked_l1") {
    Variable y = param({2, 3, 16, 16}, 0.0, 1.0);
    return {kBlockTol, [=] { return loss::masked_l1(y, gt, mask); }, {{"y", y}}};
  }
  if (block == "masked_perceptual") {
    auto stack = std::make_shared<loss::FeatureStack>();
    Variable y = param({2, 3, 16, 16}, 0.0, 1.0);
    return {kBlockTol, [=] { return loss::masked_perceptual(y, gt, mask, *stack); }, {{"y", y}}};
  }
  if (block == "masked_ssim") {
    Variable y = param({2, 3, 16, 16}, 0.0, 1.0);
    return {kBlockTol, [=] { return loss::masked_ssim_loss(y, gt, mask); }, {{"y", y}}};
  }
  if (block == "total_loss_wb") {
    auto stack = std::make_shared<loss::FeatureStack>();
    Variable y = param({2, 3, 16, 16}, 0.0, 1.0), wb = param({2, 4}, 1.0, 2.0);
    const Tensor wb_gt = random({2, 4}, rng, 1.0, 2.0);
    return {kBlockTol,
            [=] { return loss::total_loss_wb(y, gt, mask, wb, wb_gt, loss::LossWeights{}, *stack).total; },
            {{"y", y}, {"wb", wb}}};
  }
  if (block == "full_forward_loss") {
    auto net = net_for(model);
    auto stack = std::make_shared<loss::FeatureStack>();
    nn::ForwardInput in;
    Variable x = param({2, 4, 16, 16}, 0.0, 1.0);
    in.x = x;
    in.full = random({2, 4, 32, 32}, rng, 0.0, 1.0);
    in.device_weights = Tensor(Shape{2, model.num_devices}, 0.0);
    in.device_weights[0] = 1.0;
    in.device_weights[model.num_devices + model.num_devices - 1] = 1.0;
    in.wb = Tensor(Shape{2, 4}, std::vector<double>{2.0, 1.0, 1.0, 1.6, 1.8, 1.0, 1.0, 1.9});
    in.iso = {200, 1600};
    in.exposure_s = {0.01, 0.004};
    in.origin = {{{0, 16}}, {{16, 0}}};
    const Tensor fgt = random({2, 3, 32, 32}, rng, 0.0, 1.0);
    Tensor fmask(Shape{2, 1, 32, 32}, 1.0);
    for (size_t i = 0; i < fmask.numel(); ++i) fmask[i] = rng.uniform() < 0.9 ? 1.0 : 0.0;
    const Tensor wb_gt = random({2, 4}, rng, 1.0, 2.0);
    Wrt wrt = net->params();
    wrt.emplace_back("input.x", x);
    return {kFullTol,
            [=] {
              const nn::ForwardOutput out = net->forward(in, nn::Mode::kTrain);
              if (net->config().learned_wb())
                return loss::total_loss_wb(out.y, fgt, fmask, out.aux.wb_used, wb_gt, loss::LossWeights{}, *stack)
                    .total;
              return loss::total_loss(out.y, fgt, fmask, loss::LossWeights{}, *stack).total;
            },
            wrt};
  }
  fail("value", "unknown gradient block '" + block + "'");
}

}  // namespace

nlohmann::json GradBlockResult::to_json() const {
  return {{"block", block},     {"max_rel_err", max_rel_err}, {"tolerance", tolerance}, {"worst", worst},
          {"checked", checked}, {"seconds", seconds},         {"pass", pass()}};
}

ag::GradCheckOptions suite_options() {
  ag::GradCheckOptions o;
  o.h = 1e-5;
  o.tau = 1e-5;
  return o;
}

const std::vector<std::string>& grad_blocks() {
  static const std::vector<std::string> blocks{
      "linear",           "conv2d",         "depthwise_conv2d",  "layer_norm",        "batch_norm",
      "softmax_gelu",     "haar_wavelet",   "depth_to_space",    "embedding",         "wb_branch",
      "illum_branch",     "iso_exp_branch", "encoder_attention", "decoder_attention", "xca",
      "global_semantics", "masked_l1",      "masked_perceptual", "masked_ssim",       "total_loss_wb",
      "full_forward_loss"};
  return blocks;
}

GradBlockResult grad_check_block(const std::string& block, const nn::ModelConfig& model,
                                 const ag::GradCheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(opt.seed ^ name_hash(block));
  std::shared_ptr<nn::Network> keep;
  Projector proj;
  Case c = make_case(block, model, rng, keep, proj);
  ag::GradCheckOptions o = opt;
  // The full pass has a few hundred tensors; a handful of entries each keeps
  // it within minutes while still touching every tensor.
  if (block == "full_forward_loss") o.samples_per_tensor = std::min<size_t>(opt.samples_per_tensor, 3);
  const auto r = ag::grad_check(c.loss, c.wrt, o);
  GradBlockResult out;
  out.block = block;
  out.max_rel_err = r.max_rel_err;
  out.tolerance = c.tol;
  out.worst = r.worst;
  out.checked = r.checked;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

std::vector<GradBlockResult> grad_suite(const nn::ModelConfig& model, const std::vector<std::string>& selection,
                                        const ag::GradCheckOptions& opt) {
  std::vector<std::string> blocks = selection;
  if (blocks.empty() || (blocks.size() == 1 && blocks[0] == "all")) blocks = grad_blocks();
  std::vector<GradBlockResult> out;
  for (const auto& b : blocks) out.push_back(grad_check_block(b, model, opt));
  return out;
}

}  // namespace devisp::train
