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

#include "devisp/nnisp.hpp"

#include <cmath>
#include <functional>

#include "devisp/error.hpp"
#include "devisp/rng.hpp"

namespace devisp::nn {
namespace {

using ag::constant;

// softplus⁻¹(1): biases that make a softplus output start at 1.
const double kSoftplusInvOne = std::log(std::expm1(1.0));

constexpr double kModGain = 0.1;     // weight gain of modulation projections
constexpr double kLayerScale = 0.1;  // initial residual scale in the attention blocks
// Last conv of every residual branch and the output head start small so the
// un-normalized stack keeps unit-scale activations and a mid-grey output.
constexpr double kResidualGain = 0.1;

using InitFn = std::function<void(Tensor&, Rng&)>;

InitFn he(int fan_in, double gain = 1.0) {
  return [fan_in, gain](Tensor& t, Rng& rng) {
    const double sd = gain * std::sqrt(2.0 / fan_in);
    for (double& v : t.vec()) v = rng.normal(0.0, sd);
  };
}
InitFn normal(double sd) {
  return [sd](Tensor& t, Rng& rng) {
    for (double& v : t.vec()) v = rng.normal(0.0, sd);
  };
}
InitFn fill(double value) {
  return [value](Tensor& t, Rng&) { t.fill(value); };
}

struct Decl {
  ParamSpec spec;
  InitFn init;
};

// Collects parameter declarations; shared by param_specs and Network.
class Registry {
 public:
  void add(std::string name, Shape shape, InitFn init) {
    decls.push_back({{std::move(name), std::move(shape)}, std::move(init)});
  }
  // Modulation projections start near identity: small weights, fixed bias.
  void linear(const std::string& name, int in, int out, double gain = 1.0, double bias = 0.0) {
    add(name + ".w", {out, in}, he(in, gain));
    add(name + ".b", {out}, fill(bias));
  }
  void conv(const std::string& name, int in, int out, int k, double gain = 1.0) {
    add(name + ".w", {out, in, k, k}, he(in * k * k, gain));
    add(name + ".b", {out}, fill(0.0));
  }
  void depthwise(const std::string& name, int ch, int k) {
    add(name + ".w", {ch, 1, k, k}, he(k * k));
    add(name + ".b", {ch}, fill(0.0));
  }
  void norm(const std::string& name, int dim) {
    add(name + ".g", {dim}, fill(1.0));
    add(name + ".b", {dim}, fill(0.0));
  }
  std::vector<Decl> decls;
  std::vector<std::pair<std::string, int>> batch_norms;  // prefix, channels
};


void declare_attention(Registry& r, const std::string& pre, int c, const ModelConfig& cfg, bool encoder) {
  r.norm(pre + ".ln", c);
  r.linear(pre + ".k", c, c);
  r.linear(pre + ".v", c, c);
  if (encoder || !cfg.conditioned) {
    r.add(pre + ".query", {c}, normal(1.0 / std::sqrt(static_cast<double>(c))));
  } else {
    r.linear(pre + ".query", cfg.embed_dim, c);
  }
  r.linear(pre + ".tail", c, c);
  r.norm(pre + ".tail_ln", c);
  r.add(pre + ".gamma_s", {c}, fill(kLayerScale));
  r.add(pre + ".gamma_t", {c}, fill(kLayerScale));
}

void declare_blocks(Registry& r, const std::string& pre, int c, const ModelConfig& cfg, bool encoder) {
  for (int j = 0; j < cfg.res_attn_blocks_per_level; ++j) {
    const std::string b = pre + ".block" + std::to_string(j);
    r.conv(b + ".res.conv0", c, c, 3);
    r.conv(b + ".res.conv1", c, c, 3, kResidualGain);
    if (cfg.features.attention) declare_attention(r, b + ".attn", c, cfg, encoder);
  }
}

void declare_xcit(Registry& r, const ModelConfig& cfg) {
  const XcitConfig& x = cfg.xcit;
  const int d = x.dim, hid = x.dim * x.mlp_ratio;
  r.linear("xcit.patch_embed", 4 * x.patch * x.patch, d);
  r.add("xcit.cls", {d}, normal(0.02));
  for (int i = 0; i < x.blocks; ++i) {
    const std::string b = "xcit.block" + std::to_string(i);
    r.norm(b + ".ln1", d);
    r.linear(b + ".qkv", d, 3 * d);
    r.add(b + ".temperature", {x.heads}, fill(1.0));
    r.linear(b + ".proj", d, d);
    r.add(b + ".gamma1", {d}, fill(kLayerScale));
    r.norm(b + ".ln3", d);
    r.depthwise(b + ".lpi.conv0", d, 3);
    r.norm(b + ".lpi.bn", d);
    r.batch_norms.emplace_back(b + ".lpi.bn", d);
    r.depthwise(b + ".lpi.conv1", d, 3);
    r.add(b + ".gamma3", {d}, fill(kLayerScale));
    r.norm(b + ".ln2", d);
    r.linear(b + ".mlp.fc0", d, hid);
    r.linear(b + ".mlp.fc1", hid, d);
    r.add(b + ".gamma2", {d}, fill(kLayerScale));
  }
  for (int i = 0; i < x.class_blocks; ++i) {
    const std::string b = "xcit.class" + std::to_string(i);
    r.norm(b + ".ln1", d);
    r.linear(b + ".q", d, d);
    r.linear(b + ".k", d, d);
    r.linear(b + ".v", d, d);
    r.linear(b + ".proj", d, d);
    r.add(b + ".gamma1", {d}, fill(kLayerScale));
    r.norm(b + ".ln2", d);
    r.linear(b + ".mlp.fc0", d, hid);
    r.linear(b + ".mlp.fc1", hid, d);
    r.add(b + ".gamma2", {d}, fill(kLayerScale));
  }
  r.norm("xcit.norm", d);
  r.linear("xcit.out", d, cfg.bottleneck_width, kModGain, 1.0);
}

Registry declare(const ModelConfig& cfg) {
  cfg.validate();
  Registry r;
  const auto& w = cfg.widths;
  const int E = cfg.embed_dim, B = cfg.bottleneck_width;
  if (cfg.conditioned) r.add("embed.table", {cfg.num_devices, E}, normal(0.02));
  if (cfg.features.adapt_illuminants) {
    r.linear("wb.fc0", 4, w[0], 1.0, kSoftplusInvOne);
    r.linear("wb.fc1", w[0], w[1], kModGain, kSoftplusInvOne);
  }
  if (cfg.features.iso_exp) {
    r.linear("isoexp.lift_iso", 1, 32);
    r.linear("isoexp.lift_exp", 1, 32);
    r.linear("isoexp.fc0", 64, 64);
    r.add("isoexp.fc1.w", {2 * w[0], 64}, he(64, kModGain));
    const int w0 = w[0];
    r.add("isoexp.fc1.b", {2 * w[0]}, [w0](Tensor& t, Rng&) {
      for (int i = 0; i < 2 * w0; ++i) t[i] = i < w0 ? 1.0 : 0.0;  // α = 1, β = 0
    });
  }
  if (cfg.learned_wb()) {
    const int iw = cfg.illum_width;
    r.conv("illum.conv0", 4, iw, 3);
    r.conv("illum.conv1", iw, 2 * iw, 3);
    r.conv("illum.conv2", 2 * iw, 4 * iw, 3);
    r.linear("illum.fc0", 4 * iw + (cfg.conditioned ? E : 0), 4 * iw);
    r.linear("illum.fc1", 4 * iw, 2, kModGain, std::log(std::expm1(1.5)));
  }
  int cin = 4;
  for (int l = 0; l < cfg.levels; ++l) {
    const std::string pre = "enc" + std::to_string(l);
    r.conv(pre + ".conv", cin, w[l], 3);
    declare_blocks(r, pre, w[l], cfg, true);
    cin = 4 * w[l];
  }
  r.conv("bott.entry", cin, B, 1);
  for (int j = 0; j < cfg.bottleneck_res_blocks; ++j) {
    const std::string b = "bott.block" + std::to_string(j);
    r.conv(b + ".reduce", B, cfg.bottleneck_inner, 1);
    r.conv(b + ".conv", cfg.bottleneck_inner, cfg.bottleneck_inner, 3);
    r.conv(b + ".expand", cfg.bottleneck_inner, B, 1, kResidualGain);
  }
  if (cfg.conditioned) r.linear("bott.embed_scale", E, B, kModGain, 1.0);
  if (cfg.features.global_semantics) declare_xcit(r, cfg);
  int prev = B;
  for (int l = cfg.levels - 1; l >= 0; --l) {
    const std::string pre = "dec" + std::to_string(l);
    r.conv(pre + ".up", prev, 4 * w[l], 1);
    r.conv(pre + ".merge", 2 * w[l], w[l], 3);
    declare_blocks(r, pre, w[l], cfg, false);
    prev = w[l];
  }
  r.conv("head", w[0], 12, 3, kResidualGain);
  return r;
}

void require_positive(int v, const std::string& what) {
  require(v > 0, "config", what + " must be positive");
}

Variable tokens_of(const Variable& f) {  // [N,C,H,W] -> [N,HW,C]
  const int n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  return ag::permute(ag::reshape(f, {n, c, hw}), {0, 2, 1});
}

Variable image_of(const Variable& t, int h, int w) {  // [N,HW,C] -> [N,C,H,W]
  const int n = t.dim(0), c = t.dim(2);
  return ag::reshape(ag::permute(t, {0, 2, 1}), {n, c, h, w});
}

Variable scale_channels(const Variable& f, const Variable& s) {  // f [N,C,H,W] ⊙ s [N,C]
  return f * ag::reshape(s, {s.dim(0), s.dim(1), 1, 1});
}

Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::full(int num_devices) {
  ModelConfig c;
  c.num_devices = num_devices;
  return c;
}

ModelConfig ModelConfig::toy(int num_devices) {
  ModelConfig c;
  c.scale = "toy";
  c.widths = {16, 32, 64};
  c.bottleneck_width = 128;
  c.bottleneck_inner = 32;
  c.xcit.dim = 32;
  c.xcit.blocks = 2;
  c.xcit.input_size = 64;
  c.num_devices = num_devices;
  return c;
}

ModelConfig ModelConfig::ablation(char row, ModelConfig base) {
  require(row >= 'A' && row <= 'E', "config", std::string("ablation row must be A-E, got ") + row);
  base.features.adapt_illuminants = row >= 'B';
  base.features.global_semantics = row >= 'C';
  base.features.attention = row >= 'D';
  base.features.iso_exp = row >= 'E';
  return base;
}

void ModelConfig::validate() const {
  require(scale == "full" || scale == "toy" || scale == "custom", "config", "scale must be full, toy or custom");
  require_positive(levels, "levels");
  require(static_cast<int>(widths.size()) == levels, "config", "widths must list one entry per level");
  require(levels >= 2, "config", "the white-balance injection needs at least two levels");
  for (size_t i = 0; i < widths.size(); ++i) {
    require_positive(widths[i], "widths");
    require(i == 0 || widths[i] > widths[i - 1], "config", "widths must be strictly increasing");
  }
  for (int v : {bottleneck_width, bottleneck_inner, embed_dim, attn_heads, num_devices, illum_width})
    require_positive(v, "model sizes");
  require(res_attn_blocks_per_level >= 0 && bottleneck_res_blocks >= 0, "config", "block counts must be >= 0");
  require(bottleneck_width % attn_heads == 0, "config", "bottleneck_width must be divisible by attn_heads");
  for (int w : widths)
    require(w % attn_heads == 0 && w % 4 == 0, "config",
            "level widths must be divisible by attn_heads and by 4 (positional encoding)");
  for (int v : {xcit.patch, xcit.blocks, xcit.dim, xcit.heads, xcit.input_size, xcit.mlp_ratio})
    require_positive(v, "xcit sizes");
  require(xcit.class_blocks >= 1, "config", "xcit needs at least one class-attention block");
  require(xcit.input_size % xcit.patch == 0, "config", "xcit.input_size must be divisible by xcit.patch");
  require(xcit.dim % xcit.heads == 0 && xcit.dim % 4 == 0, "config", "xcit.dim must be divisible by heads and 4");
  require(pipeline == "meta-wb" || pipeline == "learned-wb", "config", "pipeline must be meta-wb or learned-wb");
}

json ModelConfig::to_json() const {
  return {{"scale", scale},
          {"levels", levels},
          {"widths", widths},
          {"bottleneck_width", bottleneck_width},
          {"bottleneck_inner", bottleneck_inner},
          {"embed_dim", embed_dim},
          {"res_attn_blocks_per_level", res_attn_blocks_per_level},
          {"bottleneck_res_blocks", bottleneck_res_blocks},
          {"attn_heads", attn_heads},
          {"xcit",
           {{"patch", xcit.patch},
            {"blocks", xcit.blocks},
            {"dim", xcit.dim},
            {"heads", xcit.heads},
            {"input_size", xcit.input_size},
            {"class_blocks", xcit.class_blocks},
            {"mlp_ratio", xcit.mlp_ratio}}},
          {"num_devices", num_devices},
          {"features",
           {{"adapt_illuminants", features.adapt_illuminants},
            {"global_semantics", features.global_semantics},
            {"attention", features.attention},
            {"iso_exp", features.iso_exp}}},
          {"conditioned", conditioned},
          {"pipeline", pipeline},
          {"illum_width", illum_width},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  require(j.is_object(), "config", "model config must be an object");
  const std::string scale = j.value("scale", std::string("full"));
  ModelConfig c = scale == "toy" ? toy() : full();
  c.scale = scale;
  for (const auto& [key, v] : j.items()) {
    if (key == "scale") continue;
    if (key == "levels") c.levels = v.get<int>();
    else if (key == "widths") c.widths = v.get<std::vector<int>>();
    else if (key == "bottleneck_width") c.bottleneck_width = v.get<int>();
    else if (key == "bottleneck_inner") c.bottleneck_inner = v.get<int>();
    else if (key == "embed_dim") c.embed_dim = v.get<int>();
    else if (key == "res_attn_blocks_per_level") c.res_attn_blocks_per_level = v.get<int>();
    else if (key == "bottleneck_res_blocks") c.bottleneck_res_blocks = v.get<int>();
    else if (key == "attn_heads") c.attn_heads = v.get<int>();
    else if (key == "num_devices") c.num_devices = v.get<int>();
    else if (key == "conditioned") c.conditioned = v.get<bool>();
    else if (key == "pipeline") c.pipeline = v.get<std::string>();
    else if (key == "illum_width") c.illum_width = v.get<int>();
    else if (key == "seed") c.seed = v.get<uint64_t>();
    else if (key == "xcit") {
      for (const auto& [k, x] : v.items()) {
        if (k == "patch") c.xcit.patch = x.get<int>();
        else if (k == "blocks") c.xcit.blocks = x.get<int>();
        else if (k == "dim") c.xcit.dim = x.get<int>();
        else if (k == "heads") c.xcit.heads = x.get<int>();
        else if (k == "input_size") c.xcit.input_size = x.get<int>();
        else if (k == "class_blocks") c.xcit.class_blocks = x.get<int>();
        else if (k == "mlp_ratio") c.xcit.mlp_ratio = x.get<int>();
        else fail("config", "unknown key 'model.xcit." + k + "'");
      }
    } else if (key == "features") {
      for (const auto& [k, x] : v.items()) {
        if (k == "adapt_illuminants") c.features.adapt_illuminants = x.get<bool>();
        else if (k == "global_semantics") c.features.global_semantics = x.get<bool>();
        else if (k == "attention") c.features.attention = x.get<bool>();
        else if (k == "iso_exp") c.features.iso_exp = x.get<bool>();
        else fail("config", "unknown key 'model.features." + k + "'");
      }
    } else {
      fail("config", "unknown key 'model." + key + "'");
    }
  }
  c.validate();
  return c;
}

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  std::vector<ParamSpec> out;
  for (auto& d : declare(cfg).decls) out.push_back(d.spec);
  return out;
}

size_t param_count(const ModelConfig& cfg) {
  size_t n = 0;
  for (const auto& s : param_specs(cfg)) n += shape_numel(s.shape);
  return n;
}

std::map<std::string, size_t> param_breakdown(const ModelConfig& cfg) {
  std::map<std::string, size_t> out;
  for (const auto& s : param_specs(cfg)) out[s.name.substr(0, s.name.find('.'))] += shape_numel(s.shape);
  return out;
}

// ---------------------------------------------------------------------------
// Helpers

Tensor resize_bilinear(const Tensor& x, int size) {
  require(x.rank() == 4 && x.dim(2) > 0 && x.dim(3) > 0, "shape",
          "resize needs a non-empty NCHW tensor, got " + shape_str(x.shape()));
  require(size > 0, "shape", "resize target must be positive");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == size && w == size) return x;
  Tensor out(Shape{n, c, size, size});
  auto coord = [](int dst, int in, int out_size, int* i0, int* i1, double* a) {
    double s = (dst + 0.5) * in / out_size - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    *i0 = static_cast<int>(std::floor(s));
    *i1 = std::min(*i0 + 1, in - 1);
    *a = s - *i0;
  };
  for (int oy = 0; oy < size; ++oy) {
    int y0, y1;
    double ay;
    coord(oy, h, size, &y0, &y1, &ay);
    for (int ox = 0; ox < size; ++ox) {
      int x0, x1;
      double ax;
      coord(ox, w, size, &x0, &x1, &ax);
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
          out.at(b, ch, oy, ox) = (1 - ay) * ((1 - ax) * x.at(b, ch, y0, x0) + ax * x.at(b, ch, y0, x1)) +
                                  ay * ((1 - ax) * x.at(b, ch, y1, x0) + ax * x.at(b, ch, y1, x1));
    }
  }
  return out;
}

Tensor positional_encoding(int dim, int h, int w, int step, const std::vector<std::array<int, 2>>& origin,
                           int batch) {
  require(dim % 4 == 0, "shape", "positional encoding needs dim divisible by 4");
  require(origin.empty() || static_cast<int>(origin.size()) == batch, "shape", "one origin per sample expected");
  const int quarter = dim / 4;
  Tensor pe(Shape{batch, h * w, dim});
  for (int b = 0; b < batch; ++b) {
    const int oy = origin.empty() ? 0 : origin[b][0], ox = origin.empty() ? 0 : origin[b][1];
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double* row = pe.data() + (static_cast<size_t>(b) * h * w + i * w + j) * dim;
        const double py = oy + i * step, px = ox + j * step;
        for (int k = 0; k < quarter; ++k) {
          const double omega = std::pow(10000.0, -static_cast<double>(k) / quarter);
          row[2 * k] = std::sin(py * omega);
          row[2 * k + 1] = std::cos(py * omega);
          row[dim / 2 + 2 * k] = std::sin(px * omega);
          row[dim / 2 + 2 * k + 1] = std::cos(px * omega);
        }
      }
  }
  return pe;
}

std::pair<double, double> normalize_iso_exposure(double iso, double exposure_s) {
  require(std::isfinite(iso) && iso > 0, "value", "ISO must be positive");
  require(std::isfinite(exposure_s) && exposure_s > 0, "value", "exposure time must be positive");
  return {std::log2(iso / 100.0), std::log2(exposure_s * 1000.0)};
}

bool normalize_device_weights(std::vector<double>& w) {
  double s = 0;
  bool negative = false;
  for (double v : w) {
    require(std::isfinite(v), "value", "device weights must be finite");
    s += v;
    negative = negative || v < 0;
  }
  require(s > 0, "value", "device weights must have a positive sum");
  if (std::fabs(s - 1.0) <= 1e-12 && !negative) return false;
  if (std::fabs(s - 1.0) > 1e-12)
    for (double& v : w) v /= s;
  return true;
}

// ---------------------------------------------------------------------------
// Network

Network::Network(ModelConfig cfg) : cfg_(std::move(cfg)) {
  Registry reg = declare(cfg_);
  Rng rng(cfg_.seed);
  for (auto& d : reg.decls) {
    Tensor t(d.spec.shape);
    d.init(t, rng);
    round_to_f32(t);
    index_[d.spec.name] = params_.size();
    params_.emplace_back(d.spec.name, ag::parameter(std::move(t)));
  }
  for (const auto& [prefix, ch] : reg.batch_norms) {
    buffers_[prefix + ".running_mean"] = Tensor(Shape{ch}, 0.0);
    buffers_[prefix + ".running_var"] = Tensor(Shape{ch}, 1.0);
  }
}

const Variable& Network::param(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "shape", "no parameter named '" + name + "'");
  return params_[it->second].second;
}

size_t Network::param_count() const {
  size_t n = 0;
  for (const auto& [name, v] : params_) n += v.numel();
  return n;
}

Variable Network::embed_device(const Tensor& weights) const {
  require(cfg_.conditioned, "config", "an unconditioned model has no device embedding");
  require(weights.rank() == 2 && weights.dim(1) == cfg_.num_devices, "shape",
          "device weights must be [N," + std::to_string(cfg_.num_devices) + "], got " + shape_str(weights.shape()));
  return ag::matmul(constant(weights), p("embed.table"));
}

std::pair<Variable, Variable> Network::wb_branch(const Variable& wb) const {
  require(wb.rank() == 2 && wb.dim(1) == 4, "shape", "white-balance input must be [N,4]");
  const int n = wb.dim(0);
  if (!cfg_.features.adapt_illuminants)
    return {constant(ones({n, cfg_.widths[0]})), constant(ones({n, cfg_.widths[1]}))};
  // Log gains: neutral channels map to 0 and scene-to-scene changes stay
  // proportional, as for the ISO and exposure inputs.
  Variable s0 = ag::softplus(ag::linear(ag::log(wb), p("wb.fc0.w"), p("wb.fc0.b")));
  Variable s1 = ag::softplus(ag::linear(s0, p("wb.fc1.w"), p("wb.fc1.b")));
  return {s0, s1};
}

Variable Network::illum_branch(const Tensor& full, const Variable& e) const {
  require(cfg_.learned_wb(), "config", "the illuminant branch exists only in the learned-wb pipeline");
  require(full.rank() == 4 && full.dim(1) == 4, "shape", "illuminant branch expects packed RAW [N,4,H,W]");
  const int n = full.dim(0);
  Variable h = constant(resize_bilinear(full, cfg_.xcit.input_size));
  for (int i = 0; i < 3; ++i) {
    const std::string c = "illum.conv" + std::to_string(i);
    h = ag::gelu(ag::conv2d(h, p(c + ".w"), p(c + ".b"), 2, 1));
  }
  h = ag::reshape(ag::mean_axes(h, {2, 3}), {n, h.dim(1)});
  if (cfg_.conditioned) {
    require(e.defined() && e.rank() == 2 && e.dim(0) == n, "shape", "illuminant branch needs an [N,E] embedding");
    h = ag::concat({h, e}, 1);
  }
  h = ag::gelu(ag::linear(h, p("illum.fc0.w"), p("illum.fc0.b")));
  Variable rb = ag::softplus(ag::linear(h, p("illum.fc1.w"), p("illum.fc1.b")));
  Variable one = constant(ones({n, 1}));
  return ag::concat({ag::slice(rb, 1, 0, 1), one, one, ag::slice(rb, 1, 1, 1)}, 1);
}

std::pair<Variable, Variable> Network::iso_exp_branch(const std::vector<double>& iso,
                                                      const std::vector<double>& exposure_s) const {
  require(iso.size() == exposure_s.size() && !iso.empty(), "shape", "one ISO and exposure per sample expected");
  const int n = static_cast<int>(iso.size()), w0 = cfg_.widths[0];
  Tensor a(Shape{n, 1}), b(Shape{n, 1});
  for (int i = 0; i < n; ++i) std::tie(a[i], b[i]) = normalize_iso_exposure(iso[i], exposure_s[i]);
  if (!cfg_.features.iso_exp) return {constant(ones({n, w0})), constant(Tensor(Shape{n, w0}, 0.0))};
  Variable li = ag::relu(ag::linear(constant(a), p("isoexp.lift_iso.w"), p("isoexp.lift_iso.b")));
  Variable le = ag::relu(ag::linear(constant(b), p("isoexp.lift_exp.w"), p("isoexp.lift_exp.b")));
  Variable h = ag::relu(ag::linear(ag::concat({li, le}, 1), p("isoexp.fc0.w"), p("isoexp.fc0.b")));
  Variable o = ag::linear(h, p("isoexp.fc1.w"), p("isoexp.fc1.b"));
  return {ag::slice(o, 1, 0, w0), ag::slice(o, 1, w0, w0)};
}

Variable Network::attention_core(const std::string& pre, const Variable& f, const Variable& query,
                                 const Tensor& pos) const {
  require(f.rank() == 4, "shape", "attention expects [N,C,H,W] features");
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3), hw = h * w;
  const int heads = cfg_.attn_heads, d = c / heads;
  require(c % heads == 0, "shape", "attention width must be divisible by the head count");
  require(pos.shape() == Shape{n, hw, c}, "shape", "positional encoding must be [N,HW,C]");
  require(query.numel() == static_cast<size_t>(c) || query.shape() == Shape{n, c}, "shape",
          "attention query width mismatch");

  Variable t = ag::layer_norm(tokens_of(f), p(pre + ".ln.g"), p(pre + ".ln.b"));
  Variable k = ag::linear(t, p(pre + ".k.w"), p(pre + ".k.b")) + constant(pos);
  Variable v = ag::linear(t, p(pre + ".v.w"), p(pre + ".v.b")) + constant(pos);
  Variable kh = ag::permute(ag::reshape(k, {n, hw, heads, d}), {0, 2, 1, 3});  // [N,h,HW,d]
  Variable vh = ag::permute(ag::reshape(v, {n, hw, heads, d}), {0, 2, 1, 3});
  const int nq = query.numel() == static_cast<size_t>(c) ? 1 : n;
  Variable qh = ag::reshape(query, {nq, heads, 1, d});
  Variable scores = ag::mul_scalar(ag::sum_axes(qh * kh, {3}), 1.0 / std::sqrt(static_cast<double>(d)));
  Variable weights = ag::softmax(ag::reshape(scores, {n, heads, hw}));
  Variable summary = ag::sum_axes(ag::reshape(weights, {n, heads, hw, 1}) * vh, {2});  // [N,h,1,d]
  Variable gamma_s = ag::reshape(p(pre + ".gamma_s"), {1, c, 1, 1});
  Variable g = f + f * ag::reshape(summary, {n, c, 1, 1}) * gamma_s;

  Variable tg = tokens_of(g);
  Variable tail = ag::gelu(ag::layer_norm(ag::linear(tg, p(pre + ".tail.w"), p(pre + ".tail.b")),
                                          p(pre + ".tail_ln.g"), p(pre + ".tail_ln.b")));
  return image_of(tg + tail * p(pre + ".gamma_t"), h, w);
}

Variable Network::encoder_attention(int level, const Variable& f, const Tensor& pos) const {
  const std::string pre = "enc" + std::to_string(level) + ".block0.attn";
  return attention_core(pre, f, p(pre + ".query"), pos);
}

Variable Network::decoder_attention(int level, const Variable& f, const Variable& e, const Tensor& pos) const {
  const std::string pre = "dec" + std::to_string(level) + ".block0.attn";
  if (!cfg_.conditioned) return attention_core(pre, f, p(pre + ".query"), pos);
  require(e.defined() && e.rank() == 2 && e.dim(1) == cfg_.embed_dim, "shape", "decoder attention needs e [N,E]");
  return attention_core(pre, f, ag::linear(e, p(pre + ".query.w"), p(pre + ".query.b")), pos);
}

Variable Network::res_block(const std::string& pre, const Variable& f) const {
  Variable h = ag::gelu(ag::conv2d(f, p(pre + ".conv0.w"), p(pre + ".conv0.b"), 1, 1));
  return f + ag::conv2d(h, p(pre + ".conv1.w"), p(pre + ".conv1.b"), 1, 1);
}

Variable Network::bottleneck_block(const std::string& pre, const Variable& f) const {
  Variable h = ag::gelu(ag::conv2d(f, p(pre + ".reduce.w"), p(pre + ".reduce.b"), 1, 0));
  h = ag::gelu(ag::conv2d(h, p(pre + ".conv.w"), p(pre + ".conv.b"), 1, 1));
  return f + ag::conv2d(h, p(pre + ".expand.w"), p(pre + ".expand.b"), 1, 0);
}

Variable Network::batch_norm(const std::string& pre, const Variable& x, Mode mode) const {
  Tensor& mean = buffers_.at(pre + ".running_mean");
  Tensor& var = buffers_.at(pre + ".running_var");
  const bool training = mode == Mode::kTrain && !stats_frozen_;
  Variable out = ag::batch_norm(x, p(pre + ".g"), p(pre + ".b"), mean, var, training);
  if (training) {
    round_to_f32(mean);
    round_to_f32(var);
  }
  return out;
}

Variable Network::xca(const std::string& pre, const Variable& x) const {
  const int n = x.dim(0), t = x.dim(1), dim = x.dim(2), heads = cfg_.xcit.heads, d = dim / heads;
  Variable qkv = ag::linear(x, p(pre + ".qkv.w"), p(pre + ".qkv.b"));
  auto head_major = [&](int part) {  // [N,T,D] slice -> [N,h,d,T]
    return ag::permute(ag::reshape(ag::slice(qkv, 2, part * dim, dim), {n, t, heads, d}), {0, 2, 3, 1});
  };
  auto l2norm = [](const Variable& a) {  // along tokens (last axis)
    return a / ag::sqrt(ag::add_scalar(ag::sum_axes(a * a, {3}), 1e-12));
  };
  Variable q = l2norm(head_major(0)), k = l2norm(head_major(1)), v = head_major(2);
  Variable logits = ag::matmul(q, ag::permute(k, {0, 1, 3, 2}));  // [N,h,d,d]
  logits = logits * ag::reshape(p(pre + ".temperature"), {1, heads, 1, 1});
  Variable out = ag::matmul(ag::softmax(logits), v);  // [N,h,d,T]
  out = ag::reshape(ag::permute(out, {0, 3, 1, 2}), {n, t, dim});
  return ag::linear(out, p(pre + ".proj.w"), p(pre + ".proj.b"));
}

Variable Network::global_semantics(const Tensor& full, Mode mode) const {
  const XcitConfig& xc = cfg_.xcit;
  const int n = full.dim(0), size = xc.input_size, ps = xc.patch, grid = size / ps, tp = grid * grid;
  const int dim = xc.dim;
  if (!cfg_.features.global_semantics) return constant(ones({n, cfg_.bottleneck_width}));
  require(full.rank() == 4 && full.dim(1) == 4, "shape",
          "global semantics expects packed RAW [N,4,H,W], got " + shape_str(full.shape()));
  const Tensor r = resize_bilinear(full, size);

  // Patchify to [N, T, 4·p·p], channel-major inside each patch.
  Tensor patches(Shape{n, tp, 4 * ps * ps});
  for (int b = 0; b < n; ++b)
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        double* row = patches.data() + (static_cast<size_t>(b) * tp + gy * grid + gx) * 4 * ps * ps;
        for (int c = 0; c < 4; ++c)
          for (int y = 0; y < ps; ++y)
            for (int x = 0; x < ps; ++x) *row++ = r.at(b, c, gy * ps + y, gx * ps + x);
      }
  Variable tok = ag::linear(constant(patches), p("xcit.patch_embed.w"), p("xcit.patch_embed.b")) +
                 constant(positional_encoding(dim, grid, grid, ps, {}, n));
  Variable cls = constant(Tensor(Shape{n, 1, dim}, 0.0)) + ag::reshape(p("xcit.cls"), {1, 1, dim});
  Variable x = ag::concat({cls, tok}, 1);

  auto ln = [&](const std::string& name, const Variable& a) { return ag::layer_norm(a, p(name + ".g"), p(name + ".b")); };
  auto mlp = [&](const std::string& pre, const Variable& a) {
    Variable h = ag::gelu(ag::linear(a, p(pre + ".fc0.w"), p(pre + ".fc0.b")));
    return ag::linear(h, p(pre + ".fc1.w"), p(pre + ".fc1.b"));
  };
  for (int i = 0; i < xc.blocks; ++i) {
    const std::string b = "xcit.block" + std::to_string(i);
    x = x + xca(b, ln(b + ".ln1", x)) * p(b + ".gamma1");
    // Local patch interaction on the patch tokens only.
    Variable cls_tok = ag::slice(x, 1, 0, 1), pt = ag::slice(x, 1, 1, tp);
    Variable img = image_of(ln(b + ".ln3", pt), grid, grid);
    img = ag::depthwise_conv2d(img, p(b + ".lpi.conv0.w"), p(b + ".lpi.conv0.b"), 1, 1);
    img = batch_norm(b + ".lpi.bn", ag::gelu(img), mode);
    img = ag::depthwise_conv2d(img, p(b + ".lpi.conv1.w"), p(b + ".lpi.conv1.b"), 1, 1);
    pt = pt + tokens_of(img) * p(b + ".gamma3");
    x = ag::concat({cls_tok, pt}, 1);
    x = x + mlp(b + ".mlp", ln(b + ".ln2", x)) * p(b + ".gamma2");
  }
  const int heads = xc.heads, d = dim / heads, t = tp + 1;
  for (int i = 0; i < xc.class_blocks; ++i) {
    const std::string b = "xcit.class" + std::to_string(i);
    Variable xn = ln(b + ".ln1", x);
    Variable q = ag::linear(ag::slice(xn, 1, 0, 1), p(b + ".q.w"), p(b + ".q.b"));
    Variable k = ag::linear(xn, p(b + ".k.w"), p(b + ".k.b"));
    Variable v = ag::linear(xn, p(b + ".v.w"), p(b + ".v.b"));
    Variable qh = ag::permute(ag::reshape(q, {n, 1, heads, d}), {0, 2, 1, 3});  // [N,h,1,d]
    Variable kh = ag::permute(ag::reshape(k, {n, t, heads, d}), {0, 2, 3, 1});  // [N,h,d,T]
    Variable vh = ag::permute(ag::reshape(v, {n, t, heads, d}), {0, 2, 1, 3});  // [N,h,T,d]
    Variable att = ag::softmax(ag::mul_scalar(ag::matmul(qh, kh), 1.0 / std::sqrt(static_cast<double>(d))));
    Variable o = ag::reshape(ag::permute(ag::matmul(att, vh), {0, 2, 1, 3}), {n, 1, dim});
    o = ag::linear(o, p(b + ".proj.w"), p(b + ".proj.b"));
    Variable cls_tok = ag::slice(x, 1, 0, 1) + o * p(b + ".gamma1");
    cls_tok = cls_tok + mlp(b + ".mlp", ln(b + ".ln2", cls_tok)) * p(b + ".gamma2");
    x = ag::concat({cls_tok, ag::slice(x, 1, 1, tp)}, 1);
  }
  Variable c = ag::reshape(ln("xcit.norm", ag::slice(x, 1, 0, 1)), {n, dim});
  return ag::linear(c, p("xcit.out.w"), p("xcit.out.b"));
}

ForwardOutput Network::forward(const ForwardInput& in, Mode mode) const {
  Variable e;
  if (cfg_.conditioned) e = embed_device(in.device_weights);
  return forward_with_embedding(in, e, mode);
}

ForwardOutput Network::forward_with_embedding(const ForwardInput& in, const Variable& e, Mode mode) const {
  const Variable& x = in.x;
  require(x.defined() && x.rank() == 4 && x.dim(1) == 4, "shape", "network input must be packed RAW [N,4,H,W]");
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3), L = cfg_.levels;
  const int multiple = 1 << (L + 1);
  require(h % multiple == 0 && w % multiple == 0, "shape",
          "patch " + std::to_string(h) + "x" + std::to_string(w) + " must be a multiple of " + std::to_string(multiple));
  require(in.full.rank() == 4 && in.full.dim(0) == n && in.full.dim(1) == 4, "shape", "full frame must be [N,4,H,W]");
  require(in.wb.shape() == Shape{n, 4}, "shape", "metadata white balance must be [N,4]");
  require(in.origin.empty() || static_cast<int>(in.origin.size()) == n, "shape", "one origin per sample expected");
  if (cfg_.conditioned)
    require(e.defined() && e.shape() == Shape{n, cfg_.embed_dim}, "shape", "embedding must be [N,E]");

  ForwardOutput out;
  out.aux.e = e;
  out.aux.wb_used = cfg_.learned_wb() ? illum_branch(in.full, e) : constant(in.wb);
  auto [s0, s1] = wb_branch(out.aux.wb_used);
  std::tie(out.aux.alpha, out.aux.beta) = iso_exp_branch(in.iso, in.exposure_s);

  Variable f = x;
  std::vector<Variable> skips(L);
  std::vector<Tensor> pos(L);
  for (int l = 0; l < L; ++l) {
    const std::string pre = "enc" + std::to_string(l);
    f = ag::gelu(ag::conv2d(f, p(pre + ".conv.w"), p(pre + ".conv.b"), 1, 1));
    if (cfg_.features.adapt_illuminants && l == 0) f = scale_channels(f, s0);
    if (cfg_.features.adapt_illuminants && l == 1) f = scale_channels(f, s1);
    if (cfg_.features.iso_exp && l == 0) {
      const int c = f.dim(1);
      f = f * ag::reshape(out.aux.alpha, {n, c, 1, 1}) + ag::reshape(out.aux.beta, {n, c, 1, 1});
    }
    if (cfg_.features.attention) pos[l] = positional_encoding(f.dim(1), f.dim(2), f.dim(3), 1 << l, in.origin, n);
    for (int j = 0; j < cfg_.res_attn_blocks_per_level; ++j) {
      const std::string b = pre + ".block" + std::to_string(j);
      f = res_block(b + ".res", f);
      if (cfg_.features.attention) f = attention_core(b + ".attn", f, p(b + ".attn.query"), pos[l]);
    }
    skips[l] = f;
    f = ag::dwt_haar(f);
  }

  f = ag::gelu(ag::conv2d(f, p("bott.entry.w"), p("bott.entry.b"), 1, 0));
  for (int j = 0; j < cfg_.bottleneck_res_blocks; ++j) f = bottleneck_block("bott.block" + std::to_string(j), f);
  if (cfg_.conditioned) f = scale_channels(f, ag::linear(e, p("bott.embed_scale.w"), p("bott.embed_scale.b")));
  out.aux.g = global_semantics(in.full, mode);
  if (cfg_.features.global_semantics) f = scale_channels(f, out.aux.g);

  for (int l = L - 1; l >= 0; --l) {
    const std::string pre = "dec" + std::to_string(l);
    f = ag::idwt_haar(ag::conv2d(f, p(pre + ".up.w"), p(pre + ".up.b"), 1, 0));
    f = ag::gelu(ag::conv2d(ag::concat({f, skips[l]}, 1), p(pre + ".merge.w"), p(pre + ".merge.b"), 1, 1));
    for (int j = 0; j < cfg_.res_attn_blocks_per_level; ++j) {
      const std::string b = pre + ".block" + std::to_string(j);
      f = res_block(b + ".res", f);
      if (!cfg_.features.attention) continue;
      Variable q = cfg_.conditioned ? ag::linear(e, p(b + ".attn.query.w"), p(b + ".attn.query.b"))
                                    : p(b + ".attn.query");
      f = attention_core(b + ".attn", f, q, pos[l]);
    }
  }
  Variable y = ag::conv2d(f, p("head.w"), p("head.b"), 1, 1);
  out.y = ag::sigmoid(ag::depth_to_space(y, 2));
  return out;
}

io::Checkpoint Network::to_checkpoint() const {
  io::Checkpoint ck;
  for (const auto& [name, v] : params_) ck.tensors.push_back({name, v.value()});
  for (const auto& [name, t] : buffers_) ck.tensors.push_back({"buffer/" + name, t});
  ck.config = {{"model", cfg_.to_json()}};
  ck.meta["norm_stats_frozen"] = stats_frozen_;
  return ck;
}

void Network::load_state(const io::Checkpoint& ck) {
  // Optimizer moments ("adam.*") may ride along; every other tensor must belong to this model.
  size_t model_tensors = 0;
  for (const auto& t : ck.tensors) model_tensors += t.name.rfind("adam.", 0) == 0 ? 0 : 1;
  const size_t expected = params_.size() + buffers_.size();
  require(model_tensors == expected, "format",
          "checkpoint holds " + std::to_string(model_tensors) + " model tensors, expected " + std::to_string(expected));
  for (auto& [name, v] : params_) {
    const Tensor* t = ck.find(name);
    require(t != nullptr, "format", "checkpoint is missing parameter '" + name + "'");
    require(t->shape() == v.shape(), "format", "shape mismatch for '" + name + "'");
    v.value() = *t;
  }
  for (auto& [name, buf] : buffers_) {
    const Tensor* t = ck.find("buffer/" + name);
    require(t != nullptr, "format", "checkpoint is missing buffer '" + name + "'");
    require(t->shape() == buf.shape(), "format", "shape mismatch for buffer '" + name + "'");
    buf = *t;
  }
  stats_frozen_ = ck.meta.value("norm_stats_frozen", false);
}

Network Network::from_checkpoint(const io::Checkpoint& ck) {
  require(ck.config.contains("model"), "format", "checkpoint config has no model section");
  Network net(ModelConfig::from_json(ck.config.at("model")));
  net.load_state(ck);
  return net;
}

}  // namespace devisp::nn
