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

// Acceptance gate. Runs the eleven release criteria and prints one PASS/FAIL
// line per criterion. Usage: devisp_acceptance [criterion ids...]
// (default: all). Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "ciede_oracle.hpp"
#include "cli.hpp"
#include "devisp/align.hpp"
#include "devisp/color.hpp"
#include "devisp/data.hpp"
#include "devisp/gradsuite.hpp"
#include "devisp/refisp.hpp"
#include "devisp/train.hpp"
#include "test_util.hpp"

namespace devisp {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Format round trips

io::RawImage random_raw(Rng& rng) {
  io::RawImage r;
  r.height = 2 * static_cast<int>(rng.uniform_int(1, 24));
  r.width = 2 * static_cast<int>(rng.uniform_int(1, 24));
  r.meta.black_level = static_cast<int>(rng.uniform_int(0, 512));
  r.meta.white_level = static_cast<int>(rng.uniform_int(r.meta.black_level + 1, 65535));
  r.meta.wb_gains = {rng.uniform(1, 3), 1.0, 1.0, rng.uniform(1, 3)};
  r.meta.iso = rng.uniform(50, 6400);
  r.meta.exposure_s = rng.uniform(1e-4, 1.0);
  if (rng.uniform(0, 1) < 0.5) r.meta.device_id = static_cast<int>(rng.uniform_int(0, 9));
  r.mosaic.resize(static_cast<size_t>(r.height) * r.width);
  for (auto& v : r.mosaic) v = static_cast<uint16_t>(rng.uniform_int(0, r.meta.white_level));
  return r;
}

Outcome formats() {
  const fs::path dir = testing::scratch_dir("accept_formats");
  Rng rng(2026);
  int failures = 0;
  for (int i = 0; i < 250; ++i) {
    const io::RawImage raw = random_raw(rng);
    io::write_raw(raw, dir / "r.pgm");
    failures += !(io::read_raw(dir / "r.pgm") == raw);

    // sRGB files hold bytes, so the lossless domain is the byte grid.
    io::RgbImage rgb(static_cast<int>(rng.uniform_int(1, 40)), static_cast<int>(rng.uniform_int(1, 40)));
    for (auto& v : rgb.pixels) v = rng.uniform_int(0, 255) / 255.0;
    io::write_rgb(rgb, dir / "c.ppm");
    failures += io::read_rgb(dir / "c.ppm").pixels != rgb.pixels;

    io::FlowField f(static_cast<int>(rng.uniform_int(1, 40)), static_cast<int>(rng.uniform_int(1, 40)));
    for (size_t k = 0; k < f.u.size(); ++k) {
      f.u[k] = static_cast<float>(rng.uniform(-50, 50));
      f.v[k] = static_cast<float>(rng.uniform(-50, 50));
    }
    io::write_flow(f, dir / "f.flo");
    failures += !(io::read_flow(dir / "f.flo") == f);

    // Checkpoints store float32; values already on that grid must survive.
    io::Checkpoint ck;
    const int n = static_cast<int>(rng.uniform_int(1, 4));
    for (int t = 0; t < n; ++t) {
      Tensor v(Shape{static_cast<int>(rng.uniform_int(1, 6)), static_cast<int>(rng.uniform_int(1, 6))});
      for (double& x : v.vec()) x = static_cast<float>(rng.uniform(-10, 10));
      ck.tensors.push_back({"t" + std::to_string(t), v});
    }
    ck.config = json{{"i", i}};
    ck.rng_state = Rng(i).state();
    ck.meta = json{{"step", i * 3}};
    io::save_checkpoint(ck, dir / "k.ckpt");
    const io::Checkpoint back = io::load_checkpoint(dir / "k.ckpt");
    bool same = back.config == ck.config && back.rng_state == ck.rng_state && back.meta == ck.meta &&
                back.tensors.size() == ck.tensors.size();
    for (size_t t = 0; same && t < ck.tensors.size(); ++t)
      same = back.tensors[t].name == ck.tensors[t].name && back.tensors[t].value.shape() == ck.tensors[t].value.shape() &&
             back.tensors[t].value.vec() == ck.tensors[t].value.vec();
    failures += !same;
  }
  return {failures == 0, "1000 cycles (250 each of RAW, sRGB, flow, checkpoint), " + std::to_string(failures) +
                             " mismatches"};
}

// ---------------------------------------------------------------------------
// 2. Reference ISP round trip

// Band-limited random image in [0.05, 0.95]. Bilinear demosaicking is the
// only lossy stage of the round trip, and it is exact only well below the
// mosaic's Nyquist limit, so inputs are smooth sinusoid mixtures.
io::RgbImage smooth_image(int h, int w, Rng& rng) {
  double f[3][5];
  for (auto& row : f)
    for (auto& v : row) v = rng.uniform(0, 1);
  io::RgbImage img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double t = 0.5 + 0.25 * std::sin(f[c][0] * 6 * y / h + f[c][1] * 6 * x / w + 6 * f[c][2]) +
                         0.25 * std::cos(f[c][3] * 5 * (x + y) / w + 6 * f[c][4]);
        img.at(y, x, c) = 0.05 + 0.9 * t;
      }
  return img;
}

Outcome isp_round_trip() {
  const auto presets = isp::make_device_styles(3, 11);
  io::RawMeta meta;
  meta.black_level = 256;
  meta.white_level = 16383;
  Rng rng(22);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const isp::DevicePreset& p = presets[i % 3];
    meta.wb_gains = {rng.uniform(1.7, 2.4), 1.0, 1.0, rng.uniform(1.4, 2.1)};
    io::RgbImage y = smooth_image(48, 64, rng);
    // A styled preset can only reproduce colours inside its own gamut, so its
    // inputs are renditions of linear content.
    if (p.device_id != 0) {
      y.colorspace = "linear";
      for (auto& v : y.pixels) v *= 0.8;
      y = isp::apply_style(y, p.style);
    }
    const io::RawImage raw = isp::inverse_isp(y, p.style, meta, {}, i);
    const io::RgbImage back = isp::forward_isp(raw, p.style);
    double err = 0;
    int n = 0;
    for (int yy = 2; yy < y.height - 2; ++yy)
      for (int xx = 2; xx < y.width - 2; ++xx)
        for (int c = 0; c < 3; ++c, ++n) err += std::fabs(back.at(yy, xx, c) - y.at(yy, xx, c));
    worst = std::max(worst, err / n);
  }
  return {worst < 1.0 / 255, "worst mean abs error " + fmt("%.3e", worst) + " (limit " + fmt("%.3e", 1.0 / 255) +
                                 ") over 50 images"};
}

// ---------------------------------------------------------------------------
// 3. Gradient suite

Outcome gradient_suite() {
  const auto results = train::grad_suite(nn::ModelConfig::toy(3), {"all"});
  int failed = 0;
  std::string worst_block;
  double worst_ratio = 0;
  for (const auto& r : results) {
    std::printf("      %-18s max_rel_err %.2e  tol %.0e  %6.1fs  %s\n", r.block.c_str(), r.max_rel_err, r.tolerance,
                r.seconds, r.pass() ? "ok" : "FAIL");
    failed += !r.pass();
    if (r.max_rel_err / r.tolerance > worst_ratio) worst_ratio = r.max_rel_err / r.tolerance, worst_block = r.block;
  }
  return {failed == 0, std::to_string(results.size()) + " blocks, " + std::to_string(failed) +
                           " failed; closest to its limit: " + worst_block + " at " + fmt("%.2f", worst_ratio) +
                           " of tolerance"};
}

// ---------------------------------------------------------------------------
// 4. Wavelet exactness

Outcome wavelet() {
  Rng rng(44);
  double worst_id = 0, worst_iso = 0;
  for (int i = 0; i < 20; ++i) {
    const int n = static_cast<int>(rng.uniform_int(1, 3)), c = static_cast<int>(rng.uniform_int(1, 8));
    const int h = 2 * static_cast<int>(rng.uniform_int(1, 16)), w = 2 * static_cast<int>(rng.uniform_int(1, 16));
    const Tensor x = testing::random_tensor({n, c, h, w}, rng);
    const Tensor d = ag::dwt_haar(ag::constant(x)).value();
    const Tensor back = ag::idwt_haar(ag::constant(d)).value();
    worst_id = std::max(worst_id, testing::max_abs_diff(back, x));
    double n0 = 0, n1 = 0;
    for (double v : x.vec()) n0 += v * v;
    for (double v : d.vec()) n1 += v * v;
    worst_iso = std::max(worst_iso, std::fabs(std::sqrt(n0) - std::sqrt(n1)) / std::sqrt(n0));
  }
  return {worst_id < 1e-6 && worst_iso < 1e-6,
          "identity error " + fmt("%.1e", worst_id) + ", relative norm change " + fmt("%.1e", worst_iso)};
}

// ---------------------------------------------------------------------------
// 5. Metric correctness

Outcome metrics() {
  Rng rng(55);
  const Tensor x = testing::random_tensor({3, 24, 24}, rng, 0, 1);
  const Tensor x4 = x.reshaped({1, 3, 24, 24});
  const double s = loss::ssim(x4, x4);
  Tensor a(Shape{3, 8, 8}, 0.3), b(Shape{3, 8, 8}, 0.4);  // MSE exactly 0.01 up to rounding
  const double p = loss::psnr(a, b);
  const double bw = loss::delta_e(Tensor(Shape{3, 4, 4}, 0.0), Tensor(Shape{3, 4, 4}, 1.0));
  double worst = 0;
  for (const auto& pair : testing::kCiedePairs) {
    const double lib = color::ciede2000(pair.a, pair.b);
    worst = std::max({worst, std::fabs(lib - testing::oracle_ciede2000(pair.a, pair.b)), std::fabs(lib - pair.expected)});
  }
  const double first = color::ciede2000({50, 2.6772, -79.7751}, {50, 0, -82.7485});
  const bool ok = std::fabs(s - 1.0) < 1e-12 && std::fabs(p - 20.0) < 1e-9 && std::fabs(bw - 100.0) < 1e-6 &&
                  worst < 1e-4;
  return {ok, "SSIM(x,x)=" + fmt("%.12f", s) + ", PSNR=" + fmt("%.9f", p) + " dB, black/white dE=" +
                  fmt("%.6f", bw) + ", first pair " + fmt("%.4f", first) + ", worst pair error " + fmt("%.1e", worst)};
}

// ---------------------------------------------------------------------------
// 6 and 7. Desk-scale training

struct DeskRun {
  train::EvalResult eval;
  double seconds = 0;
  size_t params = 0;
};

class DeskBench {
 public:
  const data::Dataset& dataset() {
    if (!ds_) {
      const fs::path dir = testing::scratch_dir("accept_desk");
      data::SynthConfig c;  // 60 scenes, K = 3, checker distance >= 5
      ds_.emplace(data::load_dataset(data::build_synth_dataset(c, dir)));
      const auto presets = isp::presets_from_json(json::parse(io::read_text_file(dir / "presets.json")));
      min_distance_ = 1e9;
      for (size_t i = 0; i < presets.size(); ++i)
        for (size_t j = i + 1; j < presets.size(); ++j)
          min_distance_ = std::min(min_distance_, isp::checker_distance(presets[i], presets[j]));
    }
    return *ds_;
  }
  double min_checker_distance() {
    dataset();
    return min_distance_;
  }

  // Toy model, 30 epochs. The full-scale learning rate of 1e-4 barely moves
  // the toy network in 720 steps; 1e-3 is the desk-scale setting.
  static train::TrainConfig config() {
    train::TrainConfig t;
    t.epochs = 30;
    t.lr = 1e-3;
    t.val_every = 0;
    return t;
  }

  const DeskRun& run(char row, bool conditioned) {
    const std::string key = std::string(1, row) + (conditioned ? "c" : "u");
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    nn::ModelConfig m = nn::ModelConfig::ablation(row, nn::ModelConfig::toy(3));
    m.conditioned = conditioned;
    const auto t0 = std::chrono::steady_clock::now();
    train::Trainer t(m, config());
    t.run(dataset());
    DeskRun r;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.eval = train::evaluate(t.network(), dataset());
    r.params = t.network().param_count();
    std::printf("      run %c %s: %.1fs, mean PSNR %.2f dB, style accuracy %.3f, pairwise dE %.2f\n", row,
                conditioned ? "conditioned" : "unconditioned", r.seconds, r.eval.report.mean_psnr(),
                r.eval.style_accuracy, r.eval.mean_pairwise_delta_e);
    std::fflush(stdout);
    return runs_.emplace(key, std::move(r)).first->second;
  }

 private:
  std::optional<data::Dataset> ds_;
  double min_distance_ = 0;
  std::map<std::string, DeskRun> runs_;
};

Outcome multi_style(DeskBench& bench) {
  const double dist = bench.min_checker_distance();
  const DeskRun& cond = bench.run('E', true);
  const DeskRun& base = bench.run('E', false);
  const double gain = cond.eval.report.mean_psnr() - base.eval.report.mean_psnr();
  const bool ok = dist >= 5.0 && gain >= 2.0 && cond.eval.style_accuracy >= 0.95 &&
                  cond.eval.mean_pairwise_delta_e >= 1.0 && cond.seconds <= 1800 && base.seconds <= 1800;
  return {ok, "PSNR gain " + fmt("%.2f", gain) + " dB (>= 2), style accuracy " + fmt("%.3f", cond.eval.style_accuracy) +
                  " (>= 0.95), pairwise dE " + fmt("%.2f", cond.eval.mean_pairwise_delta_e) + " (>= 1), checker dE " +
                  fmt("%.2f", dist) + " (>= 5), train " + fmt("%.0f", cond.seconds) + "s + " +
                  fmt("%.0f", base.seconds) + "s"};
}

Outcome ablation(DeskBench& bench) {
  size_t previous = 0;
  bool increasing = true;
  std::string counts;
  for (char row = 'A'; row <= 'E'; ++row) {
    const size_t n = nn::param_count(nn::ModelConfig::ablation(row, nn::ModelConfig::toy(3)));
    increasing = increasing && n > previous;
    previous = n;
    counts += std::string(counts.empty() ? "" : " < ") + std::to_string(n);
  }
  const double e = bench.run('E', true).eval.report.mean_psnr();
  const double a = bench.run('A', true).eval.report.mean_psnr();
  return {increasing && e >= a, "PSNR E " + fmt("%.2f", e) + " dB vs A " + fmt("%.2f", a) + " dB; params " + counts};
}

// ---------------------------------------------------------------------------
// 8. Parameter budget

Outcome budget() {
  const size_t total = nn::param_count(nn::ModelConfig::full(3));
  const size_t xcit = nn::param_breakdown(nn::ModelConfig::full(3)).at("xcit");
  const bool ok = total >= 5'800'000 && total <= 7'000'000 && xcit >= 1'250'000 && xcit <= 1'550'000;
  return {ok, "full model " + std::to_string(total) + " parameters (5.8M..7.0M), global semantics " +
                  std::to_string(xcit) + " (1.25M..1.55M)"};
}

// ---------------------------------------------------------------------------
// 9. Conditioning contracts

nn::ModelConfig tiny_model() {
  nn::ModelConfig m = nn::ModelConfig::toy(3);
  m.widths = {8, 16, 32};
  m.bottleneck_width = 32;
  m.bottleneck_inner = 16;
  m.embed_dim = 16;
  m.xcit.dim = 16;
  m.xcit.blocks = 1;
  m.xcit.class_blocks = 1;
  m.xcit.input_size = 32;
  m.illum_width = 8;
  return m;
}

train::TrainConfig tiny_train() {
  train::TrainConfig t;
  t.epochs = 2;
  t.lr = 1e-3;
  t.batch_size = 4;
  t.sampler.patch = 16;
  t.sampler.crop = 32;
  t.val_every = 0;
  return t;
}

Outcome conditioning() {
  data::SynthConfig c;
  c.num_scenes = 6;
  c.height = c.width = 64;
  c.splits = {4.0 / 6, 1.0 / 6, 1.0 / 6};
  const data::Dataset ds = data::load_dataset(data::build_synth_dataset(c, testing::scratch_dir("accept_cond")));
  train::Trainer pre(tiny_model(), tiny_train());
  pre.run(ds);
  const nn::Network& net = pre.network();
  const data::SceneData& sd = ds.scenes[0];

  // Embedding interpolation at t = 0 and t = 1 against one-hot inference.
  nn::ForwardInput in;
  in.x = ag::constant(sd.packed.reshaped({1, 4, sd.packed.dim(1), sd.packed.dim(2)}));
  in.full = in.x.value();
  in.wb = Tensor(Shape{1, 4}, std::vector<double>(sd.meta.wb_gains.begin(), sd.meta.wb_gains.end()));
  in.iso = {sd.meta.iso};
  in.exposure_s = {sd.meta.exposure_s};
  bool endpoints = true;
  {
  ag::NoGradGuard no_grad;
  for (auto [from, to] : {std::pair{0, 1}, std::pair{2, 0}}) {
    const Tensor ea = net.embed_device(Tensor(Shape{1, 3}, {from == 0 ? 1.0 : 0, from == 1 ? 1.0 : 0, from == 2 ? 1.0 : 0})).value();
    const Tensor eb = net.embed_device(Tensor(Shape{1, 3}, {to == 0 ? 1.0 : 0, to == 1 ? 1.0 : 0, to == 2 ? 1.0 : 0})).value();
    for (double t : {0.0, 1.0}) {
      Tensor e = ea;
      for (size_t i = 0; i < e.numel(); ++i) e[i] = (1 - t) * ea[i] + t * eb[i];
      const Tensor y = net.forward_with_embedding(in, ag::constant(e), nn::Mode::kEval).y.value();
      std::vector<double> w(3, 0.0);
      w[t == 0.0 ? from : to] = 1.0;
      const Tensor ref = train::render(net, sd.packed, sd.meta, w);
      endpoints = endpoints && y.vec() == ref.vec();
    }
  }
  }

  // Finetuning with frozen statistics.
  train::TrainConfig ft = tiny_train();
  ft.freeze_norm_stats = true;
  train::Trainer fin = train::Trainer::from_pretrained(pre.to_checkpoint(), ft);
  fin.run(ds);
  bool frozen = !net.buffers().empty();
  bool moved = false;
  for (const auto& [name, v] : net.buffers()) frozen = frozen && fin.network().buffers().at(name).vec() == v.vec();
  for (const auto& [name, v] : net.params()) moved = moved || fin.network().param(name).value().vec() != v.value().vec();

  // Learned white balance.
  nn::ModelConfig lw = tiny_model();
  lw.pipeline = "learned-wb";
  train::Trainer lt(lw, tiny_train());
  lt.run(ds);
  bool greens = true;
  ag::NoGradGuard no_grad;
  for (int d = 0; d < 3; ++d) {
    std::vector<double> w(3, 0.0);
    w[d] = 1.0;
    in.device_weights = Tensor(Shape{1, 3}, w);
    const Tensor wb = lt.network().forward(in, nn::Mode::kEval).aux.wb_used.value();
    greens = greens && wb[1] == 1.0 && wb[2] == 1.0 && wb[0] > 0 && wb[3] > 0;
  }
  return {endpoints && frozen && moved && greens,
          std::string("interpolation endpoints ") + (endpoints ? "bitwise equal" : "DIFFER") + ", frozen statistics " +
              (frozen ? "unchanged" : "CHANGED") + (moved ? "" : " (weights did not move)") + ", learned WB greens " +
              (greens ? "exactly 1" : "NOT 1")};
}

// ---------------------------------------------------------------------------
// 10. Alignment suite

double oracle_sample(const Tensor& img, int c, double x, double y, double* inside) {
  const int h = img.dim(1), w = img.dim(2);
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double ax = x - x0, ay = y - y0;
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1}, ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  double s = 0, in = 0;
  for (int k = 0; k < 4; ++k)
    if (xs[k] >= 0 && xs[k] < w && ys[k] >= 0 && ys[k] < h) {
      s += ws[k] * img[(static_cast<size_t>(c) * h + ys[k]) * w + xs[k]];
      in += ws[k];
    }
  if (inside) *inside = in;
  return s;
}

io::RgbImage shifted_scene(int dy, int dx, uint64_t seed) {
  io::FlowField shift(64, 64, static_cast<float>(-dx), static_cast<float>(-dy));
  return data::Scene(seed, 64, 64, 1.0).render(&shift);
}

double median(std::vector<float> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

Outcome alignment() {
  Rng rng(10);
  // Zero flow.
  bool identity = true;
  for (int i = 0; i < 10; ++i) {
    const int h = static_cast<int>(rng.uniform_int(2, 30)), w = static_cast<int>(rng.uniform_int(2, 30));
    const Tensor img = testing::random_tensor({3, h, w}, rng);
    const align::Warped out = align::warp_bilinear(img, io::FlowField(h, w));
    identity = identity && out.image.vec() == img.vec() &&
               std::all_of(out.mask.vec().begin(), out.mask.vec().end(), [](double m) { return m == 1.0; });
  }

  // Pure translations: dst(p) = src(p - s), so the flow is s.
  int exact = 0, cases = 0;
  for (int dy = -3; dy <= 3; dy += 3)
    for (int dx = -3; dx <= 3; dx += 2) {
      const io::RgbImage src = shifted_scene(0, 0, 70 + cases), dst = shifted_scene(dy, dx, 70 + cases);
      const io::FlowField f = align::flow_block_match(src, dst);
      exact += median(f.u) == dx && median(f.v) == dy;
      ++cases;
    }

  // Occlusion mask against an exhaustive per-pixel oracle.
  int mismatches = 0, checked = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const int h = 24, w = 28;
    const io::FlowField fwd = data::smooth_random_flow(h, w, 3.0, 6.0, seed);
    io::FlowField bwd = data::smooth_random_flow(h, w, 1.5, 6.0, seed + 100);
    for (size_t i = 0; i < bwd.u.size(); ++i) {
      bwd.u[i] -= fwd.u[i];
      bwd.v[i] -= fwd.v[i];
    }
    const Tensor m = align::occlusion_mask(fwd, bwd, 1.0, align::kDefaultValidity);
    Tensor bt({2, h, w});
    for (int i = 0; i < h * w; ++i) bt[i] = bwd.u[i], bt[h * w + i] = bwd.v[i];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++checked) {
        const double sx = x + double(fwd.u_at(y, x)), sy = y + double(fwd.v_at(y, x));
        double inside;
        const double ru = fwd.u_at(y, x) + oracle_sample(bt, 0, sx, sy, &inside);
        const double rv = fwd.v_at(y, x) + oracle_sample(bt, 1, sx, sy, nullptr);
        const bool ok = inside >= align::kDefaultValidity && std::sqrt(ru * ru + rv * rv) <= 1.0;
        mismatches += m[y * w + x] != (ok ? 1.0 : 0.0);
      }
  }
  return {identity && exact == cases && mismatches == 0,
          std::string("zero-flow identity ") + (identity ? "exact" : "BROKEN") + ", translations recovered " +
              std::to_string(exact) + "/" + std::to_string(cases) + ", occlusion mismatches " +
              std::to_string(mismatches) + "/" + std::to_string(checked)};
}

// ---------------------------------------------------------------------------
// 11. Determinism

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "devisp");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::printf("      command failed: %s\n", err.str().c_str());
  return code;
}

Outcome determinism() {
  const fs::path root = testing::scratch_dir("accept_determinism");
  io::write_text_file(root / "config.json", json{{"train", {{"epochs", 2}, {"lr", 1e-3}, {"seed", 3}}}}.dump());
  const std::string cfg = (root / "config.json").string();
  std::vector<std::string> ckpts, reports, logs;
  for (const char* name : {"a", "b"}) {
    const fs::path d = root / name;
    if (cli({"synth-data", "--config", cfg, "--out", (d / "ds").string()}) ||
        cli({"train", "--config", cfg, "--data", (d / "ds/manifest.jsonl").string(), "--out", (d / "run").string()}) ||
        cli({"eval", "--config", cfg, "--data", (d / "ds/manifest.jsonl").string(), "--checkpoint",
             (d / "run/last.ckpt").string(), "--out", (d / "eval").string()}))
      return {false, "pipeline command failed"};
    ckpts.push_back(io::read_text_file(d / "run/last.ckpt"));
    reports.push_back(io::read_text_file(d / "eval/report.json"));
    logs.push_back(io::read_text_file(d / "run/log.jsonl"));
  }
  const bool ok = ckpts[0] == ckpts[1] && reports[0] == reports[1] && logs[0] == logs[1];
  return {ok, std::string("checkpoints ") + (ckpts[0] == ckpts[1] ? "identical" : "DIFFER") + ", reports " +
                  (reports[0] == reports[1] ? "identical" : "DIFFER") + ", logs " +
                  (logs[0] == logs[1] ? "identical" : "DIFFER")};
}

}  // namespace
}  // namespace devisp

int main(int argc, char** argv) {
  using namespace devisp;
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  DeskBench bench;
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "format round trips", 60, formats},
      {2, "reference ISP round trip", 60, isp_round_trip},
      {3, "gradient suite", 600, gradient_suite},
      {4, "wavelet exactness", 10, wavelet},
      {5, "metric correctness", 10, metrics},
      {6, "multi-style desk-scale training", 3600, [&] { return multi_style(bench); }},
      {7, "ablation ordering", 3600, [&] { return ablation(bench); }},
      {8, "parameter budget", 1, budget},
      {9, "conditioning contracts", 60, conditioning},
      {10, "alignment suite", 60, alignment},
      {11, "determinism", 300, determinism},
  };
  int failed = 0, ran = 0;
  std::vector<std::string> lines;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    std::printf("[....] %2d %s\n", c.id, c.name);
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // Criterion 7 reuses the training runs of criterion 6; 6 carries its own
    // per-run budget check.
    if (s > c.limit_s && c.id != 6 && c.id != 7) {
      o.pass = false;
      o.detail += "; took " + fmt("%.1f", s) + "s, limit " + fmt("%.0f", c.limit_s) + "s";
    }
    char line[1024];
    std::snprintf(line, sizeof(line), "[%s] %2d %-32s %7.1fs  %s", o.pass ? "PASS" : "FAIL", c.id, c.name, s,
                  o.detail.c_str());
    std::printf("%s\n", line);
    std::fflush(stdout);
    lines.push_back(line);
    failed += !o.pass;
    ++ran;
  }
  std::printf("\nsummary\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
