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

#include "devisp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>

#include "devisp/color.hpp"

namespace devisp::data {
namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return splitmix(splitmix(splitmix(seed ^ splitmix(a)) ^ b) ^ c);
}

double smooth5(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

// Soft inside-ness for a signed distance (negative inside), ~1 px wide.
double coverage(double d) { return 1.0 / (1.0 + std::exp(d / 0.5)); }

std::string scene_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", i);
  return buf;
}

// Bilinear lookup of one flow component with edge replication.
double sample_clamped(const std::vector<float>& c, int h, int w, double x, double y) {
  x = std::clamp(x, 0.0, w - 1.0);
  y = std::clamp(y, 0.0, h - 1.0);
  const int x0 = std::min(static_cast<int>(x), w - 1), y0 = std::min(static_cast<int>(y), h - 1);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double ax = x - x0, ay = y - y0;
  auto at = [&](int yy, int xx) { return static_cast<double>(c[static_cast<size_t>(yy) * w + xx]); };
  return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
}

void blur_separable(std::vector<double>& f, int h, int w, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(f.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * f[static_cast<size_t>(y) * w + reflect(x + i, w)];
      tmp[static_cast<size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[static_cast<size_t>(reflect(y + i, h)) * w + x];
      f[static_cast<size_t>(y) * w + x] = acc;
    }
}

// Scene backed by a user image: bilinear lookup of a centre crop scaled to
// the target size, edges replicated.
class ImageScene {
 public:
  ImageScene(RgbImage img, int h, int w) : img_(std::move(img)) {
    scale_ = std::min(static_cast<double>(img_.height) / h, static_cast<double>(img_.width) / w);
    oy_ = 0.5 * (img_.height - scale_ * h);
    ox_ = 0.5 * (img_.width - scale_ * w);
  }
  RgbImage render(int h, int w, const FlowField* disp) const {
    RgbImage out(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double qx = x, qy = y;
        if (disp) qx += disp->u_at(y, x), qy += disp->v_at(y, x);
        const double sx = std::clamp(ox_ + (qx + 0.5) * scale_ - 0.5, 0.0, img_.width - 1.0);
        const double sy = std::clamp(oy_ + (qy + 0.5) * scale_ - 0.5, 0.0, img_.height - 1.0);
        const int x0 = std::min(static_cast<int>(sx), img_.width - 1), y0 = std::min(static_cast<int>(sy), img_.height - 1);
        const int x1 = std::min(x0 + 1, img_.width - 1), y1 = std::min(y0 + 1, img_.height - 1);
        const double ax = sx - x0, ay = sy - y0;
        for (int c = 0; c < 3; ++c) {
          const double v = (1 - ay) * ((1 - ax) * img_.at(y0, x0, c) + ax * img_.at(y0, x1, c)) +
                           ay * ((1 - ax) * img_.at(y1, x0, c) + ax * img_.at(y1, x1, c));
          out.at(y, x, c) = std::clamp(v, 0.03, 0.97);
        }
      }
    return out;
  }

 private:
  RgbImage img_;
  double scale_, oy_, ox_;
};

}  // namespace

// ---------------------------------------------------------------------------
// SynthConfig

void SynthConfig::validate() const {
  require(num_scenes >= 1, "config", "num_scenes must be at least 1");
  require(num_devices >= 2, "config", "num_devices must be at least 2");
  require(height > 0 && width > 0 && height % 2 == 0 && width % 2 == 0, "config",
          "height and width must be positive and even");
  require(max_flow >= 0, "config", "max_flow must be non-negative");
  require(flow_smoothness > 0, "config", "flow_smoothness must be positive");
  require(shot_gain >= 0 && read_sigma >= 0, "config", "noise parameters must be non-negative");
  require(black_level >= 0 && white_level > black_level && white_level <= 65535, "config",
          "levels must satisfy 0 <= black_level < white_level <= 65535");
  require(texture >= 0, "config", "texture must be non-negative");
  double s = 0;
  for (double f : splits) {
    require(f >= 0, "config", "split fractions must be non-negative");
    s += f;
  }
  require(std::fabs(s - 1.0) < 1e-9, "config", "split fractions must sum to 1");
}

json SynthConfig::to_json() const {
  return {{"source_dir", source_dir},   {"num_scenes", num_scenes},
          {"height", height},           {"width", width},
          {"num_devices", num_devices}, {"max_flow", max_flow},
          {"flow_smoothness", flow_smoothness}, {"shot_gain", shot_gain},
          {"read_sigma", read_sigma},   {"black_level", black_level},
          {"white_level", white_level}, {"min_style_distance", min_style_distance},
          {"texture", texture},         {"seed", seed},
          {"style_seed", style_seed},   {"splits", splits}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  require(j.is_object(), "config", "synth config must be a JSON object");
  SynthConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "source_dir") c.source_dir = v.get<std::string>();
    else if (k == "num_scenes") c.num_scenes = v.get<int>();
    else if (k == "height") c.height = v.get<int>();
    else if (k == "width") c.width = v.get<int>();
    else if (k == "num_devices") c.num_devices = v.get<int>();
    else if (k == "max_flow") c.max_flow = v.get<double>();
    else if (k == "flow_smoothness") c.flow_smoothness = v.get<double>();
    else if (k == "shot_gain") c.shot_gain = v.get<double>();
    else if (k == "read_sigma") c.read_sigma = v.get<double>();
    else if (k == "black_level") c.black_level = v.get<int>();
    else if (k == "white_level") c.white_level = v.get<int>();
    else if (k == "min_style_distance") c.min_style_distance = v.get<double>();
    else if (k == "texture") c.texture = v.get<double>();
    else if (k == "seed") c.seed = v.get<uint64_t>();
    else if (k == "style_seed") c.style_seed = v.get<uint64_t>();
    else if (k == "splits") c.splits = v.get<std::array<double, 3>>();
    else fail("config", "unknown synth config key '" + k + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Procedural scenes

Scene::Scene(uint64_t seed, int height, int width, double texture)
    : height_(height), width_(width), seed_(seed), texture_(texture) {
  Rng rng(seed);
  for (int c = 0; c < 3; ++c) c0_[c] = rng.uniform(0.1, 0.9);
  for (int c = 0; c < 3; ++c) c1_[c] = rng.uniform(0.1, 0.9);
  const double t = rng.uniform(0.0, 2 * M_PI);
  dir_x_ = std::cos(t);
  dir_y_ = std::sin(t);
  hue_shift_ = rng.uniform(0.05, 0.2);

  const auto& checker = isp::color_checker_linear();
  auto checker_srgb = [&](int i) {
    std::array<double, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = color::linear_to_srgb(checker[i][k]);
    return c;
  };
  const double s = std::min(height, width);
  const int n = static_cast<int>(rng.uniform_int(4, 8));
  for (int i = 0; i < n; ++i) {
    Shape sh{};
    sh.kind = static_cast<int>(rng.uniform_int(0, 1));
    sh.cx = rng.uniform(0.0, width);
    sh.cy = rng.uniform(0.0, height);
    sh.a = rng.uniform(0.06, 0.22) * s;
    sh.b = rng.uniform(0.06, 0.22) * s;
    sh.angle = rng.uniform(0.0, M_PI);
    if (rng.coin()) {
      sh.color = checker_srgb(static_cast<int>(rng.uniform_int(0, 23)));
      for (double& v : sh.color) v = std::clamp(v + rng.uniform(-0.05, 0.05), 0.05, 0.95);
    } else {
      for (double& v : sh.color) v = rng.uniform(0.05, 0.95);
    }
    shapes_.push_back(sh);
  }
  // A colour chart: dark board plus 6×4 patches, rotated as a whole.
  if (rng.uniform() < 0.6) {
    const double cell = rng.uniform(0.05, 0.08) * s;
    const double cx = rng.uniform(0.3, 0.7) * width, cy = rng.uniform(0.3, 0.7) * height;
    const double ang = rng.uniform(-0.3, 0.3);
    shapes_.push_back({1, cx, cy, 3.1 * cell, 2.1 * cell, ang, {0.12, 0.12, 0.12}});
    const double ca = std::cos(ang), sa = std::sin(ang);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 6; ++c) {
        const double lx = (c - 2.5) * cell, ly = (r - 1.5) * cell;
        shapes_.push_back({1, cx + ca * lx - sa * ly, cy + sa * lx + ca * ly, 0.4 * cell, 0.4 * cell, ang,
                           checker_srgb(r * 6 + c)});
      }
  }
}

double Scene::noise(double x, double y) const {
  static constexpr double kSpacing[3] = {24.0, 12.0, 7.0};
  static constexpr double kAmp[3] = {0.55, 0.3, 0.15};
  double out = 0;
  for (int o = 0; o < 3; ++o) {
    const double fx = x / kSpacing[o], fy = y / kSpacing[o];
    const double ix = std::floor(fx), iy = std::floor(fy);
    const double tx = smooth5(fx - ix), ty = smooth5(fy - iy);
    auto lattice = [&](double a, double b) {
      const uint64_t h = derive(seed_, o + 1, static_cast<uint64_t>(static_cast<int64_t>(a)),
                                static_cast<uint64_t>(static_cast<int64_t>(b)));
      return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
    };
    const double v = (1 - ty) * ((1 - tx) * lattice(ix, iy) + tx * lattice(ix + 1, iy)) +
                     ty * ((1 - tx) * lattice(ix, iy + 1) + tx * lattice(ix + 1, iy + 1));
    out += kAmp[o] * v;
  }
  return out;
}

std::array<double, 3> Scene::eval(double x, double y) const {
  const double s = std::min(height_, width_);
  const double t =
      std::clamp(0.5 + ((x - 0.5 * width_) * dir_x_ + (y - 0.5 * height_) * dir_y_) / s, 0.0, 1.0);
  std::array<double, 3> c{};
  const double n = texture_ > 0 ? noise(x, y) : 0.0;
  const double n2 = texture_ > 0 ? noise(x + 997.0, y - 331.0) : 0.0;
  for (int k = 0; k < 3; ++k) {
    c[k] = c0_[k] + (c1_[k] - c0_[k]) * t;
    c[k] *= 1.0 + 0.35 * texture_ * n + (k == 0 ? 1 : k == 2 ? -1 : 0) * hue_shift_ * texture_ * n2;
  }
  for (const auto& sh : shapes_) {
    const double dx = x - sh.cx, dy = y - sh.cy;
    double d;
    if (sh.kind == 0) {
      d = std::hypot(dx / sh.a, dy / sh.b) * std::min(sh.a, sh.b) - std::min(sh.a, sh.b);
    } else {
      const double ca = std::cos(sh.angle), sa = std::sin(sh.angle);
      const double lx = ca * dx + sa * dy, ly = -sa * dx + ca * dy;
      d = std::max(std::fabs(lx) - sh.a, std::fabs(ly) - sh.b);
    }
    if (d > 4.0) continue;
    const double a = coverage(d);
    for (int k = 0; k < 3; ++k) {
      const double v = sh.color[k] * (1.0 + 0.08 * texture_ * n);
      c[k] += a * (v - c[k]);
    }
  }
  for (double& v : c) v = std::clamp(v, 0.03, 0.97);
  return c;
}

RgbImage Scene::render(const FlowField* disp) const {
  require(!disp || (disp->height == height_ && disp->width == width_), "shape",
          "displacement field does not match the scene size");
  RgbImage out(height_, width_);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x) {
      double qx = x, qy = y;
      if (disp) qx += disp->u_at(y, x), qy += disp->v_at(y, x);
      const auto c = eval(qx, qy);
      for (int k = 0; k < 3; ++k) out.at(y, x, k) = c[k];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Flows

FlowField smooth_random_flow(int height, int width, double max_magnitude, double smoothness, uint64_t seed) {
  require(height > 0 && width > 0, "shape", "flow size must be positive");
  FlowField f(height, width);
  if (max_magnitude <= 0) return f;
  Rng rng(seed);
  const size_t n = static_cast<size_t>(height) * width;
  std::vector<double> u(n), v(n);
  for (size_t i = 0; i < n; ++i) u[i] = rng.normal();
  for (size_t i = 0; i < n; ++i) v[i] = rng.normal();
  blur_separable(u, height, width, smoothness);
  blur_separable(v, height, width, smoothness);
  double peak = 0;
  for (size_t i = 0; i < n; ++i) peak = std::max(peak, std::hypot(u[i], v[i]));
  if (peak <= 0) return f;
  const double s = max_magnitude / peak;
  for (size_t i = 0; i < n; ++i) {
    f.u[i] = static_cast<float>(u[i] * s);
    f.v[i] = static_cast<float>(v[i] * s);
  }
  return f;
}

FlowField invert_flow(const FlowField& f, int iterations) {
  const int h = f.height, w = f.width;
  FlowField g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gu = -f.u_at(y, x), gv = -f.v_at(y, x);
      for (int it = 0; it < iterations; ++it) {
        const double nu = -sample_clamped(f.u, h, w, x + gu, y + gv);
        const double nv = -sample_clamped(f.v, h, w, x + gu, y + gv);
        gu = nu;
        gv = nv;
      }
      g.u_at(y, x) = static_cast<float>(gu);
      g.v_at(y, x) = static_cast<float>(gv);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Dataset synthesis

Manifest build_synth_dataset(const SynthConfig& cfg, const io::fs::path& out) {
  cfg.validate();
  std::vector<io::fs::path> sources;
  if (!cfg.source_dir.empty()) {
    require(io::fs::is_directory(cfg.source_dir), "io", "source directory not found: " + cfg.source_dir);
    for (const auto& e : io::fs::directory_iterator(cfg.source_dir))
      if (e.is_regular_file() && e.path().extension() == ".ppm") sources.push_back(e.path());
    std::sort(sources.begin(), sources.end());
    require(!sources.empty(), "io", "source directory has no .ppm images: " + cfg.source_dir);
    if (static_cast<int>(sources.size()) > cfg.num_scenes) sources.resize(cfg.num_scenes);
  }
  const int n = sources.empty() ? cfg.num_scenes : static_cast<int>(sources.size());
  const int K = cfg.num_devices;
  const auto presets = isp::make_device_styles(K, cfg.style_seed, cfg.min_style_distance);

  io::fs::create_directories(out / "raw");
  io::fs::create_directories(out / "gt");
  io::fs::create_directories(out / "flow");

  // Split assignment: a seeded permutation cut at the cumulative fractions.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(derive(cfg.seed, 0x5b11));
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[split_rng.uniform_int(0, i)]);
  std::vector<std::string> split(n);
  const int n_train = static_cast<int>(std::lround(cfg.splits[0] * n));
  const int n_val = std::min(n - n_train, static_cast<int>(std::lround(cfg.splits[1] * n)));
  for (int i = 0; i < n; ++i) split[order[i]] = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";

  std::vector<std::vector<io::ManifestRecord>> per_scene(n);
  std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      Rng rng(derive(cfg.seed, 0x5ce7e, i));
      io::RawMeta meta;
      meta.black_level = cfg.black_level;
      meta.white_level = cfg.white_level;
      const double r_gain = rng.uniform(1.7, 2.4), b_gain = rng.uniform(1.4, 2.1);
      meta.wb_gains = {r_gain, 1.0, 1.0, b_gain};
      meta.iso = std::round(std::exp(rng.uniform(std::log(50.0), std::log(3200.0))));
      meta.exposure_s = std::exp(rng.uniform(std::log(1.0 / 500), std::log(1.0 / 15)));
      meta.device_id = 0;

      std::optional<Scene> scene;
      std::optional<ImageScene> image;
      if (sources.empty()) scene.emplace(derive(cfg.seed, 0x5ce7e, i, 1), cfg.height, cfg.width, cfg.texture);
      else image.emplace(io::read_rgb(sources[i]), cfg.height, cfg.width);
      auto render = [&](const FlowField* disp) {
        return scene ? scene->render(disp) : image->render(cfg.height, cfg.width, disp);
      };

      const auto identity = isp::StyleParams::identity();
      const double gain = meta.iso / 100.0;
      const isp::NoiseParams noise{cfg.shot_gain * gain, cfg.read_sigma * gain};
      const io::RgbImage source = render(nullptr);
      const io::RawImage raw = isp::inverse_isp(source, identity, meta, noise, derive(cfg.seed, 0x4a3, i));
      const io::RawImage clean = isp::inverse_isp(source, identity, meta, {}, 0);
      const std::string name = scene_name(i);
      io::write_raw(raw, out / "raw" / (name + ".pgm"));

      for (int d = 0; d < K; ++d) {
        std::array<double, 4> wb{};
        for (int c = 0; c < 4; ++c) wb[c] = meta.wb_gains[c] * presets[d].wb_bias[c];
        FlowField flow(cfg.height, cfg.width);
        io::RawImage capture = clean;
        if (d != 0) {
          flow = smooth_random_flow(cfg.height, cfg.width, cfg.max_flow, cfg.flow_smoothness,
                                    derive(cfg.seed, 0xf10, i, d));
          const FlowField disp = invert_flow(flow);
          capture = isp::inverse_isp(render(&disp), identity, meta, {}, 0);
        }
        const RgbImage gt = isp::forward_isp(capture, presets[d].style, wb);
        const std::string stem = name + "_d" + std::to_string(d);
        io::write_rgb(gt, out / "gt" / (stem + ".ppm"));
        io::write_flow(flow, out / "flow" / (stem + ".flo"));
        io::ManifestRecord rec;
        rec.scene_id = i;
        rec.device_id = d;
        rec.raw_path = "raw/" + name + ".pgm";
        rec.rgb_path = "gt/" + stem + ".ppm";
        rec.flow_path = "flow/" + stem + ".flo";
        rec.split = split[i];
        rec.wb_gt = wb;
        per_scene[i].push_back(rec);
      }
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (int i = 0; i < n; ++i)
    require(errors[i].empty(), "io", "scene " + std::to_string(i) + ": " + errors[i]);

  Manifest m;
  m.dir = out;
  for (auto& recs : per_scene)
    for (auto& r : recs) m.records.push_back(std::move(r));
  io::write_manifest(m, out / "manifest.jsonl");
  io::write_text_file(out / "presets.json", isp::presets_to_json(presets).dump(2) + "\n");
  io::write_text_file(out / "synth_config.json", cfg.to_json().dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// Patches and flips

std::vector<Patch> extract_patches(const Tensor& image, int patch_size, int crop) {
  require(image.rank() == 3, "shape", "extract_patches expects [C,H,W], got " + shape_str(image.shape()));
  require(patch_size > 0 && crop > 0, "value", "patch and crop sizes must be positive");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  require(crop <= H && crop <= W, "value",
          "crop " + std::to_string(crop) + " exceeds image " + std::to_string(H) + "x" + std::to_string(W));
  require(crop % patch_size == 0, "value",
          "crop " + std::to_string(crop) + " is not a multiple of patch " + std::to_string(patch_size));
  const int r0 = (H - crop) / 2, c0 = (W - crop) / 2, tiles = crop / patch_size;
  std::vector<Patch> out;
  for (int tr = 0; tr < tiles; ++tr)
    for (int tc = 0; tc < tiles; ++tc) {
      Patch p;
      p.row = r0 + tr * patch_size;
      p.col = c0 + tc * patch_size;
      p.value = Tensor(Shape{C, patch_size, patch_size});
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < patch_size; ++y)
          std::copy_n(image.data() + (static_cast<size_t>(c) * H + p.row + y) * W + p.col, patch_size,
                      p.value.data() + (static_cast<size_t>(c) * patch_size + y) * patch_size);
      out.push_back(std::move(p));
    }
  return out;
}

Tensor assemble_patches(const std::vector<Patch>& patches, int channels, int crop, int row0, int col0) {
  Tensor out(Shape{channels, crop, crop});
  for (const auto& p : patches) {
    const int ps = p.value.dim(1);
    require(p.value.dim(0) == channels, "shape", "patch channel mismatch");
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < ps; ++y)
        std::copy_n(p.value.data() + (static_cast<size_t>(c) * ps + y) * ps, ps,
                    out.data() + (static_cast<size_t>(c) * crop + p.row - row0 + y) * crop + p.col - col0);
  }
  return out;
}

Tensor flip(const Tensor& t, bool horizontal, bool vertical) {
  require(t.rank() == 2 || t.rank() == 3, "shape", "flip expects [H,W] or [C,H,W]");
  if (!horizontal && !vertical) return t;
  const int C = t.rank() == 3 ? t.dim(0) : 1, H = t.dim(-2), W = t.dim(-1);
  Tensor out(t.shape());
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sy = vertical ? H - 1 - y : y, sx = horizontal ? W - 1 - x : x;
        out[(static_cast<size_t>(c) * H + y) * W + x] = t[(static_cast<size_t>(c) * H + sy) * W + sx];
      }
  return out;
}

FlowField flip(const FlowField& f, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return f;
  FlowField out(f.height, f.width);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const int sy = vertical ? f.height - 1 - y : y, sx = horizontal ? f.width - 1 - x : x;
      out.u_at(y, x) = horizontal ? -f.u_at(sy, sx) : f.u_at(sy, sx);
      out.v_at(y, x) = vertical ? -f.v_at(sy, sx) : f.v_at(sy, sx);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Loading

Alignment alignment_from_string(const std::string& s) {
  if (s == "recorded") return Alignment::kRecorded;
  if (s == "estimated") return Alignment::kEstimated;
  fail("config", "alignment must be 'recorded' or 'estimated', got '" + s + "'");
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (size_t i = 0; i < scenes.size(); ++i)
    if (scenes[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

Dataset load_dataset(const Manifest& manifest, const LoadOptions& opt) {
  manifest.validate();
  std::map<int, std::vector<const io::ManifestRecord*>> by_scene;
  for (const auto& r : manifest.records) {
    if (!opt.splits.empty() && std::find(opt.splits.begin(), opt.splits.end(), r.split) == opt.splits.end())
      continue;
    by_scene[r.scene_id].push_back(&r);
  }
  const auto devices = manifest.device_ids();
  const int K = static_cast<int>(devices.size());
  for (int i = 0; i < K; ++i)
    require(devices[i] == i, "value", "device ids must be 0..K-1 without gaps");

  Dataset ds;
  ds.num_devices = K;
  std::vector<std::pair<int, std::vector<const io::ManifestRecord*>>> work(by_scene.begin(), by_scene.end());
  ds.scenes.resize(work.size());
  std::vector<std::string> errors(work.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t s = 0; s < work.size(); ++s) {
    try {
      auto recs = work[s].second;
      std::sort(recs.begin(), recs.end(), [](auto a, auto b) { return a->device_id < b->device_id; });
      SceneData& sd = ds.scenes[s];
      sd.scene_id = work[s].first;
      sd.split = recs.front()->split;
      const io::RawImage raw = io::read_raw(manifest.resolve(recs.front()->raw_path));
      sd.meta = raw.meta;
      sd.packed = io::pack_rggb(raw);
      RgbImage reference;
      if (opt.alignment == Alignment::kEstimated)
        reference = isp::forward_isp(raw, isp::StyleParams::identity());
      for (const auto* r : recs) {
        DeviceTarget t;
        const RgbImage gt = io::read_rgb(manifest.resolve(r->rgb_path));
        require(gt.height == raw.height && gt.width == raw.width, "shape",
                "ground truth size differs from the RAW for scene " + std::to_string(sd.scene_id));
        t.gt = io::rgb_to_tensor(gt);
        FlowField bwd;
        if (opt.alignment == Alignment::kEstimated) {
          t.flow = align::flow_block_match(reference, gt);
          bwd = align::flow_block_match(gt, reference);
        } else {
          t.flow = r->flow_path ? io::read_flow(manifest.resolve(*r->flow_path)) : FlowField(gt.height, gt.width);
          bwd = invert_flow(t.flow);
        }
        auto warped = align::warp_bilinear(t.gt, t.flow, opt.validity);
        const Tensor occ = align::occlusion_mask(t.flow, bwd, opt.fb_thresh, opt.validity);
        for (size_t i = 0; i < occ.numel(); ++i) warped.mask[i] *= occ[i];
        t.aligned = std::move(warped.image);
        t.mask = std::move(warped.mask);
        t.wb = r->wb_gt.value_or(raw.meta.wb_gains);
        sd.devices.push_back(std::move(t));
      }
    } catch (const std::exception& e) {
      errors[s] = e.what();
    }
  }
  for (const auto& e : errors) require(e.empty(), "io", e);
  return ds;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<std::array<int, 3>> tile_index(const Dataset& ds, const std::string& split, const SamplerConfig& cfg) {
  std::vector<std::array<int, 3>> out;
  for (int s : ds.split_indices(split)) {
    const Tensor& p = ds.scenes[s].packed;
    require(cfg.crop <= p.dim(1) && cfg.crop <= p.dim(2), "value", "sampler crop exceeds the packed frame");
    require(cfg.patch > 0 && cfg.crop % cfg.patch == 0, "value", "sampler crop must be a multiple of the patch");
    const int r0 = (p.dim(1) - cfg.crop) / 2, c0 = (p.dim(2) - cfg.crop) / 2, n = cfg.crop / cfg.patch;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) out.push_back({s, r0 + i * cfg.patch, c0 + j * cfg.patch});
  }
  return out;
}

namespace {

Tensor crop(const Tensor& t, int row, int col, int size) {
  const int C = t.rank() == 3 ? t.dim(0) : 1, H = t.dim(-2), W = t.dim(-1);
  Tensor out(t.rank() == 3 ? Shape{C, size, size} : Shape{size, size});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < size; ++y)
      std::copy_n(t.data() + (static_cast<size_t>(c) * H + row + y) * W + col, size,
                  out.data() + (static_cast<size_t>(c) * size + y) * size);
  return out;
}

FlowField crop(const FlowField& f, int row, int col, int size) {
  FlowField out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      out.u_at(y, x) = f.u_at(row + y, col + x);
      out.v_at(y, x) = f.v_at(row + y, col + x);
    }
  return out;
}

}  // namespace

Sample draw_sample(const Dataset& ds, const std::vector<std::array<int, 3>>& tiles, const SamplerConfig& cfg,
                   Rng& rng) {
  require(!tiles.empty(), "value", "no tiles to sample from (empty split)");
  const auto& tile = tiles[rng.uniform_int(0, static_cast<int64_t>(tiles.size()) - 1)];
  Sample s;
  s.scene = tile[0];
  s.device = static_cast<int>(rng.uniform_int(0, ds.num_devices - 1));
  s.flip_h = cfg.flips && rng.coin();
  s.flip_v = cfg.flips && rng.coin();
  const SceneData& sd = ds.scenes[s.scene];
  const int p = cfg.patch, h = sd.packed.dim(1), w = sd.packed.dim(2);
  s.row = s.flip_v ? h - (tile[1] + p) : tile[1];
  s.col = s.flip_h ? w - (tile[2] + p) : tile[2];
  s.x = flip(crop(sd.packed, tile[1], tile[2], p), s.flip_h, s.flip_v);
  s.full = flip(sd.packed, s.flip_h, s.flip_v);
  s.meta = sd.meta;
  for (const auto& t : sd.devices) {
    s.gt.push_back(flip(crop(t.aligned, 2 * tile[1], 2 * tile[2], 2 * p), s.flip_h, s.flip_v));
    s.mask.push_back(flip(crop(t.mask, 2 * tile[1], 2 * tile[2], 2 * p), s.flip_h, s.flip_v).reshaped({1, 2 * p, 2 * p}));
    s.flow.push_back(flip(crop(t.flow, 2 * tile[1], 2 * tile[2], 2 * p), s.flip_h, s.flip_v));
    s.wb_gt.push_back(t.wb);
  }
  return s;
}

std::vector<Sample> sample_batch(const Dataset& ds, const std::vector<std::array<int, 3>>& tiles,
                                 int batch_size, const SamplerConfig& cfg, Rng& rng) {
  require(batch_size > 0, "value", "batch size must be positive");
  std::vector<Sample> out;
  out.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) out.push_back(draw_sample(ds, tiles, cfg, rng));
  return out;
}

Batch collate(const std::vector<Sample>& samples, int num_devices) {
  require(!samples.empty(), "value", "cannot collate an empty batch");
  const int N = static_cast<int>(samples.size());
  const Tensor& x0 = samples[0].x;
  const Tensor& f0 = samples[0].full;
  const Tensor& g0 = samples[0].gt[0];
  Batch b;
  b.x = Tensor(Shape{N, x0.dim(0), x0.dim(1), x0.dim(2)});
  b.full = Tensor(Shape{N, f0.dim(0), f0.dim(1), f0.dim(2)});
  b.gt = Tensor(Shape{N, 3, g0.dim(1), g0.dim(2)});
  b.mask = Tensor(Shape{N, 1, g0.dim(1), g0.dim(2)});
  b.device_weights = Tensor(Shape{N, num_devices});
  b.wb_meta = Tensor(Shape{N, 4});
  b.wb_gt = Tensor(Shape{N, 4});
  auto put = [](Tensor& dst, int n, const Tensor& src) {
    require(src.numel() * dst.dim(0) == dst.numel(), "shape", "inconsistent sample shapes in batch");
    std::copy(src.vec().begin(), src.vec().end(), dst.data() + static_cast<size_t>(n) * src.numel());
  };
  for (int n = 0; n < N; ++n) {
    const Sample& s = samples[n];
    put(b.x, n, s.x);
    put(b.full, n, s.full);
    put(b.gt, n, s.gt[s.device]);
    put(b.mask, n, s.mask[s.device]);
    b.device_weights[static_cast<size_t>(n) * num_devices + s.device] = 1.0;
    for (int c = 0; c < 4; ++c) {
      b.wb_meta[n * 4 + c] = s.meta.wb_gains[c];
      b.wb_gt[n * 4 + c] = s.wb_gt[s.device][c];
    }
    b.iso.push_back(s.meta.iso);
    b.exposure_s.push_back(s.meta.exposure_s);
    b.origin.push_back({s.row, s.col});
    b.devices.push_back(s.device);
  }
  return b;
}

}  // namespace devisp::data
