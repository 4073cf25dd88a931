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

#include "devisp/refisp.hpp"

#include <algorithm>
#include <cmath>

#include "devisp/color.hpp"
#include "devisp/rng.hpp"

namespace devisp::isp {
namespace {

using Vec3 = std::array<double, 3>;

double det3(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Mat3 inverse3(const Mat3& m) {
  const double d = det3(m);
  require(std::fabs(d) > 1e-9, "isp", "singular ccm cannot be inverted");
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
  return r;
}

Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

double luma(const Vec3& v) {
  return color::kLuma709[0] * v[0] + color::kLuma709[1] * v[1] + color::kLuma709[2] * v[2];
}

// RGGB site colour as an RGB channel index.
inline int site_rgb(int y, int x) { return (y & 1) + (x & 1); }
// RGGB site as an index into (R, G1, G2, B).
inline int site_rggb(int y, int x) { return 2 * (y & 1) + (x & 1); }

inline int reflect101(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

}  // namespace

// ---------------------------------------------------------------------------
// Style parameters

void StyleParams::validate() const {
  for (const auto& row : ccm)
    require(std::fabs(row[0] + row[1] + row[2] - 1.0) < 1e-9, "isp", "ccm rows must sum to 1");
  for (double g : gains) require(g > 0, "isp", "style gains must be positive");
  require(tone_knots.size() >= 4, "isp", "tone curve needs at least 4 knots");
  require(tone_knots.front() == std::make_pair(0.0, 0.0) && tone_knots.back() == std::make_pair(1.0, 1.0), "isp",
          "tone curve must run from (0,0) to (1,1)");
  for (size_t i = 1; i < tone_knots.size(); ++i)
    require(tone_knots[i].first > tone_knots[i - 1].first && tone_knots[i].second > tone_knots[i - 1].second, "isp",
            "tone knots must be strictly increasing");
  require(gamma >= 1.8 && gamma <= 2.6, "isp", "gamma must lie in [1.8, 2.6]");
  require(saturation >= 0, "isp", "saturation must be non-negative");
}

json StyleParams::to_json() const {
  json knots = json::array();
  for (const auto& [x, y] : tone_knots) knots.push_back({x, y});
  return json{{"ccm", ccm}, {"gains", gains}, {"tone_knots", knots}, {"gamma", gamma}, {"saturation", saturation}};
}

StyleParams StyleParams::from_json(const json& j) {
  StyleParams s;
  try {
    s.ccm = j.at("ccm").get<Mat3>();
    s.gains = j.at("gains").get<std::array<double, 3>>();
    s.tone_knots.clear();
    for (const auto& k : j.at("tone_knots")) s.tone_knots.emplace_back(k.at(0).get<double>(), k.at(1).get<double>());
    s.gamma = j.at("gamma").get<double>();
    s.saturation = j.at("saturation").get<double>();
  } catch (const json::exception& e) {
    fail("isp", std::string("malformed style: ") + e.what());
  }
  s.validate();
  return s;
}

json DevicePreset::to_json() const {
  return json{{"device_id", device_id}, {"name", name}, {"style", style.to_json()}, {"wb_bias", wb_bias}};
}

DevicePreset DevicePreset::from_json(const json& j) {
  DevicePreset p;
  try {
    p.device_id = j.at("device_id").get<int>();
    p.name = j.at("name").get<std::string>();
    p.style = StyleParams::from_json(j.at("style"));
    p.wb_bias = j.at("wb_bias").get<std::array<double, 4>>();
  } catch (const json::exception& e) {
    fail("isp", std::string("malformed preset: ") + e.what());
  }
  return p;
}

json presets_to_json(const std::vector<DevicePreset>& presets) {
  json a = json::array();
  for (const auto& p : presets) a.push_back(p.to_json());
  return a;
}

std::vector<DevicePreset> presets_from_json(const json& j) {
  require(j.is_array(), "isp", "preset set must be a JSON array");
  std::vector<DevicePreset> out;
  for (const auto& e : j) {
    out.push_back(DevicePreset::from_json(e));
    for (size_t i = 0; i + 1 < out.size(); ++i)
      require(out[i].device_id != out.back().device_id, "isp", "duplicate device id in preset set");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

Tensor normalized_mosaic(const RawImage& raw) {
  raw.validate();
  Tensor t(Shape{raw.height, raw.width});
  for (size_t i = 0; i < raw.mosaic.size(); ++i)
    t[i] = io::normalize_raw(raw.mosaic[i], raw.meta.black_level, raw.meta.white_level);
  return t;
}

RgbImage demosaic_bilinear(const Tensor& mosaic) {
  require(mosaic.rank() == 2 && mosaic.dim(0) % 2 == 0 && mosaic.dim(1) % 2 == 0 && mosaic.dim(0) >= 2 &&
              mosaic.dim(1) >= 2,
          "isp", "demosaic needs an [H, W] mosaic with even dimensions");
  const int h = mosaic.dim(0), w = mosaic.dim(1);
  RgbImage out(h, w);
  out.colorspace = "linear";
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int own = site_rgb(y, x);
      double sum[3] = {0, 0, 0};
      int count[3] = {0, 0, 0};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int yy = reflect101(y + dy, h), xx = reflect101(x + dx, w);
          const int c = site_rgb(yy, xx);
          sum[c] += mosaic[static_cast<size_t>(yy) * w + xx];
          ++count[c];
        }
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = c == own ? mosaic[static_cast<size_t>(y) * w + x] : sum[c] / count[c];
    }
  return out;
}

Tensor apply_wb(const Tensor& image, const std::vector<double>& gains) {
  require(image.rank() == 3 && static_cast<size_t>(image.dim(0)) == gains.size(), "isp",
          "apply_wb: gains must match the channel count");
  for (double g : gains) require(g > 0, "isp", "white-balance gains must be positive");
  Tensor out = image;
  const size_t plane = image.numel() / gains.size();
  for (size_t c = 0; c < gains.size(); ++c)
    for (size_t i = 0; i < plane; ++i) out[c * plane + i] *= gains[c];
  return out;
}

RgbImage apply_wb(const RgbImage& image, const std::array<double, 3>& gains) {
  for (double g : gains) require(g > 0, "isp", "white-balance gains must be positive");
  RgbImage out = image;
  for (size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] *= gains[i % 3];
  return out;
}

Tensor apply_wb_mosaic(const Tensor& mosaic, const std::array<double, 4>& gains) {
  for (double g : gains) require(g > 0, "isp", "white-balance gains must be positive");
  require(mosaic.rank() == 2, "isp", "apply_wb_mosaic expects [H, W]");
  Tensor out = mosaic;
  const int h = mosaic.dim(0), w = mosaic.dim(1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out[static_cast<size_t>(y) * w + x] *= gains[site_rggb(y, x)];
  return out;
}

double tone_curve(double x, const std::vector<std::pair<double, double>>& k) {
  x = std::clamp(x, 0.0, 1.0);
  for (size_t i = 1; i < k.size(); ++i)
    if (x <= k[i].first || i + 1 == k.size()) {
      const double t = (x - k[i - 1].first) / (k[i].first - k[i - 1].first);
      return k[i - 1].second + t * (k[i].second - k[i - 1].second);
    }
  return x;
}

double tone_curve_inverse(double y, const std::vector<std::pair<double, double>>& k) {
  y = std::clamp(y, 0.0, 1.0);
  for (size_t i = 1; i < k.size(); ++i)
    if (y <= k[i].second || i + 1 == k.size()) {
      const double t = (y - k[i - 1].second) / (k[i].second - k[i - 1].second);
      return k[i - 1].first + t * (k[i].first - k[i - 1].first);
    }
  return y;
}

std::array<double, 3> apply_style_pixel(std::array<double, 3> v, const StyleParams& s) {
  for (int c = 0; c < 3; ++c) v[c] *= s.gains[c];
  v = mat_vec(s.ccm, v);
  const double y = luma(v);
  for (int c = 0; c < 3; ++c) v[c] = y + s.saturation * (v[c] - y);
  for (int c = 0; c < 3; ++c) {
    const double t = tone_curve(v[c], s.tone_knots);
    v[c] = std::clamp(std::pow(t, 1.0 / s.gamma), 0.0, 1.0);
  }
  return v;
}

std::array<double, 3> invert_style_pixel(std::array<double, 3> v, const StyleParams& s) {
  require(s.saturation > 0, "isp", "saturation 0 is not invertible");
  for (int c = 0; c < 3; ++c) v[c] = tone_curve_inverse(std::pow(std::clamp(v[c], 0.0, 1.0), s.gamma), s.tone_knots);
  const double y = luma(v);
  for (int c = 0; c < 3; ++c) v[c] = y + (v[c] - y) / s.saturation;
  v = mat_vec(inverse3(s.ccm), v);
  for (int c = 0; c < 3; ++c) v[c] /= s.gains[c];
  return v;
}

RgbImage apply_style(const RgbImage& linear, const StyleParams& style) {
  RgbImage out(linear.height, linear.width);
  const size_t n = static_cast<size_t>(linear.height) * linear.width;
#pragma omp parallel for schedule(static)
  for (size_t p = 0; p < n; ++p) {
    const auto v = apply_style_pixel({linear.pixels[3 * p], linear.pixels[3 * p + 1], linear.pixels[3 * p + 2]}, style);
    for (int c = 0; c < 3; ++c) out.pixels[3 * p + c] = v[c];
  }
  return out;
}

RgbImage forward_isp(const RawImage& raw, const StyleParams& style) {
  return forward_isp(raw, style, raw.meta.wb_gains);
}

RgbImage forward_isp(const RawImage& raw, const StyleParams& style, const std::array<double, 4>& wb_gains) {
  return apply_style(demosaic_bilinear(apply_wb_mosaic(normalized_mosaic(raw), wb_gains)), style);
}

RawImage inverse_isp(const RgbImage& srgb, const StyleParams& style, const RawMeta& target,
                     const NoiseParams& noise, uint64_t seed) {
  target.validate();
  require(srgb.height % 2 == 0 && srgb.width % 2 == 0, "isp", "inverse_isp needs even image dimensions");
  require(noise.shot_gain >= 0 && noise.read_sigma >= 0, "isp", "noise parameters must be non-negative");
  // Fail early on non-invertible styles even for empty images.
  inverse3(style.ccm);
  require(style.saturation > 0, "isp", "saturation 0 is not invertible");

  RawImage raw;
  raw.height = srgb.height;
  raw.width = srgb.width;
  raw.meta = target;
  raw.mosaic.resize(static_cast<size_t>(raw.height) * raw.width);
  Rng rng(seed);
  const double bl = target.black_level, range = target.white_level - target.black_level;
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x) {
      const auto lin = invert_style_pixel({srgb.at(y, x, 0), srgb.at(y, x, 1), srgb.at(y, x, 2)}, style);
      double v = lin[site_rgb(y, x)] / target.wb_gains[site_rggb(y, x)];
      const double var = noise.shot_gain * std::max(v, 0.0) + noise.read_sigma * noise.read_sigma;
      if (var > 0) v += std::sqrt(var) * rng.normal();
      const double counts = std::round(bl + std::clamp(v, 0.0, 1.0) * range);
      raw.mosaic[static_cast<size_t>(y) * raw.width + x] = static_cast<uint16_t>(counts);
    }
  return raw;
}

// ---------------------------------------------------------------------------
// Device styles

const std::vector<std::array<double, 3>>& color_checker_linear() {
  static const std::vector<std::array<double, 3>> patches = [] {
    static constexpr int srgb8[24][3] = {
        {115, 82, 68},   {194, 150, 130}, {98, 122, 157},  {87, 108, 67},   {133, 128, 177}, {103, 189, 170},
        {214, 126, 44},  {80, 91, 166},   {193, 90, 99},   {94, 60, 108},   {157, 188, 64},  {224, 163, 46},
        {56, 61, 150},   {70, 148, 73},   {175, 54, 60},   {231, 199, 31},  {187, 86, 149},  {8, 133, 161},
        {243, 243, 242}, {200, 200, 200}, {160, 160, 160}, {122, 122, 121}, {85, 85, 85},    {52, 52, 52}};
    std::vector<std::array<double, 3>> out;
    for (const auto& p : srgb8)
      out.push_back({color::srgb_to_linear(p[0] / 255.0), color::srgb_to_linear(p[1] / 255.0),
                     color::srgb_to_linear(p[2] / 255.0)});
    return out;
  }();
  return patches;
}

std::vector<std::array<double, 3>> render_checker(const DevicePreset& preset) {
  std::vector<std::array<double, 3>> out;
  const std::array<double, 3> wb{preset.wb_bias[0], 0.5 * (preset.wb_bias[1] + preset.wb_bias[2]), preset.wb_bias[3]};
  for (auto p : color_checker_linear()) {
    for (int c = 0; c < 3; ++c) p[c] = std::min(p[c] * wb[c], 1.0);
    out.push_back(apply_style_pixel(p, preset.style));
  }
  return out;
}

double checker_distance(const DevicePreset& a, const DevicePreset& b) {
  const auto ra = render_checker(a), rb = render_checker(b);
  double sum = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) sum += color::ciede2000(color::srgb_to_lab(ra[i]), color::srgb_to_lab(rb[i]));
  return sum / static_cast<double>(ra.size());
}

namespace {

StyleParams random_style(Rng& rng) {
  StyleParams s;
  for (int r = 0; r < 3; ++r) {
    double off = 0.0;
    for (int c = 0; c < 3; ++c)
      if (c != r) off += (s.ccm[r][c] = rng.uniform(-0.2, 0.25));
    s.ccm[r][r] = 1.0 - off;
  }
  for (auto& g : s.gains) g = rng.uniform(0.85, 1.15);
  // Five knots: interior x fixed at quarters, y increments drawn and normalized.
  double inc[4], total = 0.0;
  for (double& d : inc) total += (d = rng.uniform(0.5, 1.5));
  s.tone_knots = {{0.0, 0.0}};
  double y = 0.0;
  for (int i = 0; i < 4; ++i) {
    y += inc[i] / total;
    s.tone_knots.emplace_back(0.25 * (i + 1), i == 3 ? 1.0 : y);
  }
  s.gamma = rng.uniform(1.8, 2.6);
  s.saturation = rng.uniform(0.7, 1.4);
  return s;
}

}  // namespace

std::vector<DevicePreset> make_device_styles(int k, uint64_t seed, double min_distance, int max_attempts) {
  require(k >= 1, "isp", "need at least one device");
  Rng rng(seed);
  std::vector<DevicePreset> presets;
  presets.push_back({0, "device0", StyleParams::identity(), {1.0, 1.0, 1.0, 1.0}});
  int attempts = 0;
  while (static_cast<int>(presets.size()) < k) {
    require(attempts++ < max_attempts, "isp",
            "could not draw " + std::to_string(k) + " distinct styles in " + std::to_string(max_attempts) + " attempts");
    DevicePreset p;
    p.device_id = static_cast<int>(presets.size());
    p.name = "device" + std::to_string(p.device_id);
    p.style = random_style(rng);
    const double r = rng.uniform(0.85, 1.15), b = rng.uniform(0.85, 1.15);
    p.wb_bias = {r, 1.0, 1.0, b};
    if (std::fabs(det3(p.style.ccm)) < 0.2) continue;
    bool ok = true;
    for (const auto& q : presets) ok = ok && checker_distance(p, q) >= min_distance;
    if (ok) presets.push_back(std::move(p));
  }
  for (const auto& p : presets) p.style.validate();
  return presets;
}

}  // namespace devisp::isp
