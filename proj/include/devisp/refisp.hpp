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

// Reference ISP: a fixed, invertible pipeline that renders a RAW mosaic in a
// parametric device style, its inverse for synthesizing RAW data from sRGB,
// and a generator of mutually distinct device styles.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "devisp/imageio.hpp"

namespace devisp::isp {

using io::RawImage;
using io::RawMeta;
using io::RgbImage;
using json = nlohmann::json;

using Mat3 = std::array<std::array<double, 3>, 3>;

struct StyleParams {
  Mat3 ccm{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<double, 3> gains{1.0, 1.0, 1.0};
  /// (x, y) knots of a monotone piecewise-linear curve, from (0,0) to (1,1).
  std::vector<std::pair<double, double>> tone_knots{{0.0, 0.0}, {1.0 / 3, 1.0 / 3}, {2.0 / 3, 2.0 / 3}, {1.0, 1.0}};
  double gamma = 2.2;
  double saturation = 1.0;

  static StyleParams identity() { return {}; }
  /// Checks the construction invariants (white-preserving ccm, monotone
  /// tone curve, gamma range, positive gains).
  void validate() const;
  json to_json() const;
  static StyleParams from_json(const json& j);
  bool operator==(const StyleParams&) const = default;
};

struct DevicePreset {
  int device_id = 0;
  std::string name;
  StyleParams style;
  /// Multiplies the scene illuminant gains (R, G1, G2, B) for this device.
  std::array<double, 4> wb_bias{1.0, 1.0, 1.0, 1.0};

  json to_json() const;
  static DevicePreset from_json(const json& j);
  bool operator==(const DevicePreset&) const = default;
};

json presets_to_json(const std::vector<DevicePreset>& presets);
std::vector<DevicePreset> presets_from_json(const json& j);

struct NoiseParams {
  double shot_gain = 0.0;   // variance per unit of normalized signal
  double read_sigma = 0.0;  // normalized units
};

/// Normalized mosaic as an [H, W] tensor (no white balance).
Tensor normalized_mosaic(const RawImage& raw);

/// Bilinear demosaic of an RGGB mosaic given as [H, W]: every missing colour
/// is the mean of the same-colour samples in its 3×3 neighbourhood. Borders
/// mirror without repeating the edge sample, which keeps the CFA phase and
/// equals edge replication of each colour plane.
RgbImage demosaic_bilinear(const Tensor& mosaic);

/// Channel-wise gains on a [C, H, W] tensor (C = gains.size()) or on an image.
Tensor apply_wb(const Tensor& image, const std::vector<double>& gains);
RgbImage apply_wb(const RgbImage& image, const std::array<double, 3>& gains);
/// RGGB gains applied site-wise to an [H, W] mosaic.
Tensor apply_wb_mosaic(const Tensor& mosaic, const std::array<double, 4>& gains);

/// gains → ccm → saturation → tone curve → gamma encode → clamp.
RgbImage apply_style(const RgbImage& linear, const StyleParams& style);
std::array<double, 3> apply_style_pixel(std::array<double, 3> v, const StyleParams& style);
/// Exact inverse of the five stages for values inside the output range.
std::array<double, 3> invert_style_pixel(std::array<double, 3> v, const StyleParams& style);

double tone_curve(double x, const std::vector<std::pair<double, double>>& knots);
double tone_curve_inverse(double y, const std::vector<std::pair<double, double>>& knots);

/// normalize → white balance with meta.wb_gains → demosaic → style.
RgbImage forward_isp(const RawImage& raw, const StyleParams& style);
/// Same with explicit white-balance gains instead of the metadata.
RgbImage forward_isp(const RawImage& raw, const StyleParams& style, const std::array<double, 4>& wb_gains);

/// Unprocesses an sRGB image into a mosaic for `target` (levels, gains), adds
/// heteroscedastic Gaussian noise drawn from `seed`, and quantizes.
RawImage inverse_isp(const RgbImage& srgb, const StyleParams& style, const RawMeta& target,
                     const NoiseParams& noise, uint64_t seed);

/// The 24 patches of a colour checker chart, in linear RGB.
const std::vector<std::array<double, 3>>& color_checker_linear();
/// The checker rendered through a preset: flat patches under the preset's
/// white-balance bias, styled by its StyleParams.
std::vector<std::array<double, 3>> render_checker(const DevicePreset& preset);
/// Mean CIEDE2000 over the checker patches of two presets.
double checker_distance(const DevicePreset& a, const DevicePreset& b);

/// K presets; preset 0 is the identity style, the others are drawn at random
/// until every pair is at least `min_distance` apart on the checker.
std::vector<DevicePreset> make_device_styles(int k, uint64_t seed, double min_distance = 5.0,
                                             int max_attempts = 1000);

}  // namespace devisp::isp
