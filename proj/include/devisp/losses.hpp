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

// Masked training losses (differentiable) and evaluation metrics. Images are
// [N, 3, H, W] in [0,1]; masks are [N, 1, H, W] with values 0 or 1.

#include <map>
#include <string>
#include <vector>

#include "devisp/autograd.hpp"
#include "json.hpp"

namespace devisp::loss {

using ag::Variable;
using json = nlohmann::json;

struct LossWeights {
  double lambda_l1 = 1.0;
  double lambda_vgg = 1.0;
  double lambda_ssim = 0.1;
  double lambda_illu = 0.1;

  void validate() const;  // all weights ≥ 0
  json to_json() const;
  static LossWeights from_json(const json& j);
};

/// Σ m·|y − gt| / (3·Σm); exactly 0 when the mask is empty.
Variable masked_l1(const Variable& y, const Tensor& gt, const Tensor& m);

/// Fixed random convolutional feature stack standing in for a pretrained
/// perceptual network: conv3×3 3→8, GELU, [avgpool, conv 8→16, GELU],
/// [avgpool, conv 16→32, GELU]. Weights are He-normal from `seed`.
class FeatureStack {
 public:
  explicit FeatureStack(uint64_t seed = 1234);
  std::vector<Variable> features(const Variable& x) const;
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::vector<Variable> weights_, biases_;
};

/// Mean over the three feature stages of the masked L1 distance of features;
/// the mask follows each stage by 2×2 area-min downsampling.
Variable masked_perceptual(const Variable& y, const Tensor& gt, const Tensor& m, const FeatureStack& stack);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Per-pixel SSIM map ([N, C, H−10, W−10] for the default window): windowed
/// statistics with a valid-mode Gaussian window.
Variable ssim_map(const Variable& y, const Variable& gt, const SsimParams& p = {});
/// Mean SSIM over the map.
double ssim(const Tensor& y, const Tensor& gt, const SsimParams& p = {});
/// Mean of (1 − SSIM map) over the window centres where m = 1.
Variable masked_ssim_loss(const Variable& y, const Tensor& gt, const Tensor& m, const SsimParams& p = {});

struct LossTerms {
  Variable total;
  double l1 = 0, perceptual = 0, ssim = 0, illu = 0;
};

LossTerms total_loss(const Variable& y, const Tensor& gt, const Tensor& m, const LossWeights& w,
                     const FeatureStack& stack);
/// total_loss + λ_illu · mean over the batch of ‖wb_pred − wb_gt‖₁ ([N, 4]).
LossTerms total_loss_wb(const Variable& y, const Tensor& gt, const Tensor& m, const Variable& wb_pred,
                        const Tensor& wb_gt, const LossWeights& w, const FeatureStack& stack);

// ---------------------------------------------------------------------------
// Metrics on single images [3, H, W]; `mask` is [H, W] or empty for all pixels.

/// 10·log10(1/MSE) over the masked pixels; +inf when MSE = 0.
double psnr(const Tensor& y, const Tensor& gt, const Tensor& mask = Tensor());
/// Mean SSIM over window centres inside the mask.
double masked_ssim(const Tensor& y, const Tensor& gt, const Tensor& mask = Tensor(), const SsimParams& p = {});
/// Mean CIEDE2000 over the masked pixels of two sRGB images.
double delta_e(const Tensor& y, const Tensor& gt, const Tensor& mask = Tensor());

/// Encodes +inf as the string "inf" so the JSON stays valid.
json metric_to_json(double v);

struct DeviceMetrics {
  double psnr = 0, ssim = 0, delta_e = 0;
  int images = 0;
};

/// Per-device means in the column order PSNR↑, ΔE↓, SSIM↑.
struct MetricReport {
  std::map<int, DeviceMetrics> devices;
  std::vector<std::string> missing;  // pairs that could not be evaluated

  void add(int device, double psnr, double ssim, double delta_e);
  void add_missing(std::string what) { missing.push_back(std::move(what)); }
  double mean_psnr() const;
  json to_json() const;
  std::string to_table() const;
};

}  // namespace devisp::loss
