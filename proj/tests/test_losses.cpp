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

#include <gtest/gtest.h>

#include "ciede_oracle.hpp"
#include "devisp/color.hpp"
#include "devisp/error.hpp"
#include "devisp/gradcheck.hpp"
#include "devisp/losses.hpp"
#include "test_util.hpp"

namespace devisp::loss {
namespace {

using testing::random_tensor;

Tensor ones_mask(int n, int h, int w) { return Tensor(Shape{n, 1, h, w}, 1.0); }

Tensor half_mask(int n, int h, int w) {
  Tensor m(Shape{n, 1, h, w});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w / 2; ++x) m.at(b, 0, y, x) = 1.0;
  return m;
}

// Brute-force SSIM at one window centre: explicit 2-D Gaussian weights.
double oracle_ssim_at(const Tensor& a, const Tensor& b, int c, int cy, int cx) {
  const int h = a.dim(1), w = a.dim(2);
  double wsum = 0, mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
  for (int dy = -5; dy <= 5; ++dy)
    for (int dx = -5; dx <= 5; ++dx) wsum += std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
  auto px = [&](const Tensor& t, int y, int x) { return t[(static_cast<size_t>(c) * h + y) * w + x]; };
  for (int dy = -5; dy <= 5; ++dy)
    for (int dx = -5; dx <= 5; ++dx) {
      const double g = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5)) / wsum;
      mx += g * px(a, cy + dy, cx + dx);
      my += g * px(b, cy + dy, cx + dx);
    }
  for (int dy = -5; dy <= 5; ++dy)
    for (int dx = -5; dx <= 5; ++dx) {
      const double g = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5)) / wsum;
      const double u = px(a, cy + dy, cx + dx) - mx, v = px(b, cy + dy, cx + dx) - my;
      sxx += g * u * u;
      syy += g * v * v;
      sxy += g * u * v;
    }
  const double c1 = 1e-4, c2 = 9e-4;
  return (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
}

TEST(MaskedL1, ZeroCases) {
  Rng rng(1);
  Tensor gt = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  EXPECT_EQ(masked_l1(ag::constant(gt), gt, ones_mask(2, 8, 8)).value()[0], 0.0);
  Tensor y = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  EXPECT_EQ(masked_l1(ag::constant(y), gt, Tensor(Shape{2, 1, 8, 8}, 0.0)).value()[0], 0.0);
}

TEST(MaskedL1, HalfMaskedConstantOffset) {
  Rng rng(2);
  Tensor gt = random_tensor({1, 3, 6, 8}, rng, 0.2, 0.7);
  Tensor y = gt;
  Tensor m = half_mask(1, 6, 8);
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 6; ++yy)
      for (int x = 0; x < 8; ++x) y.at(0, c, yy, x) += x < 4 ? 0.2 : 0.9;  // right half is masked out
  EXPECT_NEAR(masked_l1(ag::constant(y), gt, m).value()[0], 0.2, 1e-12);
}

TEST(MaskedL1, RejectsShapeMismatch) {
  Tensor a(Shape{1, 3, 4, 4}), b(Shape{1, 3, 4, 5});
  EXPECT_THROW(masked_l1(ag::constant(a), b, ones_mask(1, 4, 4)), Error);
  EXPECT_THROW(masked_l1(ag::constant(a), a, ones_mask(1, 4, 5)), Error);
}

TEST(MaskedL1, PermutationEquivariant) {
  Rng rng(3);
  Tensor y = random_tensor({1, 3, 5, 7}, rng, 0, 1), gt = random_tensor({1, 3, 5, 7}, rng, 0, 1);
  Tensor m(Shape{1, 1, 5, 7});
  for (double& v : m.vec()) v = rng.coin() ? 1.0 : 0.0;
  std::vector<int> perm(35);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 34; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  Tensor py = y, pg = gt, pm = m;
  for (int i = 0; i < 35; ++i) {
    pm[i] = m[perm[i]];
    for (int c = 0; c < 3; ++c) {
      py[c * 35 + i] = y[c * 35 + perm[i]];
      pg[c * 35 + i] = gt[c * 35 + perm[i]];
    }
  }
  EXPECT_NEAR(masked_l1(ag::constant(y), gt, m).value()[0], masked_l1(ag::constant(py), pg, pm).value()[0],
              1e-14);
}

// Pixels outside the mask, far enough from valid pixels for windowed losses,
// never change any loss.
TEST(MaskedLosses, MaskedOutPixelsDoNotMatter) {
  Rng rng(4);
  Tensor gt = random_tensor({1, 3, 32, 64}, rng, 0, 1), y = random_tensor({1, 3, 32, 64}, rng, 0, 1);
  Tensor m(Shape{1, 1, 32, 64});
  for (int yy = 0; yy < 32; ++yy)
    for (int x = 0; x < 16; ++x) m.at(0, 0, yy, x) = 1.0;
  Tensor y2 = y;
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 32; ++yy)
      for (int x = 40; x < 64; ++x) y2.at(0, c, yy, x) = rng.uniform();
  FeatureStack stack;
  EXPECT_EQ(masked_l1(ag::constant(y), gt, m).value()[0], masked_l1(ag::constant(y2), gt, m).value()[0]);
  EXPECT_EQ(masked_ssim_loss(ag::constant(y), gt, m).value()[0],
            masked_ssim_loss(ag::constant(y2), gt, m).value()[0]);
  EXPECT_EQ(masked_perceptual(ag::constant(y), gt, m, stack).value()[0],
            masked_perceptual(ag::constant(y2), gt, m, stack).value()[0]);
}

TEST(MaskedLosses, NonNegativeAndZeroAtTarget) {
  Rng rng(5);
  FeatureStack stack;
  for (int trial = 0; trial < 3; ++trial) {
    Tensor gt = random_tensor({2, 3, 16, 16}, rng, 0, 1), y = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    Tensor m = half_mask(2, 16, 16);
    EXPECT_GE(masked_l1(ag::constant(y), gt, m).value()[0], 0.0);
    EXPECT_GE(masked_perceptual(ag::constant(y), gt, m, stack).value()[0], 0.0);
    EXPECT_GE(masked_ssim_loss(ag::constant(y), gt, m).value()[0], 0.0);
    EXPECT_EQ(masked_perceptual(ag::constant(gt), gt, m, stack).value()[0], 0.0);
    EXPECT_NEAR(masked_ssim_loss(ag::constant(gt), gt, m).value()[0], 0.0, 1e-12);
  }
}

TEST(Perceptual, PinnedValueForSeed1234) {
  Rng rng(1234);
  Tensor gt = random_tensor({1, 3, 16, 16}, rng, 0, 1), y = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  Tensor m = half_mask(1, 16, 16);
  FeatureStack a(1234), b(1234);
  const double va = masked_perceptual(ag::constant(y), gt, m, a).value()[0];
  EXPECT_EQ(va, masked_perceptual(ag::constant(y), gt, m, b).value()[0]);
  EXPECT_NEAR(va, 0.1124832442920021, 1e-12);
}

TEST(Perceptual, RejectsIndivisibleSize) {
  Tensor t(Shape{1, 3, 10, 12});
  FeatureStack stack;
  EXPECT_THROW(masked_perceptual(ag::constant(t), t, ones_mask(1, 10, 12), stack), Error);
}

TEST(Ssim, IdenticalIsOne) {
  Rng rng(6);
  Tensor x = random_tensor({1, 3, 20, 24}, rng, 0, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  EXPECT_NEAR(masked_ssim(x.reshaped({3, 20, 24}), x.reshaped({3, 20, 24})), 1.0, 1e-12);
}

TEST(Ssim, ConstantPairClosedForm) {
  Tensor a(Shape{1, 3, 16, 16}, 0.5), b(Shape{1, 3, 16, 16}, 0.6);
  const double expect = (2 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
  EXPECT_NEAR(expect, 0.983609, 5e-7);
  const Tensor map = ssim_map(ag::constant(a), ag::constant(b)).value();
  for (double v : map.vec()) EXPECT_NEAR(v, expect, 1e-12);
}

TEST(Ssim, MatchesBruteForceOracle) {
  Rng rng(7);
  Tensor a = random_tensor({1, 3, 17, 19}, rng, 0, 1), b = random_tensor({1, 3, 17, 19}, rng, 0, 1);
  const Tensor map = ssim_map(ag::constant(a), ag::constant(b)).value();
  ASSERT_EQ(map.shape(), (Shape{1, 3, 7, 9}));
  Tensor a3 = a.reshaped({3, 17, 19}), b3 = b.reshaped({3, 17, 19});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) EXPECT_NEAR(map.at(0, c, y, x), oracle_ssim_at(a3, b3, c, y + 5, x + 5), 1e-12);
}

TEST(Ssim, FlipEquivariant) {
  Rng rng(8);
  Tensor a = random_tensor({1, 3, 14, 15}, rng, 0, 1), b = random_tensor({1, 3, 14, 15}, rng, 0, 1);
  auto flip = [](const Tensor& t) {
    Tensor o = t;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 14; ++y)
        for (int x = 0; x < 15; ++x) o.at(0, c, y, x) = t.at(0, c, y, 14 - x);
    return o;
  };
  EXPECT_NEAR(ssim(a, b), ssim(flip(a), flip(b)), 1e-13);
}

TEST(Ssim, RejectsSmallImage) {
  Tensor t(Shape{1, 3, 10, 20});
  EXPECT_THROW(ssim(t, t), Error);
}

TEST(TotalLoss, ReducesToL1WithoutOtherTerms) {
  Rng rng(9);
  Tensor gt = random_tensor({1, 3, 16, 16}, rng, 0, 1), y = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  Tensor m = half_mask(1, 16, 16);
  LossWeights w;
  w.lambda_vgg = w.lambda_ssim = 0;
  FeatureStack stack;
  EXPECT_EQ(total_loss(ag::constant(y), gt, m, w, stack).total.value()[0],
            masked_l1(ag::constant(y), gt, m).value()[0]);
}

TEST(TotalLoss, WeightedSumOfTerms) {
  Rng rng(10);
  Tensor gt = random_tensor({2, 3, 16, 16}, rng, 0, 1), y = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  Tensor m = half_mask(2, 16, 16);
  Tensor wb_gt(Shape{2, 4}, std::vector<double>{2.0, 1.0, 1.0, 1.5, 1.8, 1.0, 1.0, 1.7});
  Tensor wb_pred = wb_gt;
  wb_pred[0] += 0.03;  // sample 0 gap 0.05, sample 1 gap 0.05
  wb_pred[3] -= 0.02;
  wb_pred[7] += 0.05;
  FeatureStack stack;
  LossTerms t = total_loss_wb(ag::constant(y), gt, m, ag::constant(wb_pred), wb_gt, LossWeights{}, stack);
  EXPECT_NEAR(t.illu, 0.05, 1e-12);
  EXPECT_NEAR(t.total.value()[0], t.l1 + t.perceptual + 0.1 * t.ssim + 0.005, 1e-12);
  // 0.1/0.2/0.3 per-term example with a 0.05 gap.
  EXPECT_NEAR(1.0 * 0.1 + 1.0 * 0.2 + 0.1 * 0.3 + 0.1 * 0.05, 0.335, 1e-15);
}

TEST(TotalLoss, ZeroAtTarget) {
  Rng rng(11);
  Tensor gt = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  Tensor wb(Shape{1, 4}, std::vector<double>{2.0, 1.0, 1.0, 1.5});
  FeatureStack stack;
  LossTerms t = total_loss_wb(ag::constant(gt), gt, ones_mask(1, 16, 16), ag::constant(wb), wb, LossWeights{}, stack);
  EXPECT_NEAR(t.total.value()[0], 0.0, 1e-12);
}

TEST(LossWeights, JsonAndValidation) {
  LossWeights w = LossWeights::from_json({{"lambda_vgg", 0.5}});
  EXPECT_EQ(w.lambda_vgg, 0.5);
  EXPECT_EQ(w.lambda_l1, 1.0);
  EXPECT_THROW(LossWeights::from_json({{"lambda_foo", 1.0}}), Error);
  EXPECT_THROW(LossWeights::from_json({{"lambda_l1", -1.0}}), Error);
}

TEST(LossGradients, EveryLossPassesFiniteDifferences) {
  Rng rng(12);
  Tensor gt = random_tensor({2, 3, 12, 12}, rng, 0, 1);
  Tensor m = half_mask(2, 12, 12);
  m.at(1, 0, 3, 9) = 1.0;
  ag::Variable y = ag::parameter(random_tensor({2, 3, 12, 12}, rng, 0, 1));
  ag::Variable wb = ag::parameter(random_tensor({2, 4}, rng, 1, 2));
  Tensor wb_gt = random_tensor({2, 4}, rng, 1, 2);
  FeatureStack stack;
  ag::GradCheckOptions opt;
  opt.samples_per_tensor = 64;
  auto check = [&](const char* name, const std::function<ag::Variable()>& f) {
    ag::GradCheckResult r = ag::grad_check(f, {{"y", y}, {"wb", wb}}, opt);
    EXPECT_LT(r.max_rel_err, 1e-4) << name << " worst " << r.worst;
  };
  check("l1", [&] { return masked_l1(y, gt, m); });
  check("perceptual", [&] { return masked_perceptual(y, gt, m, stack); });
  check("ssim", [&] { return masked_ssim_loss(y, gt, m); });
  check("total_wb", [&] { return total_loss_wb(y, gt, m, wb, wb_gt, LossWeights{}, stack).total; });
}

TEST(Psnr, Formula) {
  Tensor a(Shape{3, 8, 8}, 0.5), b(Shape{3, 8, 8}, 0.6);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_EQ(metric_to_json(psnr(a, a)), "inf");
}

TEST(Psnr, MatchesDirectMseWithMask) {
  Rng rng(13);
  Tensor a = random_tensor({3, 9, 7}, rng, 0, 1), b = random_tensor({3, 9, 7}, rng, 0, 1);
  Tensor mask(Shape{9, 7});
  for (double& v : mask.vec()) v = rng.coin() ? 1.0 : 0.0;
  double se = 0, n = 0;
  for (int i = 0; i < 63; ++i)
    if (mask[i] > 0)
      for (int c = 0; c < 3; ++c) {
        se += std::pow(a[c * 63 + i] - b[c * 63 + i], 2);
        n += 1;
      }
  EXPECT_NEAR(psnr(a, b, mask), -10 * std::log10(se / n), 1e-10);
}

TEST(Psnr, DecreasesWithNoise) {
  Rng rng(14);
  Tensor clean = random_tensor({3, 32, 32}, rng, 0.2, 0.8);
  double previous = std::numeric_limits<double>::infinity();
  for (double sigma : {0.005, 0.01, 0.02, 0.04, 0.08}) {
    Rng noise(99);  // same noise pattern, scaled
    Tensor noisy = clean;
    for (double& v : noisy.vec()) v += sigma * noise.normal();
    const double p = psnr(noisy, clean);
    EXPECT_LT(p, previous);
    previous = p;
  }
}

TEST(DeltaE, ReferencePairsMatchOracleAndTable) {
  for (const auto& p : testing::kCiedePairs) {
    const double lib = color::ciede2000(p.a, p.b);
    EXPECT_NEAR(lib, testing::oracle_ciede2000(p.a, p.b), 1e-10);
    EXPECT_NEAR(lib, p.expected, 1e-4);
    EXPECT_NEAR(lib, color::ciede2000(p.b, p.a), 1e-12);
  }
}

TEST(DeltaE, BlackWhiteIsHundred) {
  Tensor black(Shape{3, 4, 4}, 0.0), white(Shape{3, 4, 4}, 1.0);
  EXPECT_NEAR(delta_e(black, white), 100.0, 1e-9);
  EXPECT_EQ(delta_e(white, white), 0.0);
}

TEST(DeltaE, RandomColoursSymmetricAndMatchOracle) {
  Rng rng(15);
  Tensor a = random_tensor({3, 6, 6}, rng, 0, 1), b = random_tensor({3, 6, 6}, rng, 0, 1);
  double s = 0;
  for (int i = 0; i < 36; ++i) {
    const auto la = color::srgb_to_lab({a[i], a[36 + i], a[72 + i]});
    const auto lb = color::srgb_to_lab({b[i], b[36 + i], b[72 + i]});
    s += testing::oracle_ciede2000(la, lb);
  }
  EXPECT_NEAR(delta_e(a, b), s / 36, 1e-10);
  EXPECT_NEAR(delta_e(a, b), delta_e(b, a), 1e-12);
}

TEST(MetricReport, IdentityAndJson) {
  Rng rng(16);
  MetricReport r;
  for (int d = 0; d < 2; ++d) {
    Tensor x = random_tensor({3, 16, 16}, rng, 0, 1);
    r.add(d, psnr(x, x), masked_ssim(x, x), delta_e(x, x));
  }
  json j = r.to_json();
  EXPECT_EQ(j["devices"]["0"]["psnr"], "inf");
  EXPECT_EQ(j["devices"]["1"]["delta_e"], 0.0);
  EXPECT_NEAR(j["devices"]["1"]["ssim"].get<double>(), 1.0, 1e-12);
  EXPECT_NE(r.to_table().find("inf"), std::string::npos);
}

TEST(MetricReport, MeansPerDevice) {
  MetricReport r;
  r.add(0, 20.0, 0.9, 2.0);
  r.add(0, 30.0, 0.7, 4.0);
  r.add(1, 25.0, 0.8, 1.0);
  r.add_missing("scene 7 device 1");
  EXPECT_DOUBLE_EQ(r.devices[0].psnr, 25.0);
  EXPECT_DOUBLE_EQ(r.devices[0].ssim, 0.8);
  EXPECT_DOUBLE_EQ(r.devices[0].delta_e, 3.0);
  EXPECT_DOUBLE_EQ(r.mean_psnr(), 25.0);
  EXPECT_EQ(r.to_json()["missing"].size(), 1u);
}

}  // namespace
}  // namespace devisp::loss
