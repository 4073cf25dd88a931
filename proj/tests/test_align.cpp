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

#include <gtest/gtest.h>

#include "devisp/align.hpp"
#include "test_util.hpp"

namespace devisp::align {
namespace {

// Straight-line bilinear oracle: explicit four-corner sum, zero outside.
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

FlowField smooth_flow(int h, int w, uint64_t seed, double amp) {
  Rng rng(seed);
  double a[6];
  for (double& v : a) v = rng.uniform(-1, 1);
  FlowField f(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.u_at(y, x) = static_cast<float>(amp * std::sin(a[0] * y * 0.2 + a[1] * x * 0.15 + a[2]));
      f.v_at(y, x) = static_cast<float>(amp * std::cos(a[3] * y * 0.15 + a[4] * x * 0.2 + a[5]));
    }
  return f;
}

TEST(Warp, ZeroFlowIsIdentity) {
  Rng rng(1);
  Tensor img = testing::random_tensor({3, 7, 9}, rng);
  Warped out = warp_bilinear(img, FlowField(7, 9));
  EXPECT_EQ(out.image.vec(), img.vec());
  for (double m : out.mask.vec()) EXPECT_EQ(m, 1.0);
}

TEST(Warp, IntegerShiftMasksRightColumn) {
  Rng rng(2);
  Tensor img = testing::random_tensor({2, 5, 6}, rng);
  Warped out = warp_bilinear(img, FlowField(5, 6, 1.0f, 0.0f));
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x) {
        const double expect = x < 5 ? img[(c * 5 + y) * 6 + x + 1] : 0.0;
        EXPECT_EQ(out.image[(c * 5 + y) * 6 + x], expect);
        EXPECT_EQ(out.mask[y * 6 + x], x < 5 ? 1.0 : 0.0);
      }
}

TEST(Warp, HalfPixelOnRampMatchesOracle) {
  Tensor ramp({1, 4, 8});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) ramp[y * 8 + x] = 0.1 * x + 0.01 * y;
  Warped out = warp_bilinear(ramp, FlowField(4, 8, 0.5f, 0.0f));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 7; ++x) {
      EXPECT_NEAR(out.image[y * 8 + x], 0.5 * (ramp[y * 8 + x] + ramp[y * 8 + x + 1]), 1e-15);
      EXPECT_EQ(out.mask[y * 8 + x], 1.0);
    }
  for (int y = 0; y < 4; ++y) EXPECT_EQ(out.mask[y * 8 + 7], 0.0);
}

TEST(Warp, RandomFlowMatchesOracleAndIsLinear) {
  Rng rng(3);
  Tensor a = testing::random_tensor({3, 12, 10}, rng), b = testing::random_tensor({3, 12, 10}, rng);
  FlowField f = smooth_flow(12, 10, 4, 2.5);
  Warped wa = warp_bilinear(a, f), wb = warp_bilinear(b, f);
  Tensor sum = a;
  for (size_t i = 0; i < sum.numel(); ++i) sum[i] = 2 * a[i] - 3 * b[i];
  Warped ws = warp_bilinear(sum, f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 10; ++x) {
        double inside;
        const size_t k = (static_cast<size_t>(c) * 12 + y) * 10 + x;
        EXPECT_NEAR(wa.image[k], oracle_sample(a, c, x + double(f.u_at(y, x)), y + double(f.v_at(y, x)), &inside), 1e-14);
        EXPECT_EQ(wa.mask[y * 10 + x], inside >= 0.999 ? 1.0 : 0.0);
        EXPECT_NEAR(ws.image[k], 2 * wa.image[k] - 3 * wb.image[k], 1e-14);
      }
}

TEST(Occlusion, ConsistentConstantFieldsAreValidInside) {
  FlowField fwd(10, 10, 1.5f, -1.0f), bwd(10, 10, -1.5f, 1.0f);
  Tensor m = occlusion_mask(fwd, bwd);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      const bool inside = x + 1.5 <= 9 && y - 1.0 >= 0;
      EXPECT_EQ(m[y * 10 + x], inside ? 1.0 : 0.0) << x << "," << y;
    }
  // Swapping roles with negation on constant fields mirrors the valid region.
  Tensor m2 = occlusion_mask(bwd, fwd);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) EXPECT_EQ(m2[y * 10 + x], m[(9 - y) * 10 + (9 - x)]);
}

TEST(Occlusion, InconsistentFieldsAreInvalid) {
  FlowField fwd(8, 8, 0.5f, 0.5f), bwd(8, 8, -0.5f + 5.0f, -0.5f);
  Tensor m = occlusion_mask(fwd, bwd, 1.0);
  for (double v : m.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Occlusion, MatchesExhaustiveOracle) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    FlowField fwd = smooth_flow(16, 20, seed, 3.0), bwd = smooth_flow(16, 20, seed + 100, 3.0);
    for (size_t i = 0; i < bwd.u.size(); ++i) {
      bwd.u[i] = -fwd.u[i] + 0.4f * bwd.u[i];
      bwd.v[i] = -fwd.v[i] + 0.4f * bwd.v[i];
    }
    Tensor m = occlusion_mask(fwd, bwd, 1.0, 0.999);
    Tensor bu({2, 16, 20});
    for (int i = 0; i < 320; ++i) {
      bu[i] = bwd.u[i];
      bu[320 + i] = bwd.v[i];
    }
    int valid = 0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 20; ++x) {
        const double sx = x + double(fwd.u_at(y, x)), sy = y + double(fwd.v_at(y, x));
        double inside;
        const double ru = fwd.u_at(y, x) + oracle_sample(bu, 0, sx, sy, &inside);
        const double rv = fwd.v_at(y, x) + oracle_sample(bu, 1, sx, sy, nullptr);
        const bool ok = inside >= 0.999 && std::sqrt(ru * ru + rv * rv) <= 1.0;
        EXPECT_EQ(m[y * 20 + x], ok ? 1.0 : 0.0);
        valid += ok;
      }
    EXPECT_GT(valid, 0);
    EXPECT_LT(valid, 320);
  }
}

// Smooth random texture on a canvas larger than the crop so translations
// need no wrap-around.
RgbImage texture_crop(int h, int w, int oy, int ox, uint64_t seed) {
  Rng rng(seed);
  const int H = h + 16, W = w + 16;
  std::vector<double> noise(static_cast<size_t>(H) * W);
  for (auto& v : noise) v = rng.uniform(0, 1);
  std::vector<double> blur(noise.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::clamp(y + dy, 0, H - 1), xx = std::clamp(x + dx, 0, W - 1);
          s += noise[yy * W + xx];
          ++n;
        }
      blur[y * W + x] = s / n;
    }
  RgbImage img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = blur[(y + 8 + oy) * W + (x + 8 + ox)] * (0.6 + 0.2 * c);
  return img;
}

double median(std::vector<float> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

TEST(BlockMatch, IdenticalImagesGiveZeroFlow) {
  RgbImage a = texture_crop(48, 64, 0, 0, 5);
  FlowField f = flow_block_match(a, a);
  for (size_t i = 0; i < f.u.size(); ++i) {
    EXPECT_EQ(f.u[i], 0.0f);
    EXPECT_EQ(f.v[i], 0.0f);
  }
}

TEST(BlockMatch, RecoversPureTranslation) {
  // dst(p) = src(p − (3, 0)), so dst(p + (3, 0)) = src(p).
  RgbImage src = texture_crop(64, 64, 0, 0, 6), dst = texture_crop(64, 64, 0, -3, 6);
  FlowField f = flow_block_match(src, dst, {3, 4, 8});
  EXPECT_EQ(median(f.u), 3.0);
  EXPECT_EQ(median(f.v), 0.0);
}

TEST(BlockMatch, CoarseLevelExtendsSearchRange) {
  RgbImage src = texture_crop(64, 64, 0, 0, 7), dst = texture_crop(64, 64, -2, 0, 7);
  FlowField f = flow_block_match(src, dst, {2, 1, 8});
  EXPECT_EQ(median(f.u), 0.0);
  EXPECT_EQ(median(f.v), 2.0);
  // A single level with radius 1 cannot reach a 2 px shift.
  FlowField g = flow_block_match(src, dst, {1, 1, 8});
  EXPECT_NE(median(g.v), 2.0);
}

TEST(BlockMatch, RejectsTinyImages) {
  RgbImage a(4, 4, 0.5);
  EXPECT_THROW(flow_block_match(a, a), Error);
}

}  // namespace
}  // namespace devisp::align
