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

// Backward warping, occlusion masks and a pyramidal block-matching flow
// estimator. Flow convention everywhere: warp(img, f)(p) = img(p + f(p)),
// with u the x (column) and v the y (row) displacement.

#include "devisp/imageio.hpp"

namespace devisp::align {

using io::FlowField;
using io::RgbImage;

inline constexpr double kDefaultValidity = 0.999;

struct Warped {
  Tensor image;  // [C, H, W]
  Tensor mask;   // [H, W], 0 or 1
};

/// Fraction of the bilinear footprint of (x, y) that lies inside an h×w grid.
double footprint_inside(double x, double y, int h, int w);

/// Bilinear sample of channel plane `plane` (h×w, row-major) with zero padding.
double sample_bilinear(const double* plane, int h, int w, double x, double y);

/// Samples `image` ([C,H,W]) at p + flow(p). The mask is 1 where the sampling
/// footprint lies inside the image (weight ≥ validity_thresh).
Warped warp_bilinear(const Tensor& image, const FlowField& flow, double validity_thresh = kDefaultValidity);
RgbImage warp_rgb(const RgbImage& image, const FlowField& flow, Tensor* mask = nullptr,
                  double validity_thresh = kDefaultValidity);

/// Valid iff the forward footprint is inside the image and the round trip
/// |fwd(p) + bwd(p + fwd(p))| (bwd sampled bilinearly) is at most fb_thresh.
Tensor occlusion_mask(const FlowField& fwd, const FlowField& bwd, double fb_thresh = 1.0,
                      double validity_thresh = kDefaultValidity);

struct BlockMatchOptions {
  int levels = 3;
  int radius = 4;
  int block = 8;
};

/// Flow f with dst(p + f(p)) ≈ src(p), so warp(dst, f) aligns dst to src.
/// Coarse-to-fine over a factor-2 pyramid of Rec. 709 luma, integer SAD search
/// per block around the upsampled coarser estimate, then a half-pel parabolic
/// refinement at full resolution. Piecewise constant per block.
FlowField flow_block_match(const RgbImage& src, const RgbImage& dst, const BlockMatchOptions& opt = {});

}  // namespace devisp::align
