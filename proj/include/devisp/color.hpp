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

#include <array>

namespace devisp::color {

using Vec3 = std::array<double, 3>;

/// Rec. 709 / sRGB luma weights.
inline constexpr Vec3 kLuma709{0.2126, 0.7152, 0.0722};

double srgb_to_linear(double v);
double linear_to_srgb(double v);

/// Linear sRGB → XYZ under D65. The white point used for Lab is the image
/// of RGB (1,1,1), so sRGB white maps to exactly L*=100, a*=b*=0.
Vec3 linear_to_xyz(const Vec3& rgb);
Vec3 xyz_to_lab(const Vec3& xyz);
Vec3 srgb_to_lab(const Vec3& srgb);

/// CIEDE2000 colour difference with kL = kC = kH = 1.
double ciede2000(const Vec3& lab1, const Vec3& lab2);

}  // namespace devisp::color
