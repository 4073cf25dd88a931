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

#include "devisp/color.hpp"

#include <algorithm>
#include <cmath>

namespace devisp::color {
namespace {

constexpr double kM[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                             {0.2126729, 0.7151522, 0.0721750},
                             {0.0193339, 0.1191920, 0.9503041}};

constexpr double row_sum(int r) { return kM[r][0] + kM[r][1] + kM[r][2]; }

double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

double deg(double rad) { return rad * 180.0 / M_PI; }
double rad(double deg) { return deg * M_PI / 180.0; }

}  // namespace

double srgb_to_linear(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

Vec3 linear_to_xyz(const Vec3& rgb) {
  Vec3 out{};
  for (int r = 0; r < 3; ++r) out[r] = kM[r][0] * rgb[0] + kM[r][1] * rgb[1] + kM[r][2] * rgb[2];
  return out;
}

Vec3 xyz_to_lab(const Vec3& xyz) {
  const double fx = lab_f(xyz[0] / row_sum(0));
  const double fy = lab_f(xyz[1] / row_sum(1));
  const double fz = lab_f(xyz[2] / row_sum(2));
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Vec3 srgb_to_lab(const Vec3& srgb) {
  return xyz_to_lab(linear_to_xyz({srgb_to_linear(srgb[0]), srgb_to_linear(srgb[1]), srgb_to_linear(srgb[2])}));
}

double ciede2000(const Vec3& lab1, const Vec3& lab2) {
  const double L1 = lab1[0], a1 = lab1[1], b1 = lab1[2];
  const double L2 = lab2[0], a2 = lab2[1], b2 = lab2[2];

  const double C1 = std::hypot(a1, b1), C2 = std::hypot(a2, b2);
  const double Cbar = 0.5 * (C1 + C2);
  const double Cbar7 = std::pow(Cbar, 7);
  const double G = 0.5 * (1.0 - std::sqrt(Cbar7 / (Cbar7 + std::pow(25.0, 7))));
  const double a1p = (1.0 + G) * a1, a2p = (1.0 + G) * a2;
  const double C1p = std::hypot(a1p, b1), C2p = std::hypot(a2p, b2);

  auto hue = [](double b, double ap) {
    if (b == 0.0 && ap == 0.0) return 0.0;
    const double h = deg(std::atan2(b, ap));
    return h < 0 ? h + 360.0 : h;
  };
  const double h1p = hue(b1, a1p), h2p = hue(b2, a2p);

  const double dLp = L2 - L1;
  const double dCp = C2p - C1p;
  double dhp = 0.0;
  if (C1p * C2p != 0.0) {
    dhp = h2p - h1p;
    if (dhp > 180.0)
      dhp -= 360.0;
    else if (dhp < -180.0)
      dhp += 360.0;
  }
  const double dHp = 2.0 * std::sqrt(C1p * C2p) * std::sin(rad(dhp) / 2.0);

  const double Lbarp = 0.5 * (L1 + L2);
  const double Cbarp = 0.5 * (C1p + C2p);
  double hbarp = h1p + h2p;
  if (C1p * C2p != 0.0) {
    if (std::fabs(h1p - h2p) <= 180.0)
      hbarp *= 0.5;
    else if (h1p + h2p < 360.0)
      hbarp = 0.5 * (h1p + h2p + 360.0);
    else
      hbarp = 0.5 * (h1p + h2p - 360.0);
  }

  const double T = 1.0 - 0.17 * std::cos(rad(hbarp - 30.0)) + 0.24 * std::cos(rad(2.0 * hbarp)) +
                   0.32 * std::cos(rad(3.0 * hbarp + 6.0)) - 0.20 * std::cos(rad(4.0 * hbarp - 63.0));
  const double dtheta = 30.0 * std::exp(-std::pow((hbarp - 275.0) / 25.0, 2));
  const double Cbarp7 = std::pow(Cbarp, 7);
  const double Rc = 2.0 * std::sqrt(Cbarp7 / (Cbarp7 + std::pow(25.0, 7)));
  const double Lm = (Lbarp - 50.0) * (Lbarp - 50.0);
  const double Sl = 1.0 + 0.015 * Lm / std::sqrt(20.0 + Lm);
  const double Sc = 1.0 + 0.045 * Cbarp;
  const double Sh = 1.0 + 0.015 * Cbarp * T;
  const double Rt = -std::sin(rad(2.0 * dtheta)) * Rc;

  const double tl = dLp / Sl, tc = dCp / Sc, th = dHp / Sh;
  return std::sqrt(tl * tl + tc * tc + th * th + Rt * tc * th);
}

}  // namespace devisp::color
