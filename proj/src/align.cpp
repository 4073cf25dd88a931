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

#include "devisp/align.hpp"

#include <cmath>
#include <limits>

#include "devisp/color.hpp"

namespace devisp::align {
namespace {

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

Plane luma_plane(const RgbImage& img) {
  Plane p{img.height, img.width, std::vector<double>(static_cast<size_t>(img.height) * img.width)};
  for (size_t i = 0; i < p.v.size(); ++i)
    p.v[i] = color::kLuma709[0] * img.pixels[3 * i] + color::kLuma709[1] * img.pixels[3 * i + 1] +
             color::kLuma709[2] * img.pixels[3 * i + 2];
  return p;
}

Plane downsample(const Plane& p) {
  Plane q{p.h / 2, p.w / 2, {}};
  q.v.resize(static_cast<size_t>(q.h) * q.w);
  for (int y = 0; y < q.h; ++y)
    for (int x = 0; x < q.w; ++x)
      q.v[static_cast<size_t>(y) * q.w + x] =
          0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1));
  return q;
}

// Mean absolute difference over the block pixels whose displaced position is
// inside dst; +inf when fewer than half of them are.
double block_sad(const Plane& src, const Plane& dst, int y0, int x0, int bh, int bw, int dy, int dx) {
  double s = 0.0;
  int n = 0;
  for (int y = y0; y < y0 + bh; ++y) {
    const int yy = y + dy;
    if (yy < 0 || yy >= dst.h) continue;
    for (int x = x0; x < x0 + bw; ++x) {
      const int xx = x + dx;
      if (xx < 0 || xx >= dst.w) continue;
      s += std::fabs(src.at(y, x) - dst.at(yy, xx));
      ++n;
    }
  }
  if (2 * n < bh * bw) return std::numeric_limits<double>::infinity();
  return s / n;
}

// Sub-pixel offset of the parabola through (−1, a), (0, b), (1, c), rounded
// to the nearest half pixel.
double half_pel(double a, double b, double c) {
  const double denom = a - 2 * b + c;
  if (!std::isfinite(a) || !std::isfinite(c) || denom <= 0) return 0.0;
  const double off = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
  return 0.5 * std::round(2.0 * off);
}

struct BlockFlow {
  int rows = 0, cols = 0;
  std::vector<int> dx, dy;
};

}  // namespace

double footprint_inside(double x, double y, int h, int w) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  double inside = 0.0;
  const double wx[2] = {1.0 - ax, ax}, wy[2] = {1.0 - ay, ay};
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const int xx = x0 + i, yy = y0 + j;
      if (xx >= 0 && xx < w && yy >= 0 && yy < h) inside += wx[i] * wy[j];
    }
  return inside;
}

double sample_bilinear(const double* plane, int h, int w, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const double wx[2] = {1.0 - ax, ax}, wy[2] = {1.0 - ay, ay};
  double s = 0.0;
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const int xx = x0 + i, yy = y0 + j;
      if (xx >= 0 && xx < w && yy >= 0 && yy < h && wx[i] * wy[j] != 0.0)
        s += wx[i] * wy[j] * plane[static_cast<size_t>(yy) * w + xx];
    }
  return s;
}

Warped warp_bilinear(const Tensor& image, const FlowField& flow, double validity_thresh) {
  require(image.rank() == 3, "shape", "warp expects a [C, H, W] image");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  require(flow.height == h && flow.width == w, "shape", "flow dimensions do not match the image");
  Warped out{Tensor(image.shape()), Tensor(Shape{h, w})};
  const size_t plane = static_cast<size_t>(h) * w;
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sx = x + static_cast<double>(flow.u_at(y, x)), sy = y + static_cast<double>(flow.v_at(y, x));
      out.mask[static_cast<size_t>(y) * w + x] = footprint_inside(sx, sy, h, w) >= validity_thresh ? 1.0 : 0.0;
      for (int ch = 0; ch < c; ++ch)
        out.image[ch * plane + static_cast<size_t>(y) * w + x] = sample_bilinear(image.data() + ch * plane, h, w, sx, sy);
    }
  return out;
}

RgbImage warp_rgb(const RgbImage& image, const FlowField& flow, Tensor* mask, double validity_thresh) {
  Warped wp = warp_bilinear(io::rgb_to_tensor(image), flow, validity_thresh);
  if (mask) *mask = wp.mask;
  RgbImage out = io::tensor_to_rgb(wp.image, image.colorspace);
  return out;
}

Tensor occlusion_mask(const FlowField& fwd, const FlowField& bwd, double fb_thresh, double validity_thresh) {
  require(fwd.height == bwd.height && fwd.width == bwd.width, "shape", "forward/backward flow size mismatch");
  const int h = fwd.height, w = fwd.width;
  std::vector<double> bu(bwd.u.begin(), bwd.u.end()), bv(bwd.v.begin(), bwd.v.end());
  Tensor m(Shape{h, w});
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fu = fwd.u_at(y, x), fv = fwd.v_at(y, x);
      const double sx = x + fu, sy = y + fv;
      if (footprint_inside(sx, sy, h, w) < validity_thresh) continue;
      const double ru = fu + sample_bilinear(bu.data(), h, w, sx, sy);
      const double rv = fv + sample_bilinear(bv.data(), h, w, sx, sy);
      if (std::hypot(ru, rv) <= fb_thresh) m[static_cast<size_t>(y) * w + x] = 1.0;
    }
  return m;
}

FlowField flow_block_match(const RgbImage& src, const RgbImage& dst, const BlockMatchOptions& opt) {
  require(src.height == dst.height && src.width == dst.width, "shape", "block matching needs equal image sizes");
  require(opt.levels >= 1 && opt.radius >= 0 && opt.block >= 2, "align", "invalid block-matching options");
  require(src.height >= opt.block && src.width >= opt.block, "align", "images are smaller than one block");

  std::vector<Plane> ps{luma_plane(src)}, pd{luma_plane(dst)};
  for (int l = 1; l < opt.levels && ps.back().h / 2 >= opt.block && ps.back().w / 2 >= opt.block; ++l) {
    ps.push_back(downsample(ps.back()));
    pd.push_back(downsample(pd.back()));
  }

  BlockFlow coarse;
  int coarse_level = -1;
  const int b = opt.block;
  BlockFlow fine;
  for (int l = static_cast<int>(ps.size()) - 1; l >= 0; --l) {
    const Plane& s = ps[l];
    const Plane& d = pd[l];
    BlockFlow cur;
    cur.rows = (s.h + b - 1) / b;
    cur.cols = (s.w + b - 1) / b;
    cur.dx.assign(static_cast<size_t>(cur.rows) * cur.cols, 0);
    cur.dy.assign(cur.dx.size(), 0);
#pragma omp parallel for schedule(static)
    for (int br = 0; br < cur.rows; ++br)
      for (int bc = 0; bc < cur.cols; ++bc) {
        const int y0 = br * b, x0 = bc * b;
        const int bh = std::min(b, s.h - y0), bw = std::min(b, s.w - x0);
        int px = 0, py = 0;
        if (coarse_level >= 0) {
          const int cr = std::min((y0 + bh / 2) / 2 / b, coarse.rows - 1);
          const int cc = std::min((x0 + bw / 2) / 2 / b, coarse.cols - 1);
          px = 2 * coarse.dx[static_cast<size_t>(cr) * coarse.cols + cc];
          py = 2 * coarse.dy[static_cast<size_t>(cr) * coarse.cols + cc];
        }
        double best = std::numeric_limits<double>::infinity();
        int bx = px, by = py, best_norm = 0;
        for (int dy = py - opt.radius; dy <= py + opt.radius; ++dy)
          for (int dx = px - opt.radius; dx <= px + opt.radius; ++dx) {
            const double sad = block_sad(s, d, y0, x0, bh, bw, dy, dx);
            const int norm = std::abs(dy - py) + std::abs(dx - px);
            // Ties go to the candidate closest to the prediction.
            if (sad < best || (sad == best && norm < best_norm)) {
              best = sad;
              bx = dx;
              by = dy;
              best_norm = norm;
            }
          }
        cur.dx[static_cast<size_t>(br) * cur.cols + bc] = bx;
        cur.dy[static_cast<size_t>(br) * cur.cols + bc] = by;
      }
    coarse = std::move(cur);
    coarse_level = l;
  }
  fine = std::move(coarse);

  FlowField flow(src.height, src.width);
  const Plane& s = ps[0];
  const Plane& d = pd[0];
  for (int br = 0; br < fine.rows; ++br)
    for (int bc = 0; bc < fine.cols; ++bc) {
      const int y0 = br * b, x0 = bc * b;
      const int bh = std::min(b, s.h - y0), bw = std::min(b, s.w - x0);
      const int dx = fine.dx[static_cast<size_t>(br) * fine.cols + bc];
      const int dy = fine.dy[static_cast<size_t>(br) * fine.cols + bc];
      const double c0 = block_sad(s, d, y0, x0, bh, bw, dy, dx);
      const double ox = half_pel(block_sad(s, d, y0, x0, bh, bw, dy, dx - 1), c0,
                                 block_sad(s, d, y0, x0, bh, bw, dy, dx + 1));
      const double oy = half_pel(block_sad(s, d, y0, x0, bh, bw, dy - 1, dx), c0,
                                 block_sad(s, d, y0, x0, bh, bw, dy + 1, dx));
      for (int y = y0; y < y0 + bh; ++y)
        for (int x = x0; x < x0 + bw; ++x) {
          flow.u_at(y, x) = static_cast<float>(dx + ox);
          flow.v_at(y, x) = static_cast<float>(dy + oy);
        }
    }
  return flow;
}

}  // namespace devisp::align
