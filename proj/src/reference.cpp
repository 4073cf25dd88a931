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

// Serial direct-loop kernels. Slow on purpose: no im2col, no tiling.

#include <cstddef>

#include "devisp/kernels.hpp"

namespace devisp::reference {

void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<size_t>(i) * n + j] : 0.0;
      for (int p = 0; p < k; ++p) s += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
      c[static_cast<size_t>(i) * n + j] = s;
    }
  }
}

namespace {

inline size_t xidx(const ConvGeom& g, int n, int c, int y, int x) {
  return ((static_cast<size_t>(n) * g.in_ch + c) * g.height + y) * g.width + x;
}

}  // namespace

void conv2d_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const int ho = g.out_h(), wo = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_ch; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = bias ? bias[co] : 0.0;
          for (int ci = 0; ci < g.in_ch; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                s += w[((static_cast<size_t>(co) * g.in_ch + ci) * k + ky) * k + kx] * x[xidx(g, n, ci, iy, ix)];
              }
          y[((static_cast<size_t>(n) * g.out_ch + co) * ho + oy) * wo + ox] = s;
        }
}

void conv2d_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db) {
  const int ho = g.out_h(), wo = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_ch; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double gv = dy[((static_cast<size_t>(n) * g.out_ch + co) * ho + oy) * wo + ox];
          if (db) db[co] += gv;
          for (int ci = 0; ci < g.in_ch; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                const size_t wi = ((static_cast<size_t>(co) * g.in_ch + ci) * k + ky) * k + kx;
                if (dw) dw[wi] += gv * x[xidx(g, n, ci, iy, ix)];
                if (dx) dx[xidx(g, n, ci, iy, ix)] += gv * w[wi];
              }
        }
}

void depthwise_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                       double* y) {
  const int ho = g.out_h(), wo = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int c = 0; c < g.in_ch; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = bias ? bias[c] : 0.0;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
              s += w[(static_cast<size_t>(c) * k + ky) * k + kx] * x[xidx(g, n, c, iy, ix)];
            }
          y[((static_cast<size_t>(n) * g.in_ch + c) * ho + oy) * wo + ox] = s;
        }
}

void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                        double* dx, double* dw, double* db) {
  const int ho = g.out_h(), wo = g.out_w(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int c = 0; c < g.in_ch; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double gv = dy[((static_cast<size_t>(n) * g.in_ch + c) * ho + oy) * wo + ox];
          if (db) db[c] += gv;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
              const size_t wi = (static_cast<size_t>(c) * k + ky) * k + kx;
              if (dw) dw[wi] += gv * x[xidx(g, n, c, iy, ix)];
              if (dx) dx[xidx(g, n, c, iy, ix)] += gv * w[wi];
            }
        }
}

}  // namespace devisp::reference
