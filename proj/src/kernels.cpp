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

#include "devisp/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace devisp::kernels {
namespace {

typedef double v4d __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}
inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof(v)); }

// 4×16 register tile: C[0:4, 0:16] += A[0:4, 0:K] · B[0:K, 0:16].
inline void micro_4x16(int k, const double* a, int lda, const double* b, int ldb, double* c,
                       int ldc) {
  v4d c00 = load4(c), c01 = load4(c + 4), c02 = load4(c + 8), c03 = load4(c + 12);
  v4d c10 = load4(c + ldc), c11 = load4(c + ldc + 4), c12 = load4(c + ldc + 8),
      c13 = load4(c + ldc + 12);
  v4d c20 = load4(c + 2 * ldc), c21 = load4(c + 2 * ldc + 4), c22 = load4(c + 2 * ldc + 8),
      c23 = load4(c + 2 * ldc + 12);
  v4d c30 = load4(c + 3 * ldc), c31 = load4(c + 3 * ldc + 4), c32 = load4(c + 3 * ldc + 8),
      c33 = load4(c + 3 * ldc + 12);
  for (int p = 0; p < k; ++p) {
    const double* bp = b + static_cast<size_t>(p) * ldb;
    const v4d b0 = load4(bp), b1 = load4(bp + 4), b2 = load4(bp + 8), b3 = load4(bp + 12);
    const double a0 = a[p], a1 = a[lda + p], a2 = a[2 * lda + p], a3 = a[3 * lda + p];
    c00 += a0 * b0; c01 += a0 * b1; c02 += a0 * b2; c03 += a0 * b3;
    c10 += a1 * b0; c11 += a1 * b1; c12 += a1 * b2; c13 += a1 * b3;
    c20 += a2 * b0; c21 += a2 * b1; c22 += a2 * b2; c23 += a2 * b3;
    c30 += a3 * b0; c31 += a3 * b1; c32 += a3 * b2; c33 += a3 * b3;
  }
  store4(c, c00); store4(c + 4, c01); store4(c + 8, c02); store4(c + 12, c03);
  store4(c + ldc, c10); store4(c + ldc + 4, c11); store4(c + ldc + 8, c12);
  store4(c + ldc + 12, c13);
  store4(c + 2 * ldc, c20); store4(c + 2 * ldc + 4, c21); store4(c + 2 * ldc + 8, c22);
  store4(c + 2 * ldc + 12, c23);
  store4(c + 3 * ldc, c30); store4(c + 3 * ldc + 4, c31); store4(c + 3 * ldc + 8, c32);
  store4(c + 3 * ldc + 12, c33);
}

inline void row_tail(int row, int j0, int n, int k, const double* a, const double* b, double* c) {
  double* crow = c + static_cast<size_t>(row) * n;
  const double* arow = a + static_cast<size_t>(row) * k;
  for (int p = 0; p < k; ++p) {
    const double av = arow[p];
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int j = j0; j < n; ++j) crow[j] += av * brow[j];
  }
}

void im2col(const ConvGeom& g, const double* x, double* col) {
  const int ho = g.out_h(), wo = g.out_w(), kk = g.kernel;
  const int rows = g.in_ch * kk * kk;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int ci = r / (kk * kk);
    const int ky = (r / kk) % kk;
    const int kx = r % kk;
    const double* xc = x + static_cast<size_t>(ci) * g.height * g.width;
    double* out = col + static_cast<size_t>(r) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const int iy = oy * g.stride - g.pad + ky;
      double* orow = out + static_cast<size_t>(oy) * wo;
      if (iy < 0 || iy >= g.height) {
        std::fill(orow, orow + wo, 0.0);
        continue;
      }
      const double* xrow = xc + static_cast<size_t>(iy) * g.width;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix = ox * g.stride - g.pad + kx;
        orow[ox] = (ix >= 0 && ix < g.width) ? xrow[ix] : 0.0;
      }
    }
  }
}

// Scatter-add of a column buffer back into an image. Parallel over input
// channels: every channel only receives contributions from its own rows.
void col2im_add(const ConvGeom& g, const double* col, double* dx) {
  const int ho = g.out_h(), wo = g.out_w(), kk = g.kernel;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.in_ch; ++ci) {
    double* xc = dx + static_cast<size_t>(ci) * g.height * g.width;
    for (int ky = 0; ky < kk; ++ky) {
      for (int kx = 0; kx < kk; ++kx) {
        const double* in = col + (static_cast<size_t>(ci) * kk * kk + ky * kk + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          double* xrow = xc + static_cast<size_t>(iy) * g.width;
          const double* crow = in + static_cast<size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) xrow[ix] += crow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  const int n16 = n - n % 16;
  const int mblocks = (m + 3) / 4;
#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < mblocks; ++bi) {
    const int i = bi * 4;
    if (i + 4 <= m) {
      for (int j = 0; j < n16; j += 16)
        micro_4x16(k, a + static_cast<size_t>(i) * k, k, b + j, n, c + static_cast<size_t>(i) * n + j, n);
      if (n16 < n)
        for (int r = i; r < i + 4; ++r) row_tail(r, n16, n, k, a, b, c);
    } else {
      for (int r = i; r < m; ++r) row_tail(r, 0, n, k, a, b, c);
    }
  }
}

void transpose(int rows, int cols, const double* src, double* dst) {
  constexpr int kBlock = 32;
#pragma omp parallel for schedule(static)
  for (int r0 = 0; r0 < rows; r0 += kBlock) {
    for (int c0 = 0; c0 < cols; c0 += kBlock) {
      const int r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
      for (int r = r0; r < r1; ++r)
        for (int cc = c0; cc < c1; ++cc)
          dst[static_cast<size_t>(cc) * rows + r] = src[static_cast<size_t>(r) * cols + cc];
    }
  }
}

void conv2d_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const int ho = g.out_h(), wo = g.out_w();
  const int hw = ho * wo;
  const int kdim = g.in_ch * g.kernel * g.kernel;
  std::vector<double> col;
  if (!is_pointwise(g)) col.resize(static_cast<size_t>(kdim) * hw);
  for (int n = 0; n < g.batch; ++n) {
    const double* xn = x + static_cast<size_t>(n) * g.in_ch * g.height * g.width;
    double* yn = y + static_cast<size_t>(n) * g.out_ch * hw;
    const double* src = xn;
    if (!is_pointwise(g)) {
      im2col(g, xn, col.data());
      src = col.data();
    }
    if (bias) {
      for (int co = 0; co < g.out_ch; ++co)
        std::fill(yn + static_cast<size_t>(co) * hw, yn + static_cast<size_t>(co + 1) * hw, bias[co]);
      gemm(g.out_ch, hw, kdim, w, src, yn, true);
    } else {
      gemm(g.out_ch, hw, kdim, w, src, yn, false);
    }
  }
}

void conv2d_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db) {
  const int ho = g.out_h(), wo = g.out_w();
  const int hw = ho * wo;
  const int kdim = g.in_ch * g.kernel * g.kernel;
  const bool pointwise = is_pointwise(g);
  std::vector<double> col(static_cast<size_t>(kdim) * hw);
  std::vector<double> col_t;
  std::vector<double> w_t;
  if (dw) col_t.resize(static_cast<size_t>(kdim) * hw);
  if (dx) {
    w_t.resize(static_cast<size_t>(kdim) * g.out_ch);
    transpose(g.out_ch, kdim, w, w_t.data());
  }
  for (int n = 0; n < g.batch; ++n) {
    const double* xn = x + static_cast<size_t>(n) * g.in_ch * g.height * g.width;
    const double* dyn = dy + static_cast<size_t>(n) * g.out_ch * hw;
    if (db) {
      for (int co = 0; co < g.out_ch; ++co) {
        const double* row = dyn + static_cast<size_t>(co) * hw;
        double s = 0.0;
        for (int i = 0; i < hw; ++i) s += row[i];
        db[co] += s;
      }
    }
    if (dw) {
      const double* src = xn;
      if (!pointwise) {
        im2col(g, xn, col.data());
        src = col.data();
      }
      transpose(kdim, hw, src, col_t.data());
      gemm(g.out_ch, kdim, hw, dyn, col_t.data(), dw, true);
    }
    if (dx) {
      double* dxn = dx + static_cast<size_t>(n) * g.in_ch * g.height * g.width;
      if (pointwise) {
        gemm(kdim, hw, g.out_ch, w_t.data(), dyn, dxn, true);
      } else {
        gemm(kdim, hw, g.out_ch, w_t.data(), dyn, col.data(), false);
        col2im_add(g, col.data(), dxn);
      }
    }
  }
}

void depthwise_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                       double* y) {
  const int ho = g.out_h(), wo = g.out_w(), kk = g.kernel;
  const int planes = g.batch * g.in_ch;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const int c = p % g.in_ch;
    const double* xp = x + static_cast<size_t>(p) * g.height * g.width;
    const double* wc = w + static_cast<size_t>(c) * kk * kk;
    double* yp = y + static_cast<size_t>(p) * ho * wo;
    const double b = bias ? bias[c] : 0.0;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double s = b;
        for (int ky = 0; ky < kk; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          const double* xrow = xp + static_cast<size_t>(iy) * g.width;
          for (int kx = 0; kx < kk; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) s += wc[ky * kk + kx] * xrow[ix];
          }
        }
        yp[static_cast<size_t>(oy) * wo + ox] = s;
      }
    }
  }
}

void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                        double* dx, double* dw, double* db) {
  const int ho = g.out_h(), wo = g.out_w(), kk = g.kernel;
  // Weight and bias gradients: parallel over channels, fixed batch order.
  if (dw || db) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < g.in_ch; ++c) {
      for (int n = 0; n < g.batch; ++n) {
        const size_t p = static_cast<size_t>(n) * g.in_ch + c;
        const double* xp = x + p * g.height * g.width;
        const double* dyp = dy + p * ho * wo;
        if (db) {
          double s = 0.0;
          for (int i = 0; i < ho * wo; ++i) s += dyp[i];
          db[c] += s;
        }
        if (!dw) continue;
        for (int ky = 0; ky < kk; ++ky) {
          for (int kx = 0; kx < kk; ++kx) {
            double s = 0.0;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.height) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix >= 0 && ix < g.width)
                  s += dyp[static_cast<size_t>(oy) * wo + ox] * xp[static_cast<size_t>(iy) * g.width + ix];
              }
            }
            dw[static_cast<size_t>(c) * kk * kk + ky * kk + kx] += s;
          }
        }
      }
    }
  }
  if (dx) {
    const int planes = g.batch * g.in_ch;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
      const int c = p % g.in_ch;
      const double* wc = w + static_cast<size_t>(c) * kk * kk;
      const double* dyp = dy + static_cast<size_t>(p) * ho * wo;
      double* dxp = dx + static_cast<size_t>(p) * g.height * g.width;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const double gv = dyp[static_cast<size_t>(oy) * wo + ox];
          for (int ky = 0; ky < kk; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (int kx = 0; kx < kk; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.width)
                dxp[static_cast<size_t>(iy) * g.width + ix] += wc[ky * kk + kx] * gv;
            }
          }
        }
      }
    }
  }
}

}  // namespace devisp::kernels
