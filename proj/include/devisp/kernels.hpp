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

// Compute kernels behind the autograd ops. Everything here is OpenMP-parallel
// over independent output elements only, so results are bitwise identical for
// any thread count. `devisp::reference` holds the straight-line serial
// versions the tests and the benchmark compare against.

namespace devisp {

struct ConvGeom {
  int batch = 1;
  int in_ch = 1;
  int height = 1;
  int width = 1;
  int out_ch = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
};

namespace kernels {

/// C[M×N] (+)= A[M×K] · B[K×N], all row-major and densely packed.
void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);

void transpose(int rows, int cols, const double* src, double* dst);

/// y = conv(x, w) + b with w laid out [out_ch, in_ch, k, k]. `bias` may be null.
void conv2d_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                    double* y);

/// Accumulates into whichever of dx, dw, db are non-null.
void conv2d_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db);

/// Per-channel convolution (in_ch == out_ch), w laid out [ch, k, k].
void depthwise_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                       double* y);
void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                        double* dx, double* dw, double* db);

}  // namespace kernels

namespace reference {

void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void conv2d_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                    double* y);
void conv2d_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db);
void depthwise_forward(const ConvGeom& g, const double* x, const double* w, const double* bias,
                       double* y);
void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* dy,
                        double* dx, double* dw, double* db);

}  // namespace reference

}  // namespace devisp
