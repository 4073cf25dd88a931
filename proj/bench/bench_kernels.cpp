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

// Parallel kernels vs the serial reference. Run with OMP_NUM_THREADS to vary
// the thread count of the parallel side.

#include <benchmark/benchmark.h>

#include <vector>

#include "devisp/kernels.hpp"
#include "devisp/rng.hpp"

namespace {

using devisp::ConvGeom;

std::vector<double> random_vec(size_t n, uint64_t seed) {
  devisp::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Gemm>
void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  auto a = random_vec(static_cast<size_t>(n) * n, 1), b = random_vec(static_cast<size_t>(n) * n, 2);
  std::vector<double> c(static_cast<size_t>(n) * n);
  for (auto _ : state) {
    Gemm(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

ConvGeom conv_geom(int ch, int size) { return ConvGeom{8, ch, size, size, ch, 3, 1, 1}; }

template <auto Fwd>
void BM_ConvForward(benchmark::State& state) {
  const ConvGeom g = conv_geom(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  auto x = random_vec(static_cast<size_t>(g.batch) * g.in_ch * g.height * g.width, 3);
  auto w = random_vec(static_cast<size_t>(g.out_ch) * g.in_ch * 9, 4);
  std::vector<double> y(static_cast<size_t>(g.batch) * g.out_ch * g.out_h() * g.out_w());
  for (auto _ : state) {
    Fwd(g, x.data(), w.data(), nullptr, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Bwd>
void BM_ConvBackward(benchmark::State& state) {
  const ConvGeom g = conv_geom(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const size_t xn = static_cast<size_t>(g.batch) * g.in_ch * g.height * g.width;
  auto x = random_vec(xn, 5), dy = random_vec(xn, 6);
  auto w = random_vec(static_cast<size_t>(g.out_ch) * g.in_ch * 9, 7);
  std::vector<double> dx(xn), dw(w.size()), db(g.out_ch);
  for (auto _ : state) {
    Bwd(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dx.data());
  }
}

BENCHMARK(BM_Gemm<devisp::kernels::gemm>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<devisp::reference::gemm>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_ConvForward<devisp::kernels::conv2d_forward>)
    ->Name("conv3x3_forward/parallel")->Args({16, 32})->Args({64, 16});
BENCHMARK(BM_ConvForward<devisp::reference::conv2d_forward>)
    ->Name("conv3x3_forward/reference")->Args({16, 32})->Args({64, 16});
BENCHMARK(BM_ConvBackward<devisp::kernels::conv2d_backward>)
    ->Name("conv3x3_backward/parallel")->Args({16, 32})->Args({64, 16});
BENCHMARK(BM_ConvBackward<devisp::reference::conv2d_backward>)
    ->Name("conv3x3_backward/reference")->Args({16, 32})->Args({64, 16});

}  // namespace

BENCHMARK_MAIN();
