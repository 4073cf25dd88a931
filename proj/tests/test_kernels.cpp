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

// Parallel kernels against the serial reference implementations.

#include <omp.h>

#include <gtest/gtest.h>

#include "devisp/kernels.hpp"
#include "test_util.hpp"

namespace devisp {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

struct GemmCase {
  int m, n, k;
};

class GemmTest : public ::testing::TestWithParam<GemmCase> {};

TEST_P(GemmTest, MatchesReference) {
  const auto [m, n, k] = GetParam();
  Rng rng(m * 1000 + n * 10 + k);
  Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
  for (bool acc : {false, true}) {
    Tensor c0 = random_tensor({m, n}, rng);
    Tensor c1 = c0;
    kernels::gemm(m, n, k, a.data(), b.data(), c0.data(), acc);
    reference::gemm(m, n, k, a.data(), b.data(), c1.data(), acc);
    EXPECT_LT(max_abs_diff(c0, c1), 1e-12 * k) << "accumulate=" << acc;
  }
}

INSTANTIATE_TEST_SUITE_P(Shapes, GemmTest,
                         ::testing::Values(GemmCase{1, 1, 1}, GemmCase{4, 16, 8}, GemmCase{5, 17, 3},
                                           GemmCase{3, 33, 65}, GemmCase{37, 50, 129},
                                           GemmCase{64, 64, 64}, GemmCase{2, 7, 300}));

TEST(Kernels, TransposeRoundTrip) {
  Rng rng(1);
  Tensor a = random_tensor({37, 53}, rng);
  Tensor t({53, 37}), back({37, 53});
  kernels::transpose(37, 53, a.data(), t.data());
  EXPECT_EQ(t[5 * 37 + 3], a[3 * 53 + 5]);
  kernels::transpose(53, 37, t.data(), back.data());
  EXPECT_EQ(max_abs_diff(a, back), 0.0);
}

class ConvTest : public ::testing::TestWithParam<ConvGeom> {};

TEST_P(ConvTest, ForwardBackwardMatchReference) {
  const ConvGeom g = GetParam();
  Rng rng(g.in_ch * 31 + g.out_ch * 7 + g.kernel + g.stride);
  Tensor x = random_tensor({g.batch, g.in_ch, g.height, g.width}, rng);
  Tensor w = random_tensor({g.out_ch, g.in_ch, g.kernel, g.kernel}, rng);
  Tensor b = random_tensor({g.out_ch}, rng);
  Shape ys{g.batch, g.out_ch, g.out_h(), g.out_w()};
  Tensor y0(ys), y1(ys);
  kernels::conv2d_forward(g, x.data(), w.data(), b.data(), y0.data());
  reference::conv2d_forward(g, x.data(), w.data(), b.data(), y1.data());
  EXPECT_LT(max_abs_diff(y0, y1), 1e-11);

  Tensor dy = random_tensor(ys, rng);
  Tensor dx0 = random_tensor(x.shape(), rng), dw0 = random_tensor(w.shape(), rng),
         db0 = random_tensor(b.shape(), rng);
  Tensor dx1 = dx0, dw1 = dw0, db1 = db0;
  kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), dx0.data(), dw0.data(), db0.data());
  reference::conv2d_backward(g, x.data(), w.data(), dy.data(), dx1.data(), dw1.data(), db1.data());
  EXPECT_LT(max_abs_diff(dx0, dx1), 1e-10);
  EXPECT_LT(max_abs_diff(dw0, dw1), 1e-10);
  EXPECT_LT(max_abs_diff(db0, db1), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(
    Geometries, ConvTest,
    ::testing::Values(ConvGeom{1, 1, 5, 5, 1, 3, 1, 1}, ConvGeom{2, 3, 8, 6, 5, 3, 1, 1},
                      ConvGeom{2, 4, 9, 9, 6, 3, 2, 1}, ConvGeom{3, 7, 4, 4, 9, 1, 1, 0},
                      ConvGeom{1, 8, 16, 16, 8, 4, 4, 0}, ConvGeom{2, 2, 7, 5, 3, 5, 1, 2}));

TEST(Kernels, ConvBackwardSkipsNullOutputs) {
  ConvGeom g{1, 2, 4, 4, 3, 3, 1, 1};
  Rng rng(5);
  Tensor x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  Tensor dy = random_tensor({1, 3, 4, 4}, rng);
  Tensor dw(w.shape()), dw_ref(w.shape());
  kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), nullptr, dw.data(), nullptr);
  reference::conv2d_backward(g, x.data(), w.data(), dy.data(), nullptr, dw_ref.data(), nullptr);
  EXPECT_LT(max_abs_diff(dw, dw_ref), 1e-12);
}

class DepthwiseTest : public ::testing::TestWithParam<ConvGeom> {};

TEST_P(DepthwiseTest, ForwardBackwardMatchReference) {
  const ConvGeom g = GetParam();
  Rng rng(g.in_ch + g.kernel);
  Tensor x = random_tensor({g.batch, g.in_ch, g.height, g.width}, rng);
  Tensor w = random_tensor({g.in_ch, g.kernel, g.kernel}, rng);
  Tensor b = random_tensor({g.in_ch}, rng);
  Shape ys{g.batch, g.in_ch, g.out_h(), g.out_w()};
  Tensor y0(ys), y1(ys);
  kernels::depthwise_forward(g, x.data(), w.data(), b.data(), y0.data());
  reference::depthwise_forward(g, x.data(), w.data(), b.data(), y1.data());
  EXPECT_LT(max_abs_diff(y0, y1), 1e-12);

  Tensor dy = random_tensor(ys, rng);
  Tensor dx0(x.shape()), dw0(w.shape()), db0(b.shape());
  Tensor dx1(x.shape()), dw1(w.shape()), db1(b.shape());
  kernels::depthwise_backward(g, x.data(), w.data(), dy.data(), dx0.data(), dw0.data(), db0.data());
  reference::depthwise_backward(g, x.data(), w.data(), dy.data(), dx1.data(), dw1.data(), db1.data());
  EXPECT_LT(max_abs_diff(dx0, dx1), 1e-12);
  EXPECT_LT(max_abs_diff(dw0, dw1), 1e-11);
  EXPECT_LT(max_abs_diff(db0, db1), 1e-11);
}

INSTANTIATE_TEST_SUITE_P(Geometries, DepthwiseTest,
                         ::testing::Values(ConvGeom{1, 1, 5, 5, 1, 3, 1, 1},
                                           ConvGeom{2, 6, 7, 9, 6, 3, 1, 1},
                                           ConvGeom{3, 4, 8, 8, 4, 3, 2, 1}));

TEST(Kernels, ResultsIndependentOfThreadCount) {
  ConvGeom g{4, 6, 12, 12, 10, 3, 1, 1};
  Rng rng(9);
  Tensor x = random_tensor({4, 6, 12, 12}, rng), w = random_tensor({10, 6, 3, 3}, rng);
  Tensor dy = random_tensor({4, 10, 12, 12}, rng);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    Tensor y({4, 10, 12, 12}), dx(x.shape()), dw(w.shape());
    kernels::conv2d_forward(g, x.data(), w.data(), nullptr, y.data());
    kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), nullptr);
    return std::vector<Tensor>{y, dx, dw};
  };
  const int saved = omp_get_max_threads();
  auto one = run(1);
  auto four = run(4);
  omp_set_num_threads(saved);
  for (size_t i = 0; i < one.size(); ++i) EXPECT_EQ(one[i].vec(), four[i].vec()) << "output " << i;
}

}  // namespace
}  // namespace devisp
