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

#include "devisp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "devisp/rng.hpp"

namespace devisp::ag {

GradCheckResult grad_check(const std::function<Variable()>& loss,
                           const std::vector<std::pair<std::string, Variable>>& wrt,
                           const GradCheckOptions& opt) {
  auto vars = wrt;
  for (auto& [name, v] : vars) {
    require(v.requires_grad(), "gradcheck", name + " does not require grad");
    v.zero_grad();
  }
  Variable out = loss();
  require(out.numel() == 1, "gradcheck", "loss must be a single element");
  out.backward();

  Rng rng(opt.seed);
  GradCheckResult res;
  for (auto& [name, v] : vars) {
    const Tensor analytic = v.has_grad() ? v.grad() : Tensor(v.shape(), 0.0);
    std::vector<size_t> idx(v.numel());
    std::iota(idx.begin(), idx.end(), size_t{0});
    if (idx.size() > opt.samples_per_tensor) {
      // Partial Fisher-Yates: the first k entries become a uniform sample.
      for (size_t i = 0; i < opt.samples_per_tensor; ++i) {
        const size_t j = i + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(idx.size() - i - 1)));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(opt.samples_per_tensor);
    }
    for (size_t i : idx) {
      double& x = v.value()[i];
      const double saved = x;
      double fp, fm;
      {
        NoGradGuard ng;
        x = saved + opt.h;
        fp = loss().value()[0];
        x = saved - opt.h;
        fm = loss().value()[0];
      }
      x = saved;
      const double num = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[i];
      const double rel = std::fabs(a - num) / std::max({std::fabs(a), std::fabs(num), opt.tau});
      ++res.checked;
      if (rel > res.max_rel_err || res.worst.empty()) {
        res.max_rel_err = std::max(rel, res.max_rel_err);
        if (rel >= res.max_rel_err) {
          res.worst = name + "[" + std::to_string(i) + "]";
          res.analytic = a;
          res.numeric = num;
        }
      }
    }
  }
  return res;
}

}  // namespace devisp::ag
