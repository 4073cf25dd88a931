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

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "devisp/autograd.hpp"

namespace devisp::ag {

struct GradCheckOptions {
  double h = 1e-5;
  /// Floor on the denominator of the relative error so that entries whose
  /// true gradient is ~0 are judged on absolute error instead.
  double tau = 1e-6;
  /// Entries sampled per tensor; tensors at or below this size are checked fully.
  size_t samples_per_tensor = 24;
  uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "<name>[<index>]" of the largest error
  double analytic = 0.0, numeric = 0.0;
  size_t checked = 0;
};

/// Central-difference check of d loss / d wrt[i]. `loss` must rebuild the
/// graph from the current values of `wrt` every call and return one element.
GradCheckResult grad_check(const std::function<Variable()>& loss,
                           const std::vector<std::pair<std::string, Variable>>& wrt,
                           const GradCheckOptions& opt = {});

}  // namespace devisp::ag
