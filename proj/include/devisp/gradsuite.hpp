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

// Finite-difference verification of every differentiable block: autograd
// ops, network branches, losses and the full forward pass plus loss.

#include <string>
#include <vector>

#include "devisp/gradcheck.hpp"
#include "devisp/nnisp.hpp"

namespace devisp::train {

struct GradBlockResult {
  std::string block;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  std::string worst;
  size_t checked = 0;
  double seconds = 0.0;
  bool pass() const { return max_rel_err < tolerance; }
  nlohmann::json to_json() const;
};

/// Names accepted by grad_check_block, in suite order.
const std::vector<std::string>& grad_blocks();

/// Suite defaults: h = 1e-5 and a denominator floor of 1e-5, so entries whose
/// true gradient vanishes (key biases under softmax shift invariance) are
/// judged on absolute error instead of on roundoff.
ag::GradCheckOptions suite_options();

/// Checks one block on randomized small inputs. Network blocks use `model`
/// (its sizes, toggles and seed); the step h comes from `opt`.
GradBlockResult grad_check_block(const std::string& block, const nn::ModelConfig& model,
                                 const ag::GradCheckOptions& opt = suite_options());

/// Runs the blocks in `selection` ("all" or a list of names).
std::vector<GradBlockResult> grad_suite(const nn::ModelConfig& model, const std::vector<std::string>& selection,
                                        const ag::GradCheckOptions& opt = suite_options());

}  // namespace devisp::train
