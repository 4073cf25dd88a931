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

// Device-conditioned RAW-to-sRGB network. A wavelet U-Net over the packed
// RGGB patch, conditioned on a device embedding, white-balance gains,
// ISO/exposure and a cross-covariance attention summary of the full frame.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "devisp/autograd.hpp"
#include "devisp/imageio.hpp"
#include "json.hpp"

namespace devisp::nn {

using ag::Variable;
using json = nlohmann::json;

struct XcitConfig {
  int patch = 16;
  int blocks = 4;
  int dim = 128;
  int heads = 4;
  int input_size = 256;
  int class_blocks = 2;
  int mlp_ratio = 4;
};

/// Optional conditioning paths. All on is the full model; all off is the
/// plain conditioned U-Net.
struct Features {
  bool adapt_illuminants = true;
  bool global_semantics = true;
  bool attention = true;
  bool iso_exp = true;
};

struct ModelConfig {
  std::string scale = "full";  // "full" | "toy" | "custom"
  int levels = 3;
  std::vector<int> widths{48, 96, 192};
  int bottleneck_width = 512;
  int bottleneck_inner = 64;  // inner width of the 1×1-3×3-1×1 bottleneck blocks
  int embed_dim = 128;
  int res_attn_blocks_per_level = 1;
  int bottleneck_res_blocks = 2;
  int attn_heads = 4;
  XcitConfig xcit;
  int num_devices = 3;
  Features features;
  /// false: no embedding table; the network renders a single style.
  bool conditioned = true;
  std::string pipeline = "meta-wb";  // "meta-wb" | "learned-wb"
  int illum_width = 16;              // first conv width of the illuminant branch
  uint64_t seed = 0;

  static ModelConfig full(int num_devices = 3);
  static ModelConfig toy(int num_devices = 3);
  /// Table-2 style ablation rows: 'A' (no optional features) through 'E' (all).
  static ModelConfig ablation(char row, ModelConfig base);

  void validate() const;
  bool learned_wb() const { return pipeline == "learned-wb"; }
  json to_json() const;
  /// Starts from the preset named by "scale" (default full) and applies the
  /// remaining keys; unknown keys are rejected.
  static ModelConfig from_json(const json& j);
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Every learnable tensor of a configuration, in a fixed order.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);
size_t param_count(const ModelConfig& cfg);
/// Parameter totals grouped by the first component of the name.
std::map<std::string, size_t> param_breakdown(const ModelConfig& cfg);

/// kTrain: batch statistics in the global-semantics normalization (running
/// statistics updated unless frozen). kEval and kFrozen use the stored
/// statistics and never touch them.
enum class Mode { kTrain, kEval, kFrozen };

/// One forward batch. `x` is the packed, normalized patch [N,4,H,W]; `full`
/// is the packed full frame [N,4,Hf,Wf] (may equal x for whole-image runs).
struct ForwardInput {
  Variable x;
  Tensor full;
  Tensor device_weights;  // [N,K]; rows on the simplex
  Tensor wb;              // [N,4] metadata gains (used by meta-wb)
  std::vector<double> iso, exposure_s;
  /// Patch origin (row, col) in packed full-frame coordinates; empty = zeros.
  std::vector<std::array<int, 2>> origin;
};

struct ForwardAux {
  Variable wb_used;      // [N,4]
  Variable alpha, beta;  // [N, widths[0]]
  Variable g;            // [N, bottleneck_width]
  Variable e;            // [N, embed_dim], undefined when unconditioned
};

struct ForwardOutput {
  Variable y;  // [N,3,2H,2W] in [0,1]
  ForwardAux aux;
};

class Network {
 public:
  explicit Network(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Variable>>& params() const { return params_; }
  const Variable& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) > 0; }
  /// Normalization running statistics (non-learnable state).
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  size_t param_count() const;

  /// When set, the global-semantics normalization always uses (and never
  /// updates) the stored running statistics.
  void freeze_norm_stats(bool frozen) { stats_frozen_ = frozen; }
  bool norm_stats_frozen() const { return stats_frozen_; }

  ForwardOutput forward(const ForwardInput& in, Mode mode) const;
  /// As forward, with the device embedding given explicitly ([N,embed_dim]).
  ForwardOutput forward_with_embedding(const ForwardInput& in, const Variable& e, Mode mode) const;

  // Blocks, exposed for testing.
  Variable embed_device(const Tensor& weights) const;  // [N,K] -> [N,E]
  std::pair<Variable, Variable> wb_branch(const Variable& wb) const;
  Variable illum_branch(const Tensor& full_resized, const Variable& e) const;
  std::pair<Variable, Variable> iso_exp_branch(const std::vector<double>& iso,
                                               const std::vector<double>& exposure_s) const;
  Variable encoder_attention(int level, const Variable& f, const Tensor& pos) const;
  Variable decoder_attention(int level, const Variable& f, const Variable& e, const Tensor& pos) const;
  Variable global_semantics(const Tensor& full, Mode mode) const;
  /// Cross-covariance attention of one block on tokens [N,T,D].
  Variable xca(const std::string& prefix, const Variable& tokens) const;

  io::Checkpoint to_checkpoint() const;
  static Network from_checkpoint(const io::Checkpoint& ck);
  /// Copies parameter and buffer values from `ck` (names and shapes must match).
  void load_state(const io::Checkpoint& ck);

 private:
  Variable p(const std::string& name) const { return param(name); }
  Variable attention_core(const std::string& prefix, const Variable& f, const Variable& query,
                          const Tensor& pos) const;
  Variable res_block(const std::string& prefix, const Variable& f) const;
  Variable bottleneck_block(const std::string& prefix, const Variable& f) const;
  Variable batch_norm(const std::string& prefix, const Variable& x, Mode mode) const;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Variable>> params_;
  std::map<std::string, size_t> index_;
  mutable std::map<std::string, Tensor> buffers_;
  bool stats_frozen_ = false;
};

/// Bilinear resize of [N,C,H,W] to [N,C,size,size] (half-pixel centres).
Tensor resize_bilinear(const Tensor& x, int size);

/// Fixed 2-D sinusoidal encoding for a token grid of `h`×`w` with spacing
/// `step`, offset per sample by `origin`: returns [N, h·w, dim].
Tensor positional_encoding(int dim, int h, int w, int step, const std::vector<std::array<int, 2>>& origin,
                           int batch);

/// Normalizes ISO and exposure to log2(iso/100) and log2(exposure_s·1000).
std::pair<double, double> normalize_iso_exposure(double iso, double exposure_s);

/// Validates and simplex-normalizes interpolation weights. Returns true when
/// the input needed normalization.
bool normalize_device_weights(std::vector<double>& w);

}  // namespace devisp::nn
