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

// Optimization loop: Adam with a constant-then-linear-decay schedule,
// checkpoint/resume, pretrain/finetune with frozen normalization statistics,
// and evaluation against aligned, occlusion-masked ground truth.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "devisp/data.hpp"
#include "devisp/losses.hpp"
#include "devisp/nnisp.hpp"

namespace devisp::train {

using json = nlohmann::json;

struct TrainConfig {
  int epochs = 30;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int batch_size = 8;
  uint64_t seed = 0;
  bool freeze_norm_stats = false;
  /// Write a numbered checkpoint every this many epochs (0: final only).
  int checkpoint_every = 0;
  /// Validate every this many epochs (0: never).
  int val_every = 1;
  data::SamplerConfig sampler;
  std::string alignment = "recorded";  // recorded | estimated
  loss::LossWeights weights;

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

/// Constant lr for the first half of the epochs, then linear decay reaching
/// exactly 0 at epoch == epochs.
double lr_at(int epoch, const TrainConfig& cfg);

/// Adam over a fixed, named parameter list. Moments and parameters are kept
/// on the float32 grid so that checkpoints reload bit-exactly.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const std::vector<std::pair<std::string, ag::Variable>>& params);
  /// One update with learning rate `lr` from the gradients currently held by
  /// the parameters. Parameters without a gradient see a zero gradient.
  void step(const std::vector<std::pair<std::string, ag::Variable>>& params, double lr, double beta1,
            double beta2, double eps);
  int64_t t() const { return t_; }
  /// Appends `adam.m/<name>` and `adam.v/<name>` tensors.
  void save(io::Checkpoint& ck) const;
  void load(const io::Checkpoint& ck, int64_t t);

 private:
  std::map<std::string, Tensor> m_, v_;
  int64_t t_ = 0;
};

struct EvalOptions {
  std::string split = "test";
  /// Also classify every conditioned output to its nearest ground truth and
  /// measure the spread between device renditions.
  bool style_stats = true;
};

struct EvalResult {
  loss::MetricReport report;
  /// Fraction of (scene, device) outputs whose nearest ground truth (masked
  /// MSE over all K devices) belongs to the conditioning device.
  double style_accuracy = 0.0;
  /// Mean CIEDE2000 between outputs for different devices of one scene.
  double mean_pairwise_delta_e = 0.0;
  int scenes = 0;
  json to_json() const;
};

/// Runs the network on a whole packed frame ([4,h,w]) with the given device
/// weights in evaluation mode; returns [3, 2h, 2w].
Tensor render(const nn::Network& net, const Tensor& packed, const io::RawMeta& meta,
              const std::vector<double>& device_weights);

EvalResult evaluate(const nn::Network& net, const data::Dataset& ds, const EvalOptions& opt = {});

struct EpochLog {
  int epoch = 0;  // 1-based count of completed epochs
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<loss::MetricReport> val;
  json to_json() const;
};

/// Training state: the network, the optimizer, the sampler stream and the
/// progress counters. Serializes to a single checkpoint.
class Trainer {
 public:
  /// Fresh weights from `model`.
  Trainer(const nn::ModelConfig& model, const TrainConfig& cfg);
  /// Initializes the weights (and statistics) from a pretrained checkpoint;
  /// optimizer and progress start from scratch.
  static Trainer from_pretrained(const io::Checkpoint& pretrained, const TrainConfig& cfg);
  /// Restores the complete state written by to_checkpoint.
  static Trainer resume(const io::Checkpoint& ck);

  /// Trains until `until_epoch` epochs are complete (default: cfg.epochs).
  /// Appends one line per epoch to `log_path` when set and writes numbered
  /// checkpoints into `ckpt_dir` at the configured cadence.
  std::vector<EpochLog> run(const data::Dataset& ds, int until_epoch = -1, const std::string& log_path = "",
                            const std::string& ckpt_dir = "");
  /// One optimizer step on `batch`; a non-finite loss or gradient aborts the
  /// step before any parameter changes.
  loss::LossTerms step(const data::Batch& batch, double lr);

  io::Checkpoint to_checkpoint() const;
  const nn::Network& network() const { return net_; }
  nn::Network& network() { return net_; }
  const TrainConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  int64_t steps() const { return step_; }
  std::function<void(const EpochLog&)> on_epoch;

 private:
  Trainer(nn::Network net, const TrainConfig& cfg);
  /// Divergence report (nan_dump.json, plus nan_dump.ckpt while the weights
  /// are still finite).
  void dump_state(const std::string& reason, const std::string& dir) const;
  nn::Network net_;
  TrainConfig cfg_;
  Adam adam_;
  loss::FeatureStack stack_;
  Rng rng_;
  int epoch_ = 0;
  int64_t step_ = 0;
};

/// Dotted-path override of a JSON object ("a.b.c=value"); the path must
/// already exist. The value is parsed as JSON, falling back to a string.
void apply_override(json& config, const std::string& assignment);

}  // namespace devisp::train
