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

#include "devisp/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace devisp::train {

using ag::Variable;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  require(epochs >= 2, "config", "epochs must be at least 2 so that the decay phase exists");
  require(lr > 0 && std::isfinite(lr), "config", "lr must be positive");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "config", "Adam betas must lie in [0, 1)");
  require(eps > 0, "config", "Adam eps must be positive");
  require(batch_size >= 1, "config", "batch_size must be at least 1");
  require(checkpoint_every >= 0 && val_every >= 0, "config", "cadences must be non-negative");
  require(sampler.patch > 0 && sampler.crop > 0 && sampler.crop % sampler.patch == 0, "config",
          "sampler.crop must be a positive multiple of sampler.patch");
  data::alignment_from_string(alignment);
  weights.validate();
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"freeze_norm_stats", freeze_norm_stats},
          {"checkpoint_every", checkpoint_every},
          {"val_every", val_every},
          {"sampler", {{"patch", sampler.patch}, {"crop", sampler.crop}, {"flips", sampler.flips}}},
          {"alignment", alignment},
          {"loss", weights.to_json()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  require(j.is_object(), "config", "train config must be a JSON object");
  TrainConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "beta1") c.beta1 = v.get<double>();
    else if (k == "beta2") c.beta2 = v.get<double>();
    else if (k == "eps") c.eps = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<int>();
    else if (k == "seed") c.seed = v.get<uint64_t>();
    else if (k == "freeze_norm_stats") c.freeze_norm_stats = v.get<bool>();
    else if (k == "checkpoint_every") c.checkpoint_every = v.get<int>();
    else if (k == "val_every") c.val_every = v.get<int>();
    else if (k == "alignment") c.alignment = v.get<std::string>();
    else if (k == "loss") c.weights = loss::LossWeights::from_json(v);
    else if (k == "sampler") {
      require(v.is_object(), "config", "sampler must be an object");
      for (const auto& [sk, sv] : v.items()) {
        if (sk == "patch") c.sampler.patch = sv.get<int>();
        else if (sk == "crop") c.sampler.crop = sv.get<int>();
        else if (sk == "flips") c.sampler.flips = sv.get<bool>();
        else fail("config", "unknown sampler key '" + sk + "'");
      }
    } else {
      fail("config", "unknown train config key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  require(epoch >= 0 && epoch <= cfg.epochs, "value",
          "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  const double half = 0.5 * cfg.epochs;
  if (epoch < half) return cfg.lr;
  return cfg.lr * std::max(0.0, 1.0 - (epoch - half) / half);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(const std::vector<std::pair<std::string, Variable>>& params) {
  for (const auto& [name, p] : params) {
    m_[name] = Tensor(p.shape(), 0.0);
    v_[name] = Tensor(p.shape(), 0.0);
  }
}

void Adam::step(const std::vector<std::pair<std::string, Variable>>& params, double lr, double beta1,
                double beta2, double eps) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (const auto& [name, param] : params) {
    Variable p = param;
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    Tensor& w = p.value();
    const bool has = p.has_grad();
    const Tensor* g = has ? &p.grad() : nullptr;
    for (size_t i = 0; i < w.numel(); ++i) {
      const double gi = has ? (*g)[i] : 0.0;
      m[i] = static_cast<float>(beta1 * m[i] + (1 - beta1) * gi);
      v[i] = static_cast<float>(beta2 * v[i] + (1 - beta2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

void Adam::save(io::Checkpoint& ck) const {
  for (const auto& [name, t] : m_) ck.tensors.push_back({"adam.m/" + name, t});
  for (const auto& [name, t] : v_) ck.tensors.push_back({"adam.v/" + name, t});
}

void Adam::load(const io::Checkpoint& ck, int64_t t) {
  for (auto& [name, m] : m_) {
    const Tensor* src = ck.find("adam.m/" + name);
    require(src && src->same_shape(m), "format", "checkpoint lacks optimizer moment adam.m/" + name);
    m = *src;
  }
  for (auto& [name, v] : v_) {
    const Tensor* src = ck.find("adam.v/" + name);
    require(src && src->same_shape(v), "format", "checkpoint lacks optimizer moment adam.v/" + name);
    v = *src;
  }
  t_ = t;
}

// ---------------------------------------------------------------------------
// Evaluation

json EvalResult::to_json() const {
  json j = report.to_json();
  j["style_accuracy"] = loss::metric_to_json(style_accuracy);
  j["mean_pairwise_delta_e"] = loss::metric_to_json(mean_pairwise_delta_e);
  j["scenes"] = scenes;
  return j;
}

Tensor render(const nn::Network& net, const Tensor& packed, const io::RawMeta& meta,
              const std::vector<double>& device_weights) {
  require(packed.rank() == 3 && packed.dim(0) == 4, "shape", "render expects a packed [4,h,w] frame");
  ag::NoGradGuard no_grad;
  const int h = packed.dim(1), w = packed.dim(2);
  nn::ForwardInput in;
  in.x = ag::constant(packed.reshaped({1, 4, h, w}));
  in.full = in.x.value();
  in.device_weights = Tensor(Shape{1, static_cast<int>(device_weights.size())}, device_weights);
  in.wb = Tensor(Shape{1, 4}, std::vector<double>(meta.wb_gains.begin(), meta.wb_gains.end()));
  in.iso = {meta.iso};
  in.exposure_s = {meta.exposure_s};
  const Tensor y = net.forward(in, nn::Mode::kEval).y.value();
  return y.reshaped({3, 2 * h, 2 * w});
}

namespace {

double masked_mse(const Tensor& a, const Tensor& b, const Tensor& mask) {
  const size_t hw = mask.numel();
  double s = 0, n = 0;
  for (size_t i = 0; i < hw; ++i) {
    if (mask[i] == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = a[c * hw + i] - b[c * hw + i];
      s += d * d;
    }
    n += 3;
  }
  return n > 0 ? s / n : std::numeric_limits<double>::infinity();
}

std::vector<double> one_hot(int k, int K) {
  std::vector<double> w(K, 0.0);
  w[k] = 1.0;
  return w;
}

}  // namespace

EvalResult evaluate(const nn::Network& net, const data::Dataset& ds, const EvalOptions& opt) {
  const int K = ds.num_devices;
  require(K == net.config().num_devices, "value",
          "dataset has " + std::to_string(K) + " devices but the model expects " +
              std::to_string(net.config().num_devices));
  EvalResult r;
  double correct = 0, total = 0, de_sum = 0, de_n = 0;
  for (int s : ds.split_indices(opt.split)) {
    const data::SceneData& sd = ds.scenes[s];
    ++r.scenes;
    std::vector<Tensor> outs;
    for (int d = 0; d < K; ++d) {
      outs.push_back(render(net, sd.packed, sd.meta, one_hot(d, K)));
      const auto& t = sd.devices[d];
      r.report.add(d, loss::psnr(outs[d], t.aligned, t.mask), loss::masked_ssim(outs[d], t.aligned, t.mask),
                   loss::delta_e(outs[d], t.aligned, t.mask));
    }
    if (!opt.style_stats) continue;
    for (int d = 0; d < K; ++d) {
      int best = 0;
      double best_err = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        const double e = masked_mse(outs[d], sd.devices[k].aligned, sd.devices[k].mask);
        if (e < best_err) best_err = e, best = k;
      }
      correct += best == d;
      total += 1;
      for (int k = d + 1; k < K; ++k) {
        de_sum += loss::delta_e(outs[d], outs[k]);
        de_n += 1;
      }
    }
  }
  if (r.scenes == 0) r.report.add_missing("split '" + opt.split + "' is empty");
  r.style_accuracy = total > 0 ? correct / total : std::numeric_limits<double>::quiet_NaN();
  r.mean_pairwise_delta_e = de_n > 0 ? de_sum / de_n : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// ---------------------------------------------------------------------------
// Trainer

json EpochLog::to_json() const {
  json j = {{"epoch", epoch}, {"lr", lr}, {"train_loss", loss::metric_to_json(train_loss)}};
  if (val) j["val"] = val->to_json();
  return j;
}

Trainer::Trainer(nn::Network net, const TrainConfig& cfg)
    : net_(std::move(net)), cfg_(cfg), adam_(net_.params()), rng_(cfg.seed) {
  cfg_.validate();
}

Trainer::Trainer(const nn::ModelConfig& model, const TrainConfig& cfg) : Trainer(nn::Network(model), cfg) {
  require(!cfg.freeze_norm_stats, "config",
          "freeze_norm_stats needs pretrained normalization statistics; start from a checkpoint");
}

Trainer Trainer::from_pretrained(const io::Checkpoint& pretrained, const TrainConfig& cfg) {
  nn::Network net = nn::Network::from_checkpoint(pretrained);
  net.freeze_norm_stats(cfg.freeze_norm_stats);
  return Trainer(std::move(net), cfg);
}

Trainer Trainer::resume(const io::Checkpoint& ck) {
  require(ck.config.contains("train"), "format", "checkpoint has no training state to resume");
  Trainer t(nn::Network::from_checkpoint(ck), TrainConfig::from_json(ck.config.at("train")));
  t.adam_.load(ck, ck.meta.value("adam_t", int64_t{0}));
  t.epoch_ = ck.meta.value("epoch", 0);
  t.step_ = ck.meta.value("step", int64_t{0});
  t.rng_.set_state(ck.rng_state);
  return t;
}

io::Checkpoint Trainer::to_checkpoint() const {
  io::Checkpoint ck = net_.to_checkpoint();
  ck.config["train"] = cfg_.to_json();
  adam_.save(ck);
  ck.meta["epoch"] = epoch_;
  ck.meta["step"] = step_;
  ck.meta["adam_t"] = adam_.t();
  ck.rng_state = rng_.state();
  return ck;
}

loss::LossTerms Trainer::step(const data::Batch& batch, double lr) {
  nn::ForwardInput in;
  in.x = ag::constant(batch.x);
  in.full = batch.full;
  in.device_weights = batch.device_weights;
  in.wb = batch.wb_meta;
  in.iso = batch.iso;
  in.exposure_s = batch.exposure_s;
  in.origin = batch.origin;
  const nn::ForwardOutput out = net_.forward(in, nn::Mode::kTrain);
  loss::LossTerms terms =
      net_.config().learned_wb()
          ? loss::total_loss_wb(out.y, batch.gt, batch.mask, out.aux.wb_used, batch.wb_gt, cfg_.weights, stack_)
          : loss::total_loss(out.y, batch.gt, batch.mask, cfg_.weights, stack_);
  const double value = terms.total.value()[0];
  require(std::isfinite(value), "train", "non-finite loss at step " + std::to_string(step_));
  for (const auto& [name, p] : net_.params()) {
    Variable v = p;
    v.zero_grad();
  }
  terms.total.backward();
  for (const auto& [name, p] : net_.params())
    if (p.has_grad())
      for (double g : p.grad().vec())
        require(std::isfinite(g), "train", "non-finite gradient for " + name + " at step " + std::to_string(step_));
  adam_.step(net_.params(), lr, cfg_.beta1, cfg_.beta2, cfg_.eps);
  ++step_;
  return terms;
}

void Trainer::dump_state(const std::string& reason, const std::string& dir) const {
  json j = {{"reason", reason}, {"epoch", epoch_}, {"step", step_}, {"rng_state", rng_.state()}};
  json bad = json::array();
  for (const auto& [name, p] : net_.params())
    for (double v : p.value().vec())
      if (!std::isfinite(v)) {
        bad.push_back(name);
        break;
      }
  j["non_finite_params"] = bad;
  // The checkpoint format only holds finite values; skip it when the weights
  // themselves have diverged.
  j["checkpoint"] = bad.empty();
  if (bad.empty()) io::save_checkpoint(to_checkpoint(), io::fs::path(dir) / "nan_dump.ckpt");
  io::write_text_file(io::fs::path(dir) / "nan_dump.json", j.dump(2) + "\n");
}

std::vector<EpochLog> Trainer::run(const data::Dataset& ds, int until_epoch, const std::string& log_path,
                                   const std::string& ckpt_dir) {
  const int until = until_epoch < 0 ? cfg_.epochs : std::min(until_epoch, cfg_.epochs);
  require(ds.num_devices == net_.config().num_devices, "value",
          "dataset has " + std::to_string(ds.num_devices) + " devices but the model expects " +
              std::to_string(net_.config().num_devices));
  const auto tiles = data::tile_index(ds, "train", cfg_.sampler);
  require(!tiles.empty(), "value", "the train split is empty");
  const int steps_per_epoch = static_cast<int>((tiles.size() + cfg_.batch_size - 1) / cfg_.batch_size);
  const bool has_val = !ds.split_indices("val").empty();
  if (!ckpt_dir.empty()) io::fs::create_directories(ckpt_dir);

  std::vector<EpochLog> logs;
  while (epoch_ < until) {
    const double lr = lr_at(epoch_, cfg_);
    double loss_sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const data::Batch batch =
          data::collate(data::sample_batch(ds, tiles, cfg_.batch_size, cfg_.sampler, rng_), ds.num_devices);
      try {
        loss_sum += step(batch, lr).total.value()[0];
      } catch (const Error& e) {
        if (!ckpt_dir.empty()) dump_state(e.what(), ckpt_dir);
        throw;
      }
    }
    ++epoch_;
    EpochLog log;
    log.epoch = epoch_;
    log.lr = lr;
    log.train_loss = loss_sum / steps_per_epoch;
    if (has_val && cfg_.val_every > 0 && epoch_ % cfg_.val_every == 0)
      log.val = evaluate(net_, ds, {"val", false}).report;
    if (!log_path.empty()) {
      std::ofstream f(log_path, std::ios::app);
      require(static_cast<bool>(f), "io", "cannot append to " + log_path);
      f << log.to_json().dump() << "\n";
    }
    if (!ckpt_dir.empty() && cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch_);
      io::save_checkpoint(to_checkpoint(), io::fs::path(ckpt_dir) / name);
    }
    if (on_epoch) on_epoch(log);
    logs.push_back(std::move(log));
  }
  if (!ckpt_dir.empty()) io::save_checkpoint(to_checkpoint(), io::fs::path(ckpt_dir) / "last.ckpt");
  return logs;
}

// ---------------------------------------------------------------------------
// Config overrides

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, "config", "override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &config;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(node->is_object() && node->contains(key), "config", "unknown config key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

}  // namespace devisp::train
