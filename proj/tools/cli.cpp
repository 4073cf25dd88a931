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

#include "cli.hpp"

#include <sstream>

#include "CLI11.hpp"
#include "devisp/align.hpp"
#include "devisp/data.hpp"
#include "devisp/gradsuite.hpp"
#include "devisp/refisp.hpp"
#include "devisp/train.hpp"

namespace devisp::cli {

using json = nlohmann::json;
namespace fs = io::fs;

namespace {

// Model section after selecting `scale`: toy and full replace it with the
// preset, custom keeps the current keys.
json model_preset(const std::string& scale, const json& current) {
  if (scale == "toy") return nn::ModelConfig::toy().to_json();
  if (scale == "full") return nn::ModelConfig::full().to_json();
  require(scale == "custom", "config", "model.scale must be toy, full or custom, got '" + scale + "'");
  json m = current;
  m["scale"] = "custom";
  return m;
}

// Recursive merge of `patch` into `base`; every key of `patch` must already
// exist in `base`.
void merge_strict(json& base, const json& patch, const std::string& prefix) {
  require(patch.is_object(), "config", "config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    require(base.contains(key), "config", "unknown config key '" + path + "'");
    if (value.is_object() && base[key].is_object()) {
      merge_strict(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

struct Sections {
  data::SynthConfig synth;
  nn::ModelConfig model;
  train::TrainConfig train;
};

Sections parse_sections(const json& cfg) {
  Sections s;
  s.synth = data::SynthConfig::from_json(cfg.at("synth"));
  s.model = nn::ModelConfig::from_json(cfg.at("model"));
  s.train = train::TrainConfig::from_json(cfg.at("train"));
  s.synth.validate();
  s.model.validate();
  s.train.validate();
  return s;
}

void write_effective(const fs::path& dir, const std::string& command, const json& config, const json& args) {
  if (!dir.empty()) fs::create_directories(dir);
  json j = {{"command", command}, {"args", args}, {"config", config}};
  io::write_text_file(dir / "effective_config.json", j.dump(2) + "\n");
}

fs::path parent_dir(const std::string& file) {
  const fs::path p = fs::path(file).parent_path();
  return p.empty() ? fs::path(".") : p;
}

std::vector<double> parse_weights(const std::string& text) {
  std::vector<double> w;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used > 0 && used == item.size(), "value", "cannot parse weight '" + item + "'");
    w.push_back(v);
  }
  require(!w.empty(), "value", "empty weight list");
  return w;
}

void check_device(int d, int K) {
  if (d >= 0 && d < K) return;
  std::string ids;
  for (int k = 0; k < K; ++k) ids += (k ? ", " : "") + std::to_string(k);
  fail("value", "unknown device id " + std::to_string(d) + "; valid ids: " + ids);
}

std::vector<double> one_hot(int d, int K) {
  std::vector<double> w(K, 0.0);
  w[d] = 1.0;
  return w;
}

io::RgbImage render_rgb(const nn::Network& net, const io::RawImage& raw, const std::vector<double>& w) {
  return io::tensor_to_rgb(train::render(net, io::pack_rggb(raw), raw.meta, w));
}

data::Dataset load(const std::string& manifest, const train::TrainConfig& tc) {
  data::LoadOptions lo;
  lo.alignment = data::alignment_from_string(tc.alignment);
  return data::load_dataset(io::read_manifest(manifest), lo);
}

// Options shared by every subcommand.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "dotted override such as train.lr=1e-3 (repeatable)");
}

}  // namespace

json default_config() {
  return {{"synth", data::SynthConfig{}.to_json()},
          {"model", nn::ModelConfig::toy().to_json()},
          {"train", train::TrainConfig{}.to_json()}};
}

json resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!file.empty()) {
    const json user = json::parse(io::read_text_file(file), nullptr, false);
    require(!user.is_discarded(), "config", "cannot parse config file " + file);
    require(user.is_object(), "config", "config file must hold a JSON object");
    if (user.contains("model") && user["model"].is_object() && user["model"].contains("scale")) {
      const json& scale = user["model"]["scale"];
      require(scale.is_string(), "config", "model.scale must be a string");
      cfg["model"] = model_preset(scale.get<std::string>(), cfg["model"]);
    }
    merge_strict(cfg, user, "");
  }
  for (const auto& o : overrides) {
    if (o.rfind("model.scale=", 0) == 0) {
      json scale = json::parse(o.substr(12), nullptr, false);
      cfg["model"] = model_preset(scale.is_string() ? scale.get<std::string>() : o.substr(12), cfg["model"]);
      continue;
    }
    train::apply_override(cfg, o);
  }
  parse_sections(cfg);
  return cfg;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"devisp: multi-device neural ISP toolkit"};
  app.require_subcommand(1);
  Common common;

  // synth-data
  std::string synth_out;
  auto* synth = app.add_subcommand("synth-data", "build a synthetic multi-device dataset");
  add_common(synth, common);
  synth->add_option("--out", synth_out, "dataset directory")->required();

  // train / pretrain
  std::string data_path, run_dir, init_ckpt, resume_ckpt;
  int until_epoch = -1;
  auto* trn = app.add_subcommand("train", "train or finetune on a dataset");
  auto* pre = app.add_subcommand("pretrain", "train from scratch (first stage of pretrain and finetune)");
  for (auto* sc : {trn, pre}) {
    add_common(sc, common);
    sc->add_option("--data", data_path, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    sc->add_option("--out", run_dir, "run directory")->required();
    sc->add_option("--until-epoch", until_epoch, "stop after this many completed epochs");
  }
  trn->add_option("--init", init_ckpt, "pretrained checkpoint to finetune from")->check(CLI::ExistingFile);
  trn->add_option("--resume", resume_ckpt, "training checkpoint to continue")->check(CLI::ExistingFile);

  // eval
  std::string ckpt, eval_out, split = "test";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(ev, common);
  ev->add_option("--data", data_path, "manifest.jsonl")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "report directory")->required();
  ev->add_option("--split", split, "train | val | test");

  // infer
  std::string raw_path, out_path, weights_text;
  int device = -1;
  auto* inf = app.add_subcommand("infer", "render a RAW file for one device or a weight mix");
  add_common(inf, common);
  inf->add_option("raw", raw_path, "RAW .pgm (with .json sidecar)")->required()->check(CLI::ExistingFile);
  inf->add_option("--checkpoint", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  auto* dev_opt = inf->add_option("--device", device, "device id");
  inf->add_option("--weights", weights_text, "comma-separated device weights")->excludes(dev_opt);
  inf->add_option("--out", out_path, "output .ppm")->required();

  // interp-grid
  int from = 0, to = 1, steps = 5;
  auto* grid = app.add_subcommand("interp-grid", "row of renditions interpolating two device embeddings");
  add_common(grid, common);
  grid->add_option("raw", raw_path, "RAW .pgm")->required()->check(CLI::ExistingFile);
  grid->add_option("--checkpoint", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  grid->add_option("--from", from, "start device id");
  grid->add_option("--to", to, "end device id");
  grid->add_option("--steps", steps, "number of tiles (>= 2)");
  grid->add_option("--out", out_path, "output .ppm")->required();

  // estimate-wb
  auto* ewb = app.add_subcommand("estimate-wb", "print the white balance the network applies for a device");
  add_common(ewb, common);
  ewb->add_option("raw", raw_path, "RAW .pgm")->required()->check(CLI::ExistingFile);
  ewb->add_option("--checkpoint", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ewb->add_option("--device", device, "device id")->required();

  // isp
  std::string presets_path;
  auto* isp = app.add_subcommand("isp", "reference ISP rendering of a RAW file");
  add_common(isp, common);
  isp->add_option("raw", raw_path, "RAW .pgm")->required()->check(CLI::ExistingFile);
  isp->add_option("--presets", presets_path, "presets.json (default: identity style)")->check(CLI::ExistingFile);
  isp->add_option("--device", device, "preset device id (with --presets)");
  isp->add_option("--out", out_path, "output .ppm")->required();

  // flow / warp
  std::string src_path, dst_path, flow_path, mask_path;
  auto* flw = app.add_subcommand("flow", "block-matching flow such that warp(dst, flow) aligns to src");
  add_common(flw, common);
  flw->add_option("src", src_path, "reference .ppm")->required()->check(CLI::ExistingFile);
  flw->add_option("dst", dst_path, "moving .ppm")->required()->check(CLI::ExistingFile);
  flw->add_option("--out", out_path, "output .flo")->required();
  auto* wrp = app.add_subcommand("warp", "backward-warp an image with a flow field");
  add_common(wrp, common);
  wrp->add_option("image", src_path, "input .ppm")->required()->check(CLI::ExistingFile);
  wrp->add_option("flow", flow_path, "flow .flo")->required()->check(CLI::ExistingFile);
  wrp->add_option("--out", out_path, "warped .ppm")->required();
  wrp->add_option("--mask", mask_path, "validity mask .ppm");

  // gradcheck
  std::vector<std::string> blocks{"all"};
  std::string report_dir;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gc, common);
  gc->add_option("--blocks", blocks, "block names or 'all'");
  gc->add_option("--out", report_dir, "report directory");

  std::vector<std::string> argv_store(args);
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << json{{"error", {{"code", "usage"}, {"message", e.what()}}}}.dump() << "\n";
    return kUsageError;
  }

  try {
    const json cfg = resolve_config(common.config_file, common.overrides);
    const Sections s = parse_sections(cfg);

    if (*synth) {
      data::build_synth_dataset(s.synth, synth_out);
      write_effective(synth_out, "synth-data", cfg, {{"out", synth_out}});
      out << (fs::path(synth_out) / "manifest.jsonl").string() << "\n";
      return kOk;
    }

    if (*trn || *pre) {
      const std::string name = *trn ? "train" : "pretrain";
      require(init_ckpt.empty() || resume_ckpt.empty(), "config", "--init and --resume are exclusive");
      const data::Dataset ds = load(data_path, s.train);
      fs::create_directories(run_dir);
      std::optional<train::Trainer> t;
      if (!resume_ckpt.empty()) {
        t.emplace(train::Trainer::resume(io::load_checkpoint(resume_ckpt)));
      } else if (!init_ckpt.empty()) {
        t.emplace(train::Trainer::from_pretrained(io::load_checkpoint(init_ckpt), s.train));
      } else {
        require(!(*pre) || !s.train.freeze_norm_stats, "config", "pretrain cannot freeze normalization statistics");
        t.emplace(s.model, s.train);
      }
      json eff = cfg;
      eff["model"] = t->network().config().to_json();
      eff["train"] = t->config().to_json();
      write_effective(run_dir, name,
                      eff, {{"data", data_path}, {"out", run_dir}, {"init", init_ckpt}, {"resume", resume_ckpt},
                            {"until_epoch", until_epoch}});
      t->on_epoch = [&](const train::EpochLog& l) { out << l.to_json().dump() << "\n" << std::flush; };
      t->run(ds, until_epoch, (fs::path(run_dir) / "log.jsonl").string(), run_dir);
      return kOk;
    }

    if (*ev) {
      const nn::Network net = nn::Network::from_checkpoint(io::load_checkpoint(ckpt));
      const data::Dataset ds = load(data_path, s.train);
      const train::EvalResult r = train::evaluate(net, ds, {split, true});
      write_effective(eval_out, "eval", cfg, {{"data", data_path}, {"checkpoint", ckpt}, {"split", split}});
      io::write_text_file(fs::path(eval_out) / "report.json", r.to_json().dump(2) + "\n");
      io::write_text_file(fs::path(eval_out) / "report.txt", r.report.to_table());
      out << r.report.to_table();
      return kOk;
    }

    if (*inf || *grid || *ewb) {
      const nn::Network net = nn::Network::from_checkpoint(io::load_checkpoint(ckpt));
      const int K = net.config().num_devices;
      const io::RawImage raw = io::read_raw(raw_path);

      if (*inf) {
        std::vector<double> w;
        if (!weights_text.empty()) {
          w = parse_weights(weights_text);
          require(static_cast<int>(w.size()) == K, "value",
                  "expected " + std::to_string(K) + " weights, got " + std::to_string(w.size()));
          if (nn::normalize_device_weights(w)) {
            std::string shown;
            for (double v : w) shown += (shown.empty() ? "" : ",") + std::to_string(v);
            err << "warning: device weights are not on the simplex; normalized to " << shown << "\n";
          }
        } else {
          require(device >= 0 || K == 1, "value", "infer needs --device or --weights");
          check_device(std::max(device, 0), K);
          w = one_hot(std::max(device, 0), K);
        }
        io::write_rgb(render_rgb(net, raw, w), out_path);
        write_effective(parent_dir(out_path), "infer", cfg,
                        {{"raw", raw_path}, {"checkpoint", ckpt}, {"weights", w}, {"out", out_path}});
        return kOk;
      }

      if (*grid) {
        check_device(from, K);
        check_device(to, K);
        require(steps >= 2, "value", "--steps must be at least 2");
        std::vector<io::RgbImage> tiles;
        for (int i = 0; i < steps; ++i) {
          const double t = static_cast<double>(i) / (steps - 1);
          std::vector<double> w(K, 0.0);
          w[from] += 1.0 - t;
          w[to] += t;
          tiles.push_back(render_rgb(net, raw, w));
        }
        const int h = tiles[0].height, tw = tiles[0].width;
        io::RgbImage row(h, tw * steps);
        for (int i = 0; i < steps; ++i)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < tw; ++x)
              for (int c = 0; c < 3; ++c) row.at(y, i * tw + x, c) = tiles[i].at(y, x, c);
        io::write_rgb(row, out_path);
        write_effective(parent_dir(out_path), "interp-grid", cfg,
                        {{"raw", raw_path}, {"checkpoint", ckpt}, {"from", from}, {"to", to}, {"steps", steps},
                         {"out", out_path}});
        return kOk;
      }

      check_device(device, K);
      ag::NoGradGuard no_grad;
      const Tensor packed = io::pack_rggb(raw);
      nn::ForwardInput in;
      in.x = ag::constant(packed.reshaped({1, 4, packed.dim(1), packed.dim(2)}));
      in.full = in.x.value();
      in.device_weights = Tensor(Shape{1, K}, one_hot(device, K));
      in.wb = Tensor(Shape{1, 4}, std::vector<double>(raw.meta.wb_gains.begin(), raw.meta.wb_gains.end()));
      in.iso = {raw.meta.iso};
      in.exposure_s = {raw.meta.exposure_s};
      const Tensor wb = net.forward(in, nn::Mode::kEval).aux.wb_used.value();
      out << json{{"device", device}, {"pipeline", net.config().pipeline}, {"wb", wb.vec()}}.dump() << "\n";
      return kOk;
    }

    if (*isp) {
      const io::RawImage raw = io::read_raw(raw_path);
      isp::StyleParams style;
      std::array<double, 4> wb = raw.meta.wb_gains;
      if (!presets_path.empty()) {
        const auto presets = isp::presets_from_json(json::parse(io::read_text_file(presets_path)));
        check_device(device, static_cast<int>(presets.size()));
        style = presets[device].style;
        for (int c = 0; c < 4; ++c) wb[c] *= presets[device].wb_bias[c];
      } else {
        require(device < 0, "config", "--device needs --presets");
      }
      io::write_rgb(isp::forward_isp(raw, style, wb), out_path);
      write_effective(parent_dir(out_path), "isp", cfg,
                      {{"raw", raw_path}, {"presets", presets_path}, {"device", device}, {"out", out_path}});
      return kOk;
    }

    if (*flw) {
      const io::FlowField f = align::flow_block_match(io::read_rgb(src_path), io::read_rgb(dst_path));
      io::write_flow(f, out_path);
      write_effective(parent_dir(out_path), "flow", cfg, {{"src", src_path}, {"dst", dst_path}, {"out", out_path}});
      return kOk;
    }

    if (*wrp) {
      Tensor mask;
      const io::RgbImage warped = align::warp_rgb(io::read_rgb(src_path), io::read_flow(flow_path), &mask);
      io::write_rgb(warped, out_path);
      if (!mask_path.empty()) {
        io::RgbImage m(warped.height, warped.width);
        for (size_t i = 0; i < mask.numel(); ++i)
          for (int c = 0; c < 3; ++c) m.pixels[i * 3 + c] = mask[i];
        io::write_rgb(m, mask_path);
      }
      write_effective(parent_dir(out_path), "warp", cfg,
                      {{"image", src_path}, {"flow", flow_path}, {"out", out_path}, {"mask", mask_path}});
      return kOk;
    }

    if (*gc) {
      const auto results = train::grad_suite(s.model, blocks);
      json report = json::array();
      bool ok = true;
      for (const auto& r : results) {
        report.push_back(r.to_json());
        ok = ok && r.pass();
        out << (r.pass() ? "PASS " : "FAIL ") << r.block << " max_rel_err=" << r.max_rel_err
            << " tol=" << r.tolerance << "\n";
      }
      if (!report_dir.empty()) {
        write_effective(report_dir, "gradcheck", cfg, {{"blocks", blocks}});
        io::write_text_file(fs::path(report_dir) / "gradcheck.json", report.dump(2) + "\n");
      }
      if (!ok) {
        err << json{{"error", {{"code", "gradcheck"}, {"message", "one or more blocks failed"}}}}.dump() << "\n";
        return kCheckFailed;
      }
      return kOk;
    }
  } catch (const Error& e) {
    err << json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump() << "\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    err << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace devisp::cli
