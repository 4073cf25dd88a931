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

#include <gtest/gtest.h>

#include <sstream>

#include "cli.hpp"
#include "devisp/imageio.hpp"
#include "devisp/nnisp.hpp"
#include "test_util.hpp"

namespace devisp::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  args.insert(args.begin(), "devisp");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

// Small dataset and a two-epoch model shared by the command tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(testing::scratch_dir("cli"));
    config_ = (*dir_ / "config.json").string();
    json c = {{"synth",
               {{"num_scenes", 6},
                {"height", 64},
                {"width", 64},
                {"shot_gain", 0.0},
                {"read_sigma", 0.0},
                {"splits", {0.5, 1.0 / 6, 1.0 / 3}}}},
              {"model",
               {{"scale", "toy"},
                {"widths", {8, 16, 32}},
                {"bottleneck_width", 32},
                {"bottleneck_inner", 16},
                {"embed_dim", 16},
                {"illum_width", 8},
                {"xcit", {{"dim", 16}, {"blocks", 1}, {"class_blocks", 1}, {"input_size", 32}}}}},
              {"train", {{"epochs", 2}, {"lr", 1e-3}, {"batch_size", 4}, {"sampler", {{"patch", 16}, {"crop", 32}}}}}};
    io::write_text_file(config_, c.dump());
    ASSERT_EQ(call({"synth-data", "--config", config_, "--out", (*dir_ / "ds").string()}).code, kOk);
    ASSERT_EQ(call({"pretrain", "--config", config_, "--data", manifest(), "--out", (*dir_ / "run").string()}).code,
              kOk);
    raw_ = (*dir_ / "ds" / "raw" / "scene_0000.pgm").string();
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string manifest() { return (*dir_ / "ds" / "manifest.jsonl").string(); }
  static std::string ckpt() { return (*dir_ / "run" / "last.ckpt").string(); }
  static std::string path(const std::string& rel) { return (*dir_ / rel).string(); }

  static fs::path* dir_;
  static std::string config_, raw_;
};
fs::path* CliPipeline::dir_ = nullptr;
std::string CliPipeline::config_, CliPipeline::raw_;

TEST_F(CliPipeline, WritesEffectiveConfig) {
  for (const char* d : {"ds", "run"}) {
    const json j = json::parse(io::read_text_file(*dir_ / d / "effective_config.json"));
    EXPECT_EQ(j["config"]["synth"]["num_scenes"], 6);
    EXPECT_EQ(j["config"]["model"]["widths"], json({8, 16, 32}));
  }
}

TEST_F(CliPipeline, EvalReportHasOneColumnPerDevice) {
  const Result r = call({"eval", "--config", config_, "--data", manifest(), "--checkpoint", ckpt(), "--out",
                         path("eval")});
  ASSERT_EQ(r.code, kOk) << r.err;
  const json rep = json::parse(io::read_text_file(path("eval/report.json")));
  ASSERT_EQ(rep["devices"].size(), 3u);
  for (const auto& [k, v] : rep["devices"].items()) EXPECT_GT(v["images"].get<int>(), 0) << k;
  EXPECT_TRUE(fs::exists(path("eval/effective_config.json")));
}

TEST_F(CliPipeline, WeightsOneHotMatchesDeviceBytes) {
  ASSERT_EQ(call({"infer", raw_, "--checkpoint", ckpt(), "--device", "0", "--out", path("inf/d0.ppm")}).code, kOk);
  ASSERT_EQ(call({"infer", raw_, "--checkpoint", ckpt(), "--weights", "1,0,0", "--out", path("inf/w.ppm")}).code,
            kOk);
  EXPECT_EQ(io::read_text_file(path("inf/d0.ppm")), io::read_text_file(path("inf/w.ppm")));
}

TEST_F(CliPipeline, OffSimplexWeightsNormalizeWithWarning) {
  const Result a = call({"infer", raw_, "--checkpoint", ckpt(), "--weights", "2,2,0", "--out", path("inf/a.ppm")});
  ASSERT_EQ(a.code, kOk);
  EXPECT_NE(a.err.find("warning"), std::string::npos);
  const Result b = call({"infer", raw_, "--checkpoint", ckpt(), "--weights", "0.5,0.5,0", "--out", path("inf/b.ppm")});
  ASSERT_EQ(b.code, kOk);
  EXPECT_TRUE(b.err.empty());
  EXPECT_EQ(io::read_text_file(path("inf/a.ppm")), io::read_text_file(path("inf/b.ppm")));
}

TEST_F(CliPipeline, InterpGridEndpointsMatchInference) {
  ASSERT_EQ(call({"interp-grid", raw_, "--checkpoint", ckpt(), "--from", "0", "--to", "1", "--steps", "3", "--out",
                  path("grid/g.ppm")})
                .code,
            kOk);
  ASSERT_EQ(call({"infer", raw_, "--checkpoint", ckpt(), "--device", "0", "--out", path("grid/d0.ppm")}).code, kOk);
  ASSERT_EQ(call({"infer", raw_, "--checkpoint", ckpt(), "--device", "1", "--out", path("grid/d1.ppm")}).code, kOk);
  const io::RgbImage g = io::read_rgb(path("grid/g.ppm"));
  const io::RgbImage d0 = io::read_rgb(path("grid/d0.ppm")), d1 = io::read_rgb(path("grid/d1.ppm"));
  ASSERT_EQ(g.width, 3 * d0.width);
  ASSERT_EQ(g.height, d0.height);
  for (int y = 0; y < d0.height; ++y)
    for (int x = 0; x < d0.width; ++x)
      for (int c = 0; c < 3; ++c) {
        ASSERT_EQ(g.at(y, x, c), d0.at(y, x, c));
        ASSERT_EQ(g.at(y, 2 * d0.width + x, c), d1.at(y, x, c));
      }
}

TEST_F(CliPipeline, EstimateWbPrintsFourGains) {
  const Result r = call({"estimate-wb", raw_, "--checkpoint", ckpt(), "--device", "2"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const json j = json::parse(r.out);
  ASSERT_EQ(j["wb"].size(), 4u);
  EXPECT_EQ(j["wb"][1], 1.0);
  EXPECT_EQ(j["wb"][2], 1.0);
}

TEST_F(CliPipeline, UnknownDeviceListsValidIds) {
  const Result r = call({"infer", raw_, "--checkpoint", ckpt(), "--device", "5", "--out", path("inf/x.ppm")});
  EXPECT_EQ(r.code, kRuntimeError);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["error"]["code"], "value");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("valid ids: 0, 1, 2"), std::string::npos);
}

TEST_F(CliPipeline, ReferenceIspMatchesGroundTruthFile) {
  // Without sensor noise, device 0 ground truth is the reference rendering of
  // the source RAW itself.
  ASSERT_EQ(call({"isp", raw_, "--presets", path("ds/presets.json"), "--device", "0", "--out", path("isp/d0.ppm")})
                .code,
            kOk);
  EXPECT_EQ(io::read_text_file(path("isp/d0.ppm")), io::read_text_file(path("ds/gt/scene_0000_d0.ppm")));
}

TEST_F(CliPipeline, FlowAndWarpRoundTrip) {
  const std::string a = path("ds/gt/scene_0000_d0.ppm");
  ASSERT_EQ(call({"flow", a, a, "--out", path("fw/f.flo")}).code, kOk);
  const io::FlowField f = io::read_flow(path("fw/f.flo"));
  for (size_t i = 0; i < f.u.size(); ++i) ASSERT_TRUE(f.u[i] == 0.f && f.v[i] == 0.f);
  ASSERT_EQ(call({"warp", a, path("fw/f.flo"), "--out", path("fw/w.ppm"), "--mask", path("fw/m.ppm")}).code, kOk);
  EXPECT_EQ(io::read_text_file(a), io::read_text_file(path("fw/w.ppm")));
}

TEST_F(CliPipeline, RerunIsByteIdentical) {
  ASSERT_EQ(call({"pretrain", "--config", config_, "--data", manifest(), "--out", path("run2")}).code, kOk);
  EXPECT_EQ(io::read_text_file(ckpt()), io::read_text_file(path("run2/last.ckpt")));
  EXPECT_EQ(io::read_text_file(path("run/log.jsonl")), io::read_text_file(path("run2/log.jsonl")));
}

TEST(CliConfig, UnknownKeysAreRejected) {
  EXPECT_THROW(resolve_config("", {"train.nope=1"}), Error);
  const auto f = testing::scratch_dir("cli_cfg") / "c.json";
  io::write_text_file(f, R"({"train": {"lr": 0.1, "typo": 3}})");
  EXPECT_THROW(resolve_config(f.string(), {}), Error);
}

TEST(CliConfig, OverridesApplyInOrder) {
  const json c = resolve_config("", {"train.lr=0.5", "train.sampler.patch=16", "train.lr=0.25"});
  EXPECT_EQ(c["train"]["lr"], 0.25);
  EXPECT_EQ(c["train"]["sampler"]["patch"], 16);
}

TEST(CliConfig, ScaleSelectsPreset) {
  const json full = resolve_config("", {"model.scale=full"});
  EXPECT_EQ(full["model"], nn::ModelConfig::full().to_json());
  EXPECT_EQ(resolve_config("", {})["model"], nn::ModelConfig::toy().to_json());
  const json custom = resolve_config("", {"model.scale=full", "model.scale=custom"});
  EXPECT_EQ(custom["model"]["scale"], "custom");
  EXPECT_EQ(custom["model"]["widths"], full["model"]["widths"]);
  EXPECT_THROW(resolve_config("", {"model.scale=huge"}), Error);
}

TEST(CliErrors, UsageErrorsAreJson) {
  const Result r = call({"infer"});
  EXPECT_EQ(r.code, kUsageError);
  EXPECT_EQ(json::parse(r.err)["error"]["code"], "usage");
}

}  // namespace
}  // namespace devisp::cli
