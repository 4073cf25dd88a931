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

// Synthetic multi-device datasets: procedural scenes rendered into one source
// RAW and K misaligned device renditions with exactly known flows, plus patch
// tiling, flip augmentation and batch sampling with per-sample device draws.

#include <array>
#include <string>
#include <vector>

#include "devisp/align.hpp"
#include "devisp/imageio.hpp"
#include "devisp/refisp.hpp"
#include "devisp/rng.hpp"

namespace devisp::data {

using io::FlowField;
using io::Manifest;
using io::RgbImage;
using json = nlohmann::json;

struct SynthConfig {
  /// Directory of .ppm source images; empty selects the procedural generator.
  std::string source_dir;
  int num_scenes = 60;
  int height = 128;  // RAW mosaic size, even
  int width = 128;
  int num_devices = 3;
  /// Largest displacement of a device flow in pixels; 0 disables misalignment.
  double max_flow = 3.0;
  /// Gaussian blur (pixels) applied to the white-noise field behind a flow.
  double flow_smoothness = 16.0;
  /// Sensor noise at ISO 100; both scale with the analog gain iso/100. Only
  /// the network input carries noise: device targets are rendered from
  /// noise-free captures, as a phone pipeline's output is denoised.
  double shot_gain = 2e-5;
  double read_sigma = 5e-4;
  int black_level = 256;
  int white_level = 16383;
  /// Minimum mean checker CIEDE2000 between any two device presets.
  double min_style_distance = 5.0;
  /// Weight of the value-noise texture in procedural scenes (0 = flat shapes).
  double texture = 1.0;
  uint64_t seed = 7;
  uint64_t style_seed = 11;
  std::array<double, 3> splits{0.8, 0.1, 0.1};  // train, val, test

  void validate() const;
  json to_json() const;
  static SynthConfig from_json(const json& j);
};

/// Procedural sRGB scene defined on continuous pixel coordinates, so that a
/// displaced view can be rendered without resampling an image.
class Scene {
 public:
  Scene(uint64_t seed, int height, int width, double texture);
  std::array<double, 3> eval(double x, double y) const;
  /// Renders the view v(q) = scene(q + disp(q)); `disp` may be null.
  RgbImage render(const FlowField* disp = nullptr) const;

 private:
  struct Shape {
    int kind;  // 0 disc, 1 rotated rectangle, 2 checker grid
    double cx, cy, a, b, angle;
    std::array<double, 3> color;
  };
  double noise(double x, double y) const;
  int height_, width_;
  uint64_t seed_;
  double texture_;
  std::array<double, 3> c0_, c1_;
  double dir_x_, dir_y_, hue_shift_;
  std::vector<Shape> shapes_;
};

/// Smooth random flow: blurred white noise scaled to a peak magnitude.
FlowField smooth_random_flow(int height, int width, double max_magnitude, double smoothness, uint64_t seed);
/// g with g(q) = -f(q + g(q)), found by fixed-point iteration; then
/// warp(warp(img, g), f) ≈ img wherever both lookups stay inside.
FlowField invert_flow(const FlowField& f, int iterations = 30);

/// Writes <out>/raw, <out>/gt, <out>/flow, manifest.jsonl, presets.json and
/// synth_config.json. Returns the manifest.
Manifest build_synth_dataset(const SynthConfig& cfg, const io::fs::path& out);

struct Patch {
  Tensor value;  // [C, p, p]
  int row = 0, col = 0;
};
/// Non-overlapping row-major tiles of the centred crop×crop window of a
/// [C, H, W] tensor, each with its absolute top-left coordinate.
std::vector<Patch> extract_patches(const Tensor& image, int patch_size, int crop);
/// Inverse of extract_patches for a full tiling.
Tensor assemble_patches(const std::vector<Patch>& patches, int channels, int crop, int row0, int col0);

/// Flips a [C, H, W] or [H, W] tensor about the vertical axis (mirror left to
/// right) and/or the horizontal axis.
Tensor flip(const Tensor& t, bool horizontal, bool vertical);
/// Flow of the flipped pair: sample positions mirror and the matching
/// displacement component changes sign, so flip∘warp = warp∘flip.
FlowField flip(const FlowField& f, bool horizontal, bool vertical);

enum class Alignment { kRecorded, kEstimated };

struct DeviceTarget {
  Tensor gt;       // [3, H, W] as captured (misaligned)
  FlowField flow;  // aligns gt to the source geometry
  Tensor aligned;  // [3, H, W] warp(gt, flow)
  Tensor mask;     // [H, W] warp validity ∧ forward/backward consistency
  std::array<double, 4> wb{};
};

struct SceneData {
  int scene_id = 0;
  std::string split;
  Tensor packed;  // [4, H/2, W/2] normalized RAW
  io::RawMeta meta;
  std::vector<DeviceTarget> devices;  // indexed by device id
};

struct Dataset {
  std::vector<SceneData> scenes;
  int num_devices = 0;
  std::vector<int> split_indices(const std::string& split) const;
};

struct LoadOptions {
  Alignment alignment = Alignment::kRecorded;
  double fb_thresh = 1.0;
  double validity = align::kDefaultValidity;
  /// Splits to load; empty loads all.
  std::vector<std::string> splits;
};
Alignment alignment_from_string(const std::string& s);

Dataset load_dataset(const Manifest& manifest, const LoadOptions& opt = {});

struct Sample {
  int scene = 0;                    // index into Dataset::scenes
  int device = 0;                   // drawn target device
  int row = 0, col = 0;             // packed-coordinate origin after flips
  bool flip_h = false, flip_v = false;
  Tensor x;                         // [4, p, p]
  Tensor full;                      // [4, H/2, W/2]
  std::vector<Tensor> gt;           // per device [3, 2p, 2p], aligned
  std::vector<Tensor> mask;         // per device [1, 2p, 2p]
  std::vector<FlowField> flow;      // per device, patch window of the flow
  std::vector<std::array<double, 4>> wb_gt;
  io::RawMeta meta;
};

struct Batch {
  Tensor x, full, gt, mask;  // [N,4,p,p], [N,4,h,w], [N,3,2p,2p], [N,1,2p,2p]
  Tensor device_weights;     // [N,K] one-hot
  Tensor wb_meta, wb_gt;     // [N,4]
  std::vector<double> iso, exposure_s;
  std::vector<std::array<int, 2>> origin;
  std::vector<int> devices;
};

struct SamplerConfig {
  int patch = 32;  // packed pixels (64 output pixels)
  int crop = 64;   // packed crop tiled by patches
  bool flips = true;
};

/// (scene index, tile row, tile col) for every tile of every scene in `split`.
std::vector<std::array<int, 3>> tile_index(const Dataset& ds, const std::string& split, const SamplerConfig& cfg);

/// Draws one sample: a tile uniformly from `tiles`, a device uniformly from
/// {0..K-1} and two independent flips.
Sample draw_sample(const Dataset& ds, const std::vector<std::array<int, 3>>& tiles, const SamplerConfig& cfg,
                   Rng& rng);
std::vector<Sample> sample_batch(const Dataset& ds, const std::vector<std::array<int, 3>>& tiles,
                                 int batch_size, const SamplerConfig& cfg, Rng& rng);
Batch collate(const std::vector<Sample>& samples, int num_devices);

}  // namespace devisp::data
