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

// On-disk artifacts: 16-bit PGM mosaics with JSON sidecars, 8-bit PPM images,
// Middlebury .flo flow fields, MICK1 checkpoints and JSON Lines manifests.
// Every writer is byte-deterministic for identical inputs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "devisp/tensor.hpp"
#include "json.hpp"

namespace devisp::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct RawMeta {
  int black_level = 0;
  int white_level = 1023;
  std::array<double, 4> wb_gains{1.0, 1.0, 1.0, 1.0};  // R, G1, G2, B
  double iso = 100.0;
  double exposure_s = 0.01;
  std::optional<int> device_id;

  void validate() const;
  json to_json() const;
  static RawMeta from_json(const json& j);
  bool operator==(const RawMeta&) const = default;
};

/// RGGB Bayer mosaic of sensor counts.
struct RawImage {
  int height = 0;
  int width = 0;
  std::vector<uint16_t> mosaic;  // row-major
  std::string cfa = "RGGB";
  RawMeta meta;

  uint16_t at(int y, int x) const { return mosaic[static_cast<size_t>(y) * width + x]; }
  void validate() const;
  bool operator==(const RawImage&) const = default;
};

/// Row-major H×W×3 image, float working form in [0,1].
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;
  std::string colorspace = "srgb";

  RgbImage() = default;
  RgbImage(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}
  double& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

/// Dense displacement field; stored as float32 so file round-trips are exact.
struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> u, v;

  FlowField() = default;
  FlowField(int h, int w, float fu = 0.f, float fv = 0.f)
      : height(h), width(w), u(static_cast<size_t>(h) * w, fu), v(static_cast<size_t>(h) * w, fv) {}
  float& u_at(int y, int x) { return u[static_cast<size_t>(y) * width + x]; }
  float& v_at(int y, int x) { return v[static_cast<size_t>(y) * width + x]; }
  float u_at(int y, int x) const { return u[static_cast<size_t>(y) * width + x]; }
  float v_at(int y, int x) const { return v[static_cast<size_t>(y) * width + x]; }
  bool operator==(const FlowField&) const = default;
};

void write_raw(const RawImage& raw, const fs::path& path);
/// Reads `path` and its sidecar `<stem>.json`.
RawImage read_raw(const fs::path& path);
fs::path raw_sidecar_path(const fs::path& path);

/// Float to byte: clamp to [0,1], then round half away from zero.
uint8_t to_byte(double v);
void write_rgb(const RgbImage& img, const fs::path& path);
RgbImage read_rgb(const fs::path& path);

void write_flow(const FlowField& flow, const fs::path& path);
FlowField read_flow(const fs::path& path);

/// (v − bl)/(wl − bl), clamped to [0,1].
double normalize_raw(double counts, double black_level, double white_level);
/// Normalized mosaic as a [4, H/2, W/2] tensor with channels R, G1, G2, B.
Tensor pack_rggb(const RawImage& raw);

/// [3, H, W] tensor from an image and back (the latter clamps to [0,1]).
Tensor rgb_to_tensor(const RgbImage& img);
RgbImage tensor_to_rgb(const Tensor& t, const std::string& colorspace = "srgb");

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Header fields besides the tensor table live in `config`, `rng_state` and
/// `meta` (training progress such as step counters).
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  json config = json::object();
  std::string rng_state;
  json meta = json::object();

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

struct ManifestRecord {
  int scene_id = 0;
  int device_id = 0;
  std::string raw_path;
  std::string rgb_path;
  std::optional<std::string> flow_path;
  std::string split = "train";
  /// Ground-truth illuminant white balance of this device for the scene.
  std::optional<std::array<double, 4>> wb_gt;
  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  fs::path dir;  // paths in records are relative to this directory
  std::vector<ManifestRecord> records;

  fs::path resolve(const std::string& rel) const { return dir / rel; }
  /// Every scene carries exactly one record per device of a common device set.
  void validate() const;
  std::vector<int> device_ids() const;
  std::vector<int> scene_ids(const std::string& split) const;
};

void write_manifest(const Manifest& m, const fs::path& path);
Manifest read_manifest(const fs::path& path);

/// Writes `text` to `path` (through a temporary file and a rename).
void write_text_file(const fs::path& path, const std::string& text);
std::string read_text_file(const fs::path& path);

}  // namespace devisp::io
