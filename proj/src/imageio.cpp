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

#include "devisp/imageio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace devisp::io {
namespace {

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put_u32le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32le(const std::string& s, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(s[off + i])) << (8 * i);
  return v;
}

void put_f32le(std::string& out, float f) { put_u32le(out, std::bit_cast<uint32_t>(f)); }
float get_f32le(const std::string& s, size_t off) { return std::bit_cast<float>(get_u32le(s, off)); }

// Netpbm header: magic, width, height, maxval separated by whitespace (with
// '#' comments), then exactly one whitespace byte before the samples.
struct PnmHeader {
  int width = 0, height = 0, maxval = 0;
  size_t data_offset = 0;
};

PnmHeader parse_pnm(const std::string& s, const std::string& magic, const fs::path& path) {
  require(s.size() >= 2 && s.compare(0, 2, magic) == 0, "io",
          "malformed PNM header in " + path.string() + ": expected " + magic);
  size_t pos = 2;
  int fields[3];
  for (int& f : fields) {
    for (;;) {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
      if (pos < s.size() && s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    require(pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos])), "io",
            "malformed PNM header in " + path.string());
    long v = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      v = v * 10 + (s[pos++] - '0');
      require(v <= 1 << 24, "io", "PNM header value too large in " + path.string());
    }
    f = static_cast<int>(v);
  }
  require(pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])), "io",
          "malformed PNM header in " + path.string());
  PnmHeader h{fields[0], fields[1], fields[2], pos + 1};
  require(h.width > 0 && h.height > 0, "io", "PNM with empty dimensions in " + path.string());
  return h;
}

std::string pnm_header(const std::string& magic, int w, int h, int maxval) {
  return magic + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) + "\n";
}

json tensor_entry(const NamedTensor& t, uint64_t offset) {
  return json{{"name", t.name}, {"shape", t.value.shape()}, {"dtype", "f32"}, {"offset", offset}};
}

constexpr float kFlowMagic = 202021.25f;

}  // namespace

// ---------------------------------------------------------------------------
// RAW

void RawMeta::validate() const {
  require(black_level >= 0 && black_level < white_level, "io",
          "black level must be below white level");
  for (double g : wb_gains) require(g > 0 && std::isfinite(g), "io", "white-balance gains must be positive");
  require(iso > 0, "io", "iso must be positive");
  require(exposure_s > 0, "io", "exposure must be positive");
}

json RawMeta::to_json() const {
  json j{{"black_level", black_level}, {"white_level", white_level}, {"wb_gains", wb_gains},
         {"iso", iso}, {"exposure_s", exposure_s}};
  j["device_id"] = device_id ? json(*device_id) : json(nullptr);
  return j;
}

RawMeta RawMeta::from_json(const json& j) {
  static const std::set<std::string> known{"black_level", "white_level", "wb_gains", "iso",
                                           "exposure_s", "device_id", "cfa"};
  require(j.is_object(), "io", "RAW metadata must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, "io", "unknown RAW metadata key: " + it.key());
  RawMeta m;
  try {
    m.black_level = j.at("black_level").get<int>();
    m.white_level = j.at("white_level").get<int>();
    m.wb_gains = j.at("wb_gains").get<std::array<double, 4>>();
    m.iso = j.at("iso").get<double>();
    m.exposure_s = j.at("exposure_s").get<double>();
    if (j.contains("device_id") && !j["device_id"].is_null()) m.device_id = j["device_id"].get<int>();
  } catch (const json::exception& e) {
    fail("io", std::string("malformed RAW metadata: ") + e.what());
  }
  m.validate();
  return m;
}

void RawImage::validate() const {
  require(cfa == "RGGB", "io", "only the RGGB pattern is supported, got " + cfa);
  require(height > 0 && width > 0 && height % 2 == 0 && width % 2 == 0, "io",
          "RAW dimensions must be even, got " + std::to_string(height) + "x" + std::to_string(width));
  require(mosaic.size() == static_cast<size_t>(height) * width, "io", "mosaic size mismatch");
  meta.validate();
  for (uint16_t v : mosaic)
    require(v <= meta.white_level, "io",
            "value exceeds white level (" + std::to_string(v) + " > " + std::to_string(meta.white_level) + ")");
}

fs::path raw_sidecar_path(const fs::path& path) {
  fs::path p = path;
  return p.replace_extension(".json");
}

void write_raw(const RawImage& raw, const fs::path& path) {
  raw.validate();
  std::string out = pnm_header("P5", raw.width, raw.height, 65535);
  out.reserve(out.size() + raw.mosaic.size() * 2);
  for (uint16_t v : raw.mosaic) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xFF));
  }
  write_text_file(path, out);
  json side = raw.meta.to_json();
  side["cfa"] = raw.cfa;
  write_text_file(raw_sidecar_path(path), side.dump(2) + "\n");
}

RawImage read_raw(const fs::path& path) {
  const fs::path side = raw_sidecar_path(path);
  require(fs::exists(side), "io", "missing sidecar " + side.string() + " for " + path.string());
  const std::string s = read_all(path);
  const PnmHeader h = parse_pnm(s, "P5", path);
  require(h.maxval == 65535, "io", "RAW PGM must have maxval 65535 in " + path.string());
  const size_t n = static_cast<size_t>(h.width) * h.height;
  require(s.size() == h.data_offset + 2 * n, "io", "truncated or oversized PGM payload in " + path.string());
  RawImage raw;
  raw.width = h.width;
  raw.height = h.height;
  raw.mosaic.resize(n);
  for (size_t i = 0; i < n; ++i)
    raw.mosaic[i] = static_cast<uint16_t>((static_cast<uint8_t>(s[h.data_offset + 2 * i]) << 8) |
                                          static_cast<uint8_t>(s[h.data_offset + 2 * i + 1]));
  json j;
  try {
    j = json::parse(read_all(side));
  } catch (const json::exception& e) {
    fail("io", "malformed sidecar " + side.string() + ": " + e.what());
  }
  raw.meta = RawMeta::from_json(j);
  raw.cfa = j.value("cfa", std::string("RGGB"));
  raw.validate();
  return raw;
}

// ---------------------------------------------------------------------------
// RGB

uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 1.0) return 255;
  return static_cast<uint8_t>(std::round(v * 255.0));
}

void write_rgb(const RgbImage& img, const fs::path& path) {
  require(img.pixels.size() == static_cast<size_t>(img.height) * img.width * 3 && img.height > 0 &&
              img.width > 0,
          "io", "RGB image size mismatch");
  std::string out = pnm_header("P6", img.width, img.height, 255);
  for (double v : img.pixels) out.push_back(static_cast<char>(to_byte(v)));
  write_text_file(path, out);
}

RgbImage read_rgb(const fs::path& path) {
  const std::string s = read_all(path);
  const PnmHeader h = parse_pnm(s, "P6", path);
  require(h.maxval == 255, "io", "PPM maxval must be 255, got " + std::to_string(h.maxval));
  RgbImage img(h.height, h.width);
  require(s.size() == h.data_offset + img.pixels.size(), "io",
          "truncated or oversized PPM payload in " + path.string());
  for (size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<uint8_t>(s[h.data_offset + i]) / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// Flow

void write_flow(const FlowField& flow, const fs::path& path) {
  const size_t n = static_cast<size_t>(flow.height) * flow.width;
  require(flow.u.size() == n && flow.v.size() == n, "io", "flow size mismatch");
  std::string out;
  out.reserve(12 + 8 * n);
  put_f32le(out, kFlowMagic);
  put_u32le(out, static_cast<uint32_t>(flow.width));
  put_u32le(out, static_cast<uint32_t>(flow.height));
  for (size_t i = 0; i < n; ++i) {
    require(std::isfinite(flow.u[i]) && std::isfinite(flow.v[i]), "io", "flow values must be finite");
    put_f32le(out, flow.u[i]);
    put_f32le(out, flow.v[i]);
  }
  write_text_file(path, out);
}

FlowField read_flow(const fs::path& path) {
  const std::string s = read_all(path);
  require(s.size() >= 12, "io", "truncated flow file " + path.string());
  require(get_f32le(s, 0) == kFlowMagic, "io", "bad flow magic in " + path.string());
  const int32_t w = static_cast<int32_t>(get_u32le(s, 4));
  const int32_t h = static_cast<int32_t>(get_u32le(s, 8));
  require(w > 0 && h > 0 && w < (1 << 16) && h < (1 << 16), "io", "bad flow dimensions in " + path.string());
  FlowField f(h, w);
  const size_t n = static_cast<size_t>(w) * h;
  require(s.size() == 12 + 8 * n, "io", "truncated or oversized flow payload in " + path.string());
  for (size_t i = 0; i < n; ++i) {
    f.u[i] = get_f32le(s, 12 + 8 * i);
    f.v[i] = get_f32le(s, 16 + 8 * i);
    require(std::isfinite(f.u[i]) && std::isfinite(f.v[i]), "io", "non-finite flow in " + path.string());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Packing

double normalize_raw(double counts, double black_level, double white_level) {
  require(black_level < white_level, "io", "black level must be below white level");
  return std::clamp((counts - black_level) / (white_level - black_level), 0.0, 1.0);
}

Tensor pack_rggb(const RawImage& raw) {
  require(raw.height % 2 == 0 && raw.width % 2 == 0, "io", "pack_rggb needs even dimensions");
  const int h = raw.height / 2, w = raw.width / 2;
  Tensor t(Shape{4, h, w});
  const double bl = raw.meta.black_level, wl = raw.meta.white_level;
  static constexpr int dy[4] = {0, 0, 1, 1}, dx[4] = {0, 1, 0, 1};
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        t[(static_cast<size_t>(c) * h + y) * w + x] = normalize_raw(raw.at(2 * y + dy[c], 2 * x + dx[c]), bl, wl);
  return t;
}

Tensor rgb_to_tensor(const RgbImage& img) {
  Tensor t(Shape{3, img.height, img.width});
  const size_t hw = static_cast<size_t>(img.height) * img.width;
  for (size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) t[c * hw + p] = img.pixels[p * 3 + c];
  return t;
}

RgbImage tensor_to_rgb(const Tensor& t, const std::string& colorspace) {
  require(t.rank() == 3 && t.dim(0) == 3, "shape", "expected a [3,H,W] tensor, got " + shape_str(t.shape()));
  RgbImage img(t.dim(1), t.dim(2));
  img.colorspace = colorspace;
  const size_t hw = static_cast<size_t>(img.height) * img.width;
  for (size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) img.pixels[p * 3 + c] = std::clamp(t[c * hw + p], 0.0, 1.0);
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoints

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json entries = json::array();
  uint64_t offset = 0;
  std::set<std::string> names;
  for (const auto& t : ckpt.tensors) {
    require(names.insert(t.name).second, "io", "duplicate checkpoint tensor " + t.name);
    entries.push_back(tensor_entry(t, offset));
    offset += 4 * t.value.numel();
  }
  json header{{"format", "MICK1"}, {"tensors", entries}, {"config", ckpt.config},
              {"rng_state", ckpt.rng_state}, {"meta", ckpt.meta}};
  std::string out = header.dump() + "\n";
  const size_t payload_start = out.size();
  out.reserve(payload_start + offset);
  for (const auto& t : ckpt.tensors)
    for (double v : t.value.vec()) {
      require(std::isfinite(v), "io", "non-finite value in checkpoint tensor " + t.name);
      put_f32le(out, static_cast<float>(v));
    }
  write_text_file(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string s = read_all(path);
  const size_t nl = s.find('\n');
  require(nl != std::string::npos, "io", "checkpoint header missing in " + path.string());
  json header;
  try {
    header = json::parse(s.substr(0, nl));
  } catch (const json::exception& e) {
    fail("io", "malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  require(header.value("format", "") == "MICK1", "io", "not a MICK1 checkpoint: " + path.string());
  Checkpoint ckpt;
  ckpt.config = header.value("config", json::object());
  ckpt.rng_state = header.value("rng_state", std::string());
  ckpt.meta = header.value("meta", json::object());
  const size_t payload = nl + 1;
  uint64_t expected = 0;
  try {
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      require(e.at("dtype").get<std::string>() == "f32", "io", "unsupported dtype for " + t.name);
      const Shape shape = e.at("shape").get<Shape>();
      for (int d : shape) require(d >= 0, "io", "negative dimension in " + t.name);
      const uint64_t offset = e.at("offset").get<uint64_t>();
      require(offset == expected, "io", "checkpoint offset inconsistency at " + t.name);
      const size_t n = shape_numel(shape);
      require(payload + offset + 4 * n <= s.size(), "io", "checkpoint payload too short for " + t.name);
      t.value = Tensor(shape);
      for (size_t i = 0; i < n; ++i) t.value[i] = get_f32le(s, payload + offset + 4 * i);
      expected = offset + 4 * n;
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    fail("io", "malformed checkpoint tensor table: " + std::string(e.what()));
  }
  require(payload + expected == s.size(), "io", "checkpoint payload size inconsistent with its tensor table");
  return ckpt;
}

// ---------------------------------------------------------------------------
// Manifests

void Manifest::validate() const {
  std::map<int, std::set<int>> per_scene;
  for (const auto& r : records) {
    require(r.split == "train" || r.split == "val" || r.split == "test", "io", "bad split " + r.split);
    require(per_scene[r.scene_id].insert(r.device_id).second, "io",
            "scene " + std::to_string(r.scene_id) + " lists device " + std::to_string(r.device_id) + " twice");
  }
  if (per_scene.empty()) return;
  const auto& first = per_scene.begin()->second;
  for (const auto& [scene, devices] : per_scene)
    require(devices == first, "io", "scene " + std::to_string(scene) + " does not cover every device");
}

std::vector<int> Manifest::device_ids() const {
  std::set<int> ids;
  for (const auto& r : records) ids.insert(r.device_id);
  return {ids.begin(), ids.end()};
}

std::vector<int> Manifest::scene_ids(const std::string& split) const {
  std::set<int> ids;
  for (const auto& r : records)
    if (split.empty() || r.split == split) ids.insert(r.scene_id);
  return {ids.begin(), ids.end()};
}

void write_manifest(const Manifest& m, const fs::path& path) {
  m.validate();
  std::string out;
  for (const auto& r : m.records) {
    json j{{"scene_id", r.scene_id}, {"device_id", r.device_id}, {"raw_path", r.raw_path},
           {"rgb_path", r.rgb_path}, {"split", r.split}};
    if (r.flow_path) j["flow_path"] = *r.flow_path;
    if (r.wb_gt) j["wb_gt"] = *r.wb_gt;
    out += j.dump() + "\n";
  }
  write_text_file(path, out);
}

Manifest read_manifest(const fs::path& path) {
  static const std::set<std::string> known{"scene_id", "device_id", "raw_path", "rgb_path",
                                           "flow_path", "split", "wb_gt"};
  Manifest m;
  m.dir = path.parent_path();
  std::istringstream in(read_all(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      for (auto it = j.begin(); it != j.end(); ++it)
        require(known.count(it.key()) > 0, "io", "unknown manifest key " + it.key());
      ManifestRecord r;
      r.scene_id = j.at("scene_id").get<int>();
      r.device_id = j.at("device_id").get<int>();
      r.raw_path = j.at("raw_path").get<std::string>();
      r.rgb_path = j.at("rgb_path").get<std::string>();
      r.split = j.at("split").get<std::string>();
      if (j.contains("flow_path") && !j["flow_path"].is_null()) r.flow_path = j["flow_path"].get<std::string>();
      if (j.contains("wb_gt") && !j["wb_gt"].is_null()) r.wb_gt = j["wb_gt"].get<std::array<double, 4>>();
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      fail("io", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "io", "cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    require(out.good(), "io", "write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text_file(const fs::path& path) { return read_all(path); }

}  // namespace devisp::io
