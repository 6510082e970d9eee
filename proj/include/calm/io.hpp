#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "calm/data.hpp"
#include "calm/error.hpp"
#include "calm/tensor.hpp"

namespace calm {

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian on disk");

namespace io {

constexpr const char* kDatasetMagic = "CALMDS01";
constexpr const char* kCheckpointMagic = "CALMCK01";

/// Header layout: 8 magic bytes, u64 JSON length, the JSON blob, zero padding
/// to the next 16-byte boundary, then the raw f32 payload.
inline std::size_t aligned_header_size(std::size_t json_len) {
  return ((16 + json_len + 15) / 16) * 16;
}

inline void write_container(const std::string& path, const char* magic,
                            const nlohmann::json& meta, const float* payload,
                            std::size_t count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  std::string json = meta.dump();
  std::uint64_t len = json.size();
  out.write(magic, 8);
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(json.data(), std::streamsize(json.size()));
  std::size_t pad = aligned_header_size(json.size()) - 16 - json.size();
  std::vector<char> zeros(pad, 0);
  out.write(zeros.data(), std::streamsize(pad));
  out.write(reinterpret_cast<const char*>(payload), std::streamsize(count * sizeof(float)));
  if (!out) throw FormatError("short write to '" + path + "'");
}

struct Container {
  nlohmann::json meta;
  std::vector<float> payload;
};

inline Container read_container(const std::string& path, const char* magic) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::size_t size = std::size_t(in.tellg());
  in.seekg(0);
  if (size < 16) throw FormatError("'" + path + "': file too small for a container header");
  char got[8];
  in.read(got, 8);
  if (std::memcmp(got, magic, 8) != 0)
    throw FormatError("'" + path + "': bad magic (expected " + std::string(magic, 8) + ")");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::size_t header = aligned_header_size(len);
  if (size < header) throw FormatError("'" + path + "': truncated header");
  std::string json(len, '\0');
  in.read(json.data(), std::streamsize(len));
  Container c;
  try {
    c.meta = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': invalid metadata JSON: " + e.what());
  }
  std::size_t payload_bytes = size - header;
  if (payload_bytes % sizeof(float) != 0)
    throw FormatError("'" + path + "': payload is not a whole number of 32-bit values");
  in.seekg(std::streamoff(header));
  c.payload.resize(payload_bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(c.payload.data()), std::streamsize(payload_bytes));
  if (!in) throw FormatError("'" + path + "': short read");
  return c;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

inline nlohmann::json dataset_meta_json(const Dataset& ds) {
  nlohmann::json j;
  j["format"] = "calmds";
  j["version"] = 1;
  j["pde"] = ds.pde;
  j["dim"] = ds.dim;
  j["channels"] = ds.channels;
  j["timesteps"] = ds.timesteps;
  j["n_points"] = ds.n_points;
  j["dt"] = ds.dt;
  j["periodic"] = std::vector<int>(ds.periodic.begin(), ds.periodic.end());
  j["train_count"] = ds.train_count;
  j["test_count"] = ds.test_count;
  j["seed"] = ds.seed;
  j["mesh_kind"] = ds.mesh_kind;
  j["gen_params"] = ds.gen_params;
  j["sample_count"] = ds.sample_count();
  return j;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::vector<float> payload;
  payload.reserve(ds.mesh.size() + ds.sample_count() * ds.timesteps * ds.frame_size());
  payload.insert(payload.end(), ds.mesh.begin(), ds.mesh.end());
  for (const auto& s : ds.samples) payload.insert(payload.end(), s.begin(), s.end());
  io::write_container(path, io::kDatasetMagic, dataset_meta_json(ds), payload.data(),
                      payload.size());
}

inline Dataset load_dataset(const std::string& path) {
  auto c = io::read_container(path, io::kDatasetMagic);
  const auto& j = c.meta;
  try {
    if (j.at("format") != "calmds" || j.at("version") != 1)
      throw FormatError("'" + path + "': unsupported dataset version");
    Dataset ds;
    ds.pde = j.at("pde");
    ds.dim = j.at("dim");
    ds.channels = j.at("channels");
    ds.timesteps = j.at("timesteps");
    ds.n_points = j.at("n_points");
    ds.dt = j.at("dt");
    for (int p : j.at("periodic").get<std::vector<int>>()) ds.periodic.push_back(p != 0);
    ds.train_count = j.at("train_count");
    ds.test_count = j.at("test_count");
    ds.seed = j.at("seed");
    ds.mesh_kind = j.at("mesh_kind");
    ds.gen_params = j.at("gen_params").get<std::map<std::string, double>>();
    std::size_t samples = j.at("sample_count");

    std::size_t mesh_count = ds.n_points * ds.dim;
    std::size_t frame = ds.timesteps * ds.n_points * ds.channels;
    if (c.payload.size() != mesh_count + samples * frame)
      throw FormatError("'" + path + "': payload size disagrees with metadata (" +
                        std::to_string(c.payload.size()) + " values, expected " +
                        std::to_string(mesh_count + samples * frame) + ")");
    ds.mesh.assign(c.payload.begin(), c.payload.begin() + std::ptrdiff_t(mesh_count));
    for (std::size_t s = 0; s < samples; ++s) {
      auto begin = c.payload.begin() + std::ptrdiff_t(mesh_count + s * frame);
      ds.samples.emplace_back(begin, begin + std::ptrdiff_t(frame));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': metadata field error: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container (named tensors + manifest)
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const std::string& path, nlohmann::json meta,
                     const std::vector<std::pair<std::string, Tensor<S>>>& tensors) {
  nlohmann::json manifest = nlohmann::json::array();
  std::vector<float> payload;
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    manifest.push_back(e);
    for (std::size_t i = 0; i < t.numel(); ++i) payload.push_back(float(t[i]));
    offset += t.numel();
  }
  meta["format"] = "calmck";
  meta["version"] = 1;
  meta["tensors"] = manifest;
  meta["payload_count"] = payload.size();
  io::write_container(path, io::kCheckpointMagic, meta, payload.data(), payload.size());
}

template <typename S>
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor<S>> tensors;

  const Tensor<S>& require(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  auto c = io::read_container(path, io::kCheckpointMagic);
  Checkpoint<S> ck;
  ck.meta = c.meta;
  try {
    if (c.meta.at("format") != "calmck" || c.meta.at("version") != 1)
      throw FormatError("'" + path + "': unsupported checkpoint version");
    if (c.meta.at("payload_count") != c.payload.size())
      throw FormatError("'" + path + "': payload size disagrees with manifest");
    for (const auto& e : c.meta.at("tensors")) {
      std::string name = e.at("name");
      Shape shape = e.at("shape").get<Shape>();
      std::size_t offset = e.at("offset");
      std::size_t n = shape_numel(shape);
      if (offset + n > c.payload.size())
        throw FormatError("'" + path + "': tensor '" + name + "' overruns the payload");
      std::vector<S> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = S(c.payload[offset + i]);
      ck.tensors.emplace(name, Tensor<S>(shape, std::move(v)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': manifest error: " + e.what());
  }
  return ck;
}

}  // namespace calm
