#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calm/codec.hpp"
#include "calm/error.hpp"
#include "calm/training.hpp"

namespace calm {

/// Complete declarative run description: dataset path, model architecture,
/// training schedule, seed and output directory. Parsed from a flat
/// key-value text with [section] headers; the resolved form (all defaults
/// filled in) is written back into every run directory.
struct RunConfig {
  std::string dataset_path;
  CodecConfig codec;
  std::size_t processor_blocks = 2;
  TrainConfig train;
  std::uint64_t seed = 7;
  std::size_t threads = 0;
  std::string out_dir = "run";
};

namespace detail_cfg {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct Parser {
  std::map<std::string, std::string> kv;  // "section.key" -> value
  std::vector<std::string> errors;

  void ingest(const std::string& text) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') {
          errors.push_back("line " + std::to_string(lineno) + ": unterminated section header");
          continue;
        }
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) {
        errors.push_back("line " + std::to_string(lineno) + ": expected key = value");
        continue;
      }
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      kv[section + "." + key] = value;
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream ss(it->second);
    T v{};
    if constexpr (std::is_same_v<T, bool>) {
      std::string s = it->second;
      if (s == "true" || s == "1")
        out = true;
      else if (s == "false" || s == "0")
        out = false;
      else
        errors.push_back(std::string(key) + ": expected true/false, got '" + s + "'");
      kv.erase(it);
      return;
    } else if constexpr (std::is_same_v<T, std::string>) {
      out = it->second;
      kv.erase(it);
      return;
    } else {
      ss >> v;
      if (ss.fail() || !(ss >> std::ws).eof())
        errors.push_back(std::string(key) + ": cannot parse '" + it->second + "'");
      else
        out = v;
      kv.erase(it);
      return;
    }
  }

  template <typename T>
  void get_list(const char* key, std::vector<T>& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    std::vector<T> parsed;
    std::istringstream ss(it->second);
    std::string item;
    bool ok = true;
    while (std::getline(ss, item, ',')) {
      std::istringstream is(trim(item));
      T v{};
      is >> v;
      if (is.fail() || !(is >> std::ws).eof()) {
        errors.push_back(std::string(key) + ": cannot parse list element '" + trim(item) + "'");
        ok = false;
        break;
      }
      parsed.push_back(v);
    }
    if (ok) out = std::move(parsed);
    kv.erase(it);
  }
};

}  // namespace detail_cfg

/// Parses a run configuration, collecting every violation (syntax, unknown
/// keys, range checks) into a single ConfigError.
inline RunConfig parse_run_config(const std::string& text) {
  detail_cfg::Parser p;
  p.ingest(text);

  RunConfig c;
  // desk-scale defaults mirroring the 1D stack
  c.codec.enc_channels = {8, 16, 24};
  c.codec.enc_queries = {128, 64, 8};
  c.codec.enc_percentiles = {0.05, 0.1, 0.5};
  c.codec.enc_temperatures = {1.0, 1.0, 1.0};
  c.codec.dec_channels = {16, 8, 1};
  c.codec.dec_queries = {64, 128};
  c.codec.dec_percentiles = {1.0, 0.5, 0.1};
  c.codec.dec_temperatures = {1.0, 1.0, 1.0};

  p.get("data.dataset", c.dataset_path);
  p.get_list("codec.encoder_channels", c.codec.enc_channels);
  p.get_list("codec.encoder_queries", c.codec.enc_queries);
  p.get_list("codec.encoder_percentiles", c.codec.enc_percentiles);
  p.get_list("codec.encoder_temperatures", c.codec.enc_temperatures);
  p.get_list("codec.decoder_channels", c.codec.dec_channels);
  p.get_list("codec.decoder_queries", c.codec.dec_queries);
  p.get_list("codec.decoder_percentiles", c.codec.dec_percentiles);
  p.get_list("codec.decoder_temperatures", c.codec.dec_temperatures);
  p.get("codec.mesh_prior", c.codec.mesh_prior);
  p.get("codec.learnable_queries", c.codec.learnable_queries);
  p.get("codec.rff_per_dim", c.codec.rff_per_dim);
  p.get("codec.kernel_hidden", c.codec.kernel_hidden);
  p.get("codec.modulation", c.codec.modulation);
  p.get("codec.distance_weighting", c.codec.distance_weighting);
  p.get("codec.distance_only_kernel", c.codec.distance_only_kernel);
  p.get("processor.blocks", c.processor_blocks);
  p.get("training.epochs", c.train.epochs);
  p.get("training.batch_size", c.train.batch_size);
  p.get("training.learning_rate", c.train.learning_rate);
  p.get("training.epochs_per_increment", c.train.epochs_per_increment);
  p.get("training.random_start", c.train.random_start);
  p.get("training.self_reconstruction", c.train.self_reconstruction);
  p.get("training.adam_beta1", c.train.adam_beta1);
  p.get("training.adam_beta2", c.train.adam_beta2);
  p.get("training.adam_eps", c.train.adam_eps);
  p.get("training.grad_clip", c.train.grad_clip);
  p.get("training.val_count", c.train.val_count);
  p.get("run.seed", c.seed);
  p.get("run.threads", c.threads);
  p.get("run.out_dir", c.out_dir);

  for (const auto& [key, value] : p.kv) p.errors.push_back("unknown key '" + key + "'");
  for (const auto& v : c.codec.validate()) p.errors.push_back(v);
  if (c.train.epochs == 0) p.errors.push_back("training.epochs must be at least 1");
  if (c.train.batch_size == 0) p.errors.push_back("training.batch_size must be at least 1");
  if (!(c.train.learning_rate > 0)) p.errors.push_back("training.learning_rate must be positive");
  if (c.processor_blocks == 0) p.errors.push_back("processor.blocks must be at least 1");

  if (!p.errors.empty()) {
    std::string msg = "configuration is invalid:";
    for (const auto& e : p.errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  c.train.seed = c.seed;
  c.train.threads = c.threads;
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

namespace detail_cfg {

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace detail_cfg

/// Serializes the fully resolved configuration (defaults included).
inline std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream os;
  os << "[data]\n";
  os << "dataset = " << c.dataset_path << "\n\n";
  os << "[codec]\n";
  os << "encoder_channels = " << detail_cfg::join(c.codec.enc_channels) << "\n";
  os << "encoder_queries = " << detail_cfg::join(c.codec.enc_queries) << "\n";
  os << "encoder_percentiles = " << detail_cfg::join(c.codec.enc_percentiles) << "\n";
  os << "encoder_temperatures = " << detail_cfg::join(c.codec.enc_temperatures) << "\n";
  os << "decoder_channels = " << detail_cfg::join(c.codec.dec_channels) << "\n";
  os << "decoder_queries = " << detail_cfg::join(c.codec.dec_queries) << "\n";
  os << "decoder_percentiles = " << detail_cfg::join(c.codec.dec_percentiles) << "\n";
  os << "decoder_temperatures = " << detail_cfg::join(c.codec.dec_temperatures) << "\n";
  os << "mesh_prior = " << (c.codec.mesh_prior ? "true" : "false") << "\n";
  os << "learnable_queries = " << (c.codec.learnable_queries ? "true" : "false") << "\n";
  os << "rff_per_dim = " << c.codec.rff_per_dim << "\n";
  os << "kernel_hidden = " << c.codec.kernel_hidden << "\n";
  os << "modulation = " << (c.codec.modulation ? "true" : "false") << "\n";
  os << "distance_weighting = " << (c.codec.distance_weighting ? "true" : "false") << "\n";
  os << "distance_only_kernel = " << (c.codec.distance_only_kernel ? "true" : "false") << "\n\n";
  os << "[processor]\n";
  os << "blocks = " << c.processor_blocks << "\n\n";
  os << "[training]\n";
  os << "epochs = " << c.train.epochs << "\n";
  os << "batch_size = " << c.train.batch_size << "\n";
  os << "learning_rate = " << c.train.learning_rate << "\n";
  os << "epochs_per_increment = " << c.train.epochs_per_increment << "\n";
  os << "random_start = " << (c.train.random_start ? "true" : "false") << "\n";
  os << "self_reconstruction = " << (c.train.self_reconstruction ? "true" : "false") << "\n";
  os << "adam_beta1 = " << c.train.adam_beta1 << "\n";
  os << "adam_beta2 = " << c.train.adam_beta2 << "\n";
  os << "adam_eps = " << c.train.adam_eps << "\n";
  os << "grad_clip = " << c.train.grad_clip << "\n";
  os << "val_count = " << c.train.val_count << "\n\n";
  os << "[run]\n";
  os << "seed = " << c.seed << "\n";
  os << "threads = " << c.threads << "\n";
  os << "out_dir = " << c.out_dir << "\n";
  return os.str();
}

inline nlohmann::json run_config_json(const RunConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset_path;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["out_dir"] = c.out_dir;
  j["processor_blocks"] = c.processor_blocks;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["learning_rate"] = c.train.learning_rate;
  j["epochs_per_increment"] = c.train.epochs_per_increment;
  j["random_start"] = c.train.random_start;
  j["self_reconstruction"] = c.train.self_reconstruction;
  j["grad_clip"] = c.train.grad_clip;
  j["val_count"] = c.train.val_count;
  return j;
}

}  // namespace calm
