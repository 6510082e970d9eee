#pragma once

#include <string>
#include <utility>
#include <vector>

#include "calm/codec.hpp"
#include "calm/data.hpp"
#include "calm/io.hpp"
#include "calm/processor.hpp"

namespace calm {

template <typename S>
PointSet<S> cast_points(const PointSet<float>& ps) {
  std::vector<S> v(ps.positions.values().begin(), ps.positions.values().end());
  return PointSet<S>::unchecked(Tensor<S>({ps.size(), ps.dim()}, std::move(v)), ps.periodic);
}

/// The assembled encode-process-decode model plus the channel statistics it
/// was trained with. Field values enter and leave in z-scored space; raw
/// trajectories are normalized on the way in and denormalized on the way out.
template <typename S>
struct CalmPdeModel {
  CodecConfig codec_cfg;
  ProcessorConfig proc_cfg;
  std::size_t in_channels = 1;
  std::size_t dim = 1;
  std::vector<bool> periodic;
  ChannelStats stats;

  Encoder<S> encoder;
  Processor<S> processor;
  Decoder<S> decoder;

  static CalmPdeModel build_raw(const CodecConfig& codec, const ProcessorConfig& proc,
                                std::size_t in_channels, std::size_t dim,
                                const std::vector<bool>& periodic, S dt, std::uint64_t seed,
                                const PointSet<S>* mesh_prior) {
    auto violations = codec.validate();
    if (!violations.empty()) {
      std::string msg = "invalid codec config:";
      for (const auto& v : violations) msg += "\n  - " + v;
      throw ConfigError(msg);
    }
    CalmPdeModel m;
    m.codec_cfg = codec;
    m.proc_cfg = proc;
    m.in_channels = in_channels;
    m.dim = dim;
    m.periodic = periodic;
    m.stats.mean.assign(in_channels, 0.0);
    m.stats.stddev.assign(in_channels, 1.0);

    Rng enc_rng = fork_rng(seed, 1);
    Rng proc_rng = fork_rng(seed, 2);
    Rng dec_rng = fork_rng(seed, 3);
    m.encoder = Encoder<S>::build(codec, in_channels, dim, periodic, enc_rng, mesh_prior);
    m.processor = Processor<S>::build(proc, codec.latent_dim(), dim, periodic, dt, proc_rng);
    m.decoder = Decoder<S>::build(codec, dim, periodic, dec_rng, mesh_prior);
    return m;
  }

  static CalmPdeModel build(const CodecConfig& codec, const ProcessorConfig& proc,
                            const Dataset& ds, std::uint64_t seed) {
    PointSet<S> mesh = cast_points<S>(ds.mesh_points());
    CalmPdeModel m =
        build_raw(codec, proc, ds.channels, ds.dim, ds.periodic, S(ds.dt), seed, &mesh);
    m.stats = compute_stats(ds);
    return m;
  }

  std::vector<ParamRef<S>> params() {
    std::vector<ParamRef<S>> out;
    for (std::size_t i = 0; i < encoder.layers.size(); ++i)
      encoder.layers[i].visit_params("enc." + std::to_string(i), out);
    processor.visit_params("proc", out);
    for (std::size_t i = 0; i < decoder.layers.size(); ++i)
      decoder.layers[i].visit_params("dec." + std::to_string(i), out);
    return out;
  }

  std::size_t latent_tokens() const { return codec_cfg.latent_tokens(); }
  std::size_t latent_dim() const { return codec_cfg.latent_dim(); }

  Tensor<S> normalize(const Tensor<S>& raw) const {
    std::size_t c = in_channels;
    std::vector<S> v(raw.numel());
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = S((raw[i] - S(stats.mean[i % c])) / S(stats.stddev[i % c]));
    return Tensor<S>(raw.shape(), std::move(v));
  }

  std::vector<S> denormalize(const Tensor<S>& normed) const {
    std::size_t c = in_channels;
    std::vector<S> v(normed.numel());
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = S(normed[i] * S(stats.stddev[i % c]) + S(stats.mean[i % c]));
    return v;
  }

  /// Neighborhood plans for one (input mesh, output mesh) configuration.
  /// Valid until any query position moves.
  struct Plans {
    std::vector<Neighborhood<S>> enc, dec;
  };

  Plans build_plans(const PointSet<S>& in_mesh, const PointSet<S>& out_mesh) const {
    Plans p;
    p.enc = encoder.build_plans(in_mesh);
    p.dec = decoder.build_plans(encoder.layers.back().query_pos, out_mesh);
    return p;
  }

  /// Encodes a normalized IC, rolls the latent state forward n_steps and
  /// decodes each retained state at out_mesh. Index 0 is the IC
  /// self-reconstruction when include_step0 is set. Decoder pair kernels are
  /// position-only, so they are computed once and reused across the window.
  std::vector<Tensor<S>> forward_window(Tape<S>& tape, const Tensor<S>& ic_normed,
                                        const PointSet<S>& in_mesh, const PointSet<S>& out_mesh,
                                        std::size_t n_steps, bool include_step0,
                                        const Plans* frozen = nullptr) const {
    Plans local;
    if (!frozen) {
      local = build_plans(in_mesh, out_mesh);
      frozen = &local;
    }
    LatentState<S> state = encoder.encode(tape, ic_normed, in_mesh, &frozen->enc);
    auto states = processor.rollout(tape, state, n_steps);
    auto kernels = decoder.precompute_kernels(tape, state.p, out_mesh, frozen->dec);
    std::vector<Tensor<S>> out;
    out.reserve(states.size());
    for (std::size_t i = include_step0 ? 0 : 1; i < states.size(); ++i)
      out.push_back(decoder.decode_with_kernels(tape, states[i].z, kernels, frozen->dec));
    return out;
  }

  /// Re-wraps drifted query positions into the domain after an update.
  void constrain_positions() {
    auto fix = [&](CalmLayer<S>& layer) {
      if (!layer.query_pos.defined() || !layer.cfg.learnable_queries) return;
      auto wrapped = wrap_into_domain(layer.query_pos.values(), dim, periodic);
      layer.query_pos = Tensor<S>(layer.query_pos.shape(), std::move(wrapped), true);
    };
    for (auto& l : encoder.layers) fix(l);
    for (auto& l : decoder.layers) fix(l);
  }

  nlohmann::json arch_json() const {
    nlohmann::json j;
    j["enc_channels"] = codec_cfg.enc_channels;
    j["enc_queries"] = codec_cfg.enc_queries;
    j["enc_percentiles"] = codec_cfg.enc_percentiles;
    j["enc_temperatures"] = codec_cfg.enc_temperatures;
    j["dec_channels"] = codec_cfg.dec_channels;
    j["dec_queries"] = codec_cfg.dec_queries;
    j["dec_percentiles"] = codec_cfg.dec_percentiles;
    j["dec_temperatures"] = codec_cfg.dec_temperatures;
    j["mesh_prior"] = codec_cfg.mesh_prior;
    j["learnable_queries"] = codec_cfg.learnable_queries;
    j["rff_per_dim"] = codec_cfg.rff_per_dim;
    j["kernel_hidden"] = codec_cfg.kernel_hidden;
    j["modulation"] = codec_cfg.modulation;
    j["distance_weighting"] = codec_cfg.distance_weighting;
    j["distance_only_kernel"] = codec_cfg.distance_only_kernel;
    j["processor_blocks"] = proc_cfg.blocks;
    j["in_channels"] = in_channels;
    j["dim"] = dim;
    j["periodic"] = std::vector<int>(periodic.begin(), periodic.end());
    j["dt"] = double(processor.dt);
    j["mean"] = stats.mean;
    j["stddev"] = stats.stddev;
    return j;
  }

  static CodecConfig codec_from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.enc_channels = j.at("enc_channels").template get<std::vector<std::size_t>>();
    c.enc_queries = j.at("enc_queries").template get<std::vector<std::size_t>>();
    c.enc_percentiles = j.at("enc_percentiles").template get<std::vector<double>>();
    c.enc_temperatures = j.at("enc_temperatures").template get<std::vector<double>>();
    c.dec_channels = j.at("dec_channels").template get<std::vector<std::size_t>>();
    c.dec_queries = j.at("dec_queries").template get<std::vector<std::size_t>>();
    c.dec_percentiles = j.at("dec_percentiles").template get<std::vector<double>>();
    c.dec_temperatures = j.at("dec_temperatures").template get<std::vector<double>>();
    c.mesh_prior = j.at("mesh_prior");
    c.learnable_queries = j.at("learnable_queries");
    c.rff_per_dim = j.at("rff_per_dim");
    c.kernel_hidden = j.at("kernel_hidden");
    c.modulation = j.at("modulation");
    c.distance_weighting = j.at("distance_weighting");
    c.distance_only_kernel = j.at("distance_only_kernel");
    return c;
  }
};

/// Serializes every parameter and buffer (plus caller-provided extra state)
/// into a checkpoint container.
template <typename S>
void save_model_checkpoint(const std::string& path, CalmPdeModel<S>& model, nlohmann::json extra,
                           const std::vector<std::pair<std::string, Tensor<S>>>& opt_state = {}) {
  std::vector<std::pair<std::string, Tensor<S>>> tensors;
  for (auto& p : model.params()) tensors.emplace_back(p.name, *p.slot);
  for (auto& [name, t] : opt_state) tensors.emplace_back(name, t);
  extra["arch"] = model.arch_json();
  save_checkpoint(path, std::move(extra), tensors);
}

/// Rebuilds a model from the checkpoint's architecture echo alone; every
/// tensor (positions included) comes from the stored payload.
template <typename S>
CalmPdeModel<S> load_model_checkpoint(const Checkpoint<S>& ck) {
  const auto& arch = ck.meta.at("arch");
  CodecConfig codec = CalmPdeModel<S>::codec_from_json(arch);
  ProcessorConfig proc;
  proc.blocks = arch.at("processor_blocks");
  proc.rff_per_dim = codec.rff_per_dim;
  std::size_t in_channels = arch.at("in_channels");
  std::size_t dim = arch.at("dim");
  std::vector<bool> periodic;
  for (int p : arch.at("periodic").template get<std::vector<int>>()) periodic.push_back(p != 0);
  CalmPdeModel<S> m = CalmPdeModel<S>::build_raw(codec, proc, in_channels, dim, periodic,
                                                 S(double(arch.at("dt"))), 0, nullptr);
  m.stats.mean = arch.at("mean").template get<std::vector<double>>();
  m.stats.stddev = arch.at("stddev").template get<std::vector<double>>();
  for (auto& p : m.params()) {
    const Tensor<S>& stored = ck.require(p.name);
    if (stored.shape() != p.slot->shape())
      throw FormatError("checkpoint tensor '" + p.name + "' has shape " +
                        shape_str(stored.shape()) + ", expected " + shape_str(p.slot->shape()));
    *p.slot = Tensor<S>(stored.shape(), stored.values(), p.slot->requires_grad());
  }
  return m;
}

/// Checkpoint load plus dataset compatibility checks (the eval/train path).
template <typename S>
CalmPdeModel<S> load_model_checkpoint(const Checkpoint<S>& ck, const Dataset& ds) {
  const auto& arch = ck.meta.at("arch");
  if (std::size_t(arch.at("in_channels")) != ds.channels)
    throw ConfigError("checkpoint was trained with " +
                      std::to_string(std::size_t(arch.at("in_channels"))) +
                      " channels but the dataset has " + std::to_string(ds.channels));
  if (std::size_t(arch.at("dim")) != ds.dim)
    throw ConfigError("checkpoint spatial dimension does not match the dataset");
  return load_model_checkpoint(ck);
}

}  // namespace calm
