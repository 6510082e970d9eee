#pragma once

#include <string>
#include <vector>

#include "calm/layer.hpp"

namespace calm {

/// Stack configuration for the hierarchical encoder and decoder. Encoder
/// lists cover every layer; decoder query counts cover only the learned
/// stages (the final layer is externally queried).
struct CodecConfig {
  std::vector<std::size_t> enc_channels;
  std::vector<std::size_t> enc_queries;
  std::vector<double> enc_percentiles;
  std::vector<double> enc_temperatures;
  std::vector<std::size_t> dec_channels;  // last entry = output channels
  std::vector<std::size_t> dec_queries;
  std::vector<double> dec_percentiles;
  std::vector<double> dec_temperatures;
  bool mesh_prior = false;
  bool learnable_queries = true;
  std::size_t rff_per_dim = 32;
  std::size_t kernel_hidden = 32;
  bool modulation = true;
  bool distance_weighting = true;
  bool distance_only_kernel = false;

  std::size_t latent_tokens() const { return enc_queries.back(); }
  std::size_t latent_dim() const { return enc_channels.back(); }

  /// Collects every violated constraint; empty means valid.
  std::vector<std::string> validate() const {
    std::vector<std::string> v;
    std::size_t k = enc_channels.size();
    if (k == 0) v.push_back("encoder needs at least one layer");
    if (enc_queries.size() != k || enc_percentiles.size() != k || enc_temperatures.size() != k)
      v.push_back("encoder per-layer lists must have equal length");
    std::size_t kd = dec_channels.size();
    if (kd == 0) v.push_back("decoder needs at least one layer");
    if (dec_queries.size() + 1 != kd)
      v.push_back("decoder query list must have one entry less than its channel list");
    if (dec_percentiles.size() != kd || dec_temperatures.size() != kd)
      v.push_back("decoder percentile/temperature lists must match its layer count");
    for (std::size_t i = 1; i < enc_queries.size(); ++i)
      if (enc_queries[i] >= enc_queries[i - 1]) {
        v.push_back("encoder query counts must strictly decrease");
        break;
      }
    for (std::size_t i = 1; i < enc_channels.size(); ++i)
      if (enc_channels[i] <= enc_channels[i - 1]) {
        v.push_back("encoder channel counts must increase");
        break;
      }
    for (std::size_t i = 1; i < dec_queries.size(); ++i)
      if (dec_queries[i] <= dec_queries[i - 1]) {
        v.push_back("decoder query counts must strictly increase");
        break;
      }
    for (std::size_t i = 1; i < dec_channels.size(); ++i)
      if (dec_channels[i] >= dec_channels[i - 1]) {
        v.push_back("decoder channel counts must decrease");
        break;
      }
    auto check_fracs = [&](const std::vector<double>& ps, const char* who) {
      for (double p : ps)
        if (!(p > 0.0 && p <= 1.0)) {
          v.push_back(std::string(who) + " percentiles must lie in (0, 1]");
          return;
        }
    };
    check_fracs(enc_percentiles, "encoder");
    check_fracs(dec_percentiles, "decoder");
    auto check_temps = [&](const std::vector<double>& ts, const char* who) {
      for (double t : ts)
        if (!(t > 0.0)) {
          v.push_back(std::string(who) + " temperatures must be positive");
          return;
        }
    };
    check_temps(enc_temperatures, "encoder");
    check_temps(dec_temperatures, "decoder");
    if (rff_per_dim == 0) v.push_back("rff_per_dim must be at least 1");
    if (kernel_hidden == 0) v.push_back("kernel_hidden must be at least 1");
    return v;
  }
};

/// Latent tokens and their learned positions (the encoder output). The
/// positions are a parameter of the last encoder layer: fixed across
/// timesteps and samples, independent of the field values.
template <typename S>
struct LatentState {
  Tensor<S> z;  // l x d
  Tensor<S> p;  // l x dim
};

namespace detail {

inline CalmLayerConfig stack_layer_cfg(const CodecConfig& c, std::size_t in_ch, std::size_t out_ch,
                                       std::size_t queries, double p, double t, std::size_t dim,
                                       bool output_activation) {
  CalmLayerConfig lc;
  lc.in_channels = in_ch;
  lc.out_channels = out_ch;
  lc.num_queries = queries;
  lc.percentile = p;
  lc.temperature = t;
  lc.rff_frequencies = c.rff_per_dim * dim;
  lc.kernel_hidden = c.kernel_hidden;
  lc.learnable_queries = c.learnable_queries;
  lc.modulation = c.modulation;
  lc.distance_weighting = c.distance_weighting;
  lc.distance_only_kernel = c.distance_only_kernel;
  lc.output_activation = output_activation;
  return lc;
}

}  // namespace detail

/// Stacked CALM layers that shrink points and grow channels.
template <typename S>
struct Encoder {
  std::vector<CalmLayer<S>> layers;

  static Encoder build(const CodecConfig& c, std::size_t in_channels, std::size_t dim,
                       const std::vector<bool>& periodic, Rng& rng,
                       const PointSet<S>* mesh_prior) {
    Encoder e;
    std::size_t prev = in_channels;
    for (std::size_t i = 0; i < c.enc_channels.size(); ++i) {
      auto lc = detail::stack_layer_cfg(c, prev, c.enc_channels[i], c.enc_queries[i],
                                        c.enc_percentiles[i], c.enc_temperatures[i], dim, true);
      e.layers.push_back(CalmLayer<S>::init(lc, dim, periodic, rng,
                                            c.mesh_prior ? mesh_prior : nullptr));
      prev = c.enc_channels[i];
    }
    return e;
  }

  std::vector<Neighborhood<S>> build_plans(const PointSet<S>& mesh) const {
    std::vector<Neighborhood<S>> plans;
    const PointSet<S>* pts = &mesh;
    PointSet<S> hold = mesh;
    for (const auto& layer : layers) {
      plans.push_back(layer.build_plan(*pts));
      hold = PointSet<S>(layer.query_pos, mesh.periodic);
      pts = &hold;
    }
    return plans;
  }

  LatentState<S> encode(Tape<S>& tape, const Tensor<S>& values, const PointSet<S>& mesh,
                        const std::vector<Neighborhood<S>>* frozen = nullptr) const {
    Tensor<S> v = values;
    Tensor<S> pos = mesh.positions;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      PointSet<S> pts = PointSet<S>::unchecked(pos, mesh.periodic);
      auto r = layers[i].forward_layer(tape, v, pts, nullptr, frozen ? &(*frozen)[i] : nullptr);
      v = r.values;
      pos = r.query_positions;
    }
    return {v, pos};
  }
};

/// Stacked CALM layers that grow points and shrink channels; the final layer
/// is externally queried and has an identity output activation.
template <typename S>
struct Decoder {
  std::vector<CalmLayer<S>> layers;

  static Decoder build(const CodecConfig& c, std::size_t dim, const std::vector<bool>& periodic,
                       Rng& rng, const PointSet<S>* mesh_prior) {
    Decoder d;
    std::size_t prev = c.latent_dim();
    std::size_t k = c.dec_channels.size();
    for (std::size_t i = 0; i < k; ++i) {
      bool final_layer = (i + 1 == k);
      auto lc = detail::stack_layer_cfg(c, prev, c.dec_channels[i],
                                        final_layer ? 0 : c.dec_queries[i], c.dec_percentiles[i],
                                        c.dec_temperatures[i], dim, !final_layer);
      d.layers.push_back(CalmLayer<S>::init(lc, dim, periodic, rng,
                                            c.mesh_prior ? mesh_prior : nullptr));
      prev = c.dec_channels[i];
    }
    return d;
  }

  std::vector<Neighborhood<S>> build_plans(const Tensor<S>& latent_pos,
                                           const PointSet<S>& query_mesh) const {
    std::vector<Neighborhood<S>> plans;
    PointSet<S> pts = PointSet<S>::unchecked(latent_pos, query_mesh.periodic);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      bool final_layer = (i + 1 == layers.size());
      plans.push_back(layers[i].build_plan(pts, final_layer ? &query_mesh : nullptr));
      if (!final_layer) pts = PointSet<S>::unchecked(layers[i].query_pos, query_mesh.periodic);
    }
    return plans;
  }

  Tensor<S> decode(Tape<S>& tape, const LatentState<S>& state, const PointSet<S>& query_mesh,
                   const std::vector<Neighborhood<S>>* frozen = nullptr) const {
    Tensor<S> v = state.z;
    Tensor<S> pos = state.p;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      bool final_layer = (i + 1 == layers.size());
      PointSet<S> pts = PointSet<S>::unchecked(pos, query_mesh.periodic);
      auto r = layers[i].forward_layer(tape, v, pts, final_layer ? &query_mesh : nullptr,
                                       frozen ? &(*frozen)[i] : nullptr);
      v = r.values;
      pos = r.query_positions;
    }
    return v;
  }

  /// Pair kernels for every layer, computed once per tape. The kernels only
  /// depend on positions, so decoding several latent states in one forward
  /// pass can share them.
  std::vector<Tensor<S>> precompute_kernels(Tape<S>& tape, const Tensor<S>& latent_pos,
                                            const PointSet<S>& query_mesh,
                                            const std::vector<Neighborhood<S>>& plans) const {
    std::vector<Tensor<S>> kernels;
    kernels.reserve(layers.size());
    Tensor<S> pos = latent_pos;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      bool final_layer = (i + 1 == layers.size());
      Tensor<S> qpos = final_layer ? query_mesh.positions : layers[i].query_pos;
      kernels.push_back(layers[i].pair_kernel(tape, pos, qpos, plans[i]));
      pos = qpos;
    }
    return kernels;
  }

  Tensor<S> decode_with_kernels(Tape<S>& tape, const Tensor<S>& z,
                                const std::vector<Tensor<S>>& kernels,
                                const std::vector<Neighborhood<S>>& plans) const {
    Tensor<S> v = z;
    for (std::size_t i = 0; i < layers.size(); ++i)
      v = layers[i].forward_with_kernel(tape, v, kernels[i], plans[i]);
    return v;
  }
};

}  // namespace calm
