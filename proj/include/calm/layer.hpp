#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calm/geometry.hpp"
#include "calm/ops.hpp"
#include "calm/rng.hpp"
#include "calm/tape.hpp"
#include "calm/tensor.hpp"

namespace calm {

/// Static configuration of one CALM layer. num_queries == 0 marks the
/// externally queried form used by the final decoder layer.
struct CalmLayerConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t num_queries = 0;
  double percentile = 0.1;
  double temperature = 1.0;
  std::size_t rff_frequencies = 32;  // columns of the RFF matrix
  std::size_t kernel_hidden = 32;
  bool learnable_queries = true;
  bool modulation = true;
  bool distance_weighting = true;
  bool distance_only_kernel = false;
  bool output_activation = true;  // identity on the regression head

  bool external_query() const { return num_queries == 0; }
};

/// Reference to one named parameter slot of a module.
template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* slot;
  bool trainable;
};

/// One CALM layer: continuous convolution with an RFF-MLP kernel, per-query
/// modulation, softmax distance weighting over the percentile epsilon
/// neighborhood, and pointwise transforms around the convolution. Query
/// points are learnable except in the externally queried form.
template <typename S>
struct CalmLayer {
  CalmLayerConfig cfg;
  std::vector<bool> periodic;

  Tensor<S> query_pos;               // K x D
  Tensor<S> gamma, beta;             // K x H
  Tensor<S> w1, b1, w2, b2;          // kernel MLP
  Tensor<S> dist_temps;              // Ni*No, distance-only kernel
  Tensor<S> conv_bias;               // No
  Tensor<S> pre_w;                   // Ni x Ni pointwise linear
  Tensor<S> post_w1, post_b1, post_w2, post_b2;  // No -> No pointwise MLP
  Tensor<S> rff_b;                   // D x F, fixed buffer

  struct Result {
    Tensor<S> values;
    Tensor<S> query_positions;
  };

  static CalmLayer init(const CalmLayerConfig& cfg, std::size_t dim,
                        const std::vector<bool>& periodic, Rng& rng,
                        const PointSet<S>* mesh_prior = nullptr) {
    CalmLayer layer;
    layer.cfg = cfg;
    layer.periodic = periodic;
    std::size_t ni = cfg.in_channels, no = cfg.out_channels;
    std::size_t h = cfg.kernel_hidden, f = cfg.rff_frequencies;

    if (!cfg.external_query()) {
      std::size_t k = cfg.num_queries;
      std::vector<S> q;
      if (mesh_prior) {
        q = sample_mesh_rows(*mesh_prior, k, dim, rng);
      } else {
        q = uniform_vec<S>(rng, k * dim, S(0), S(1));
        for (auto& v : q)
          if (v >= S(1)) v = S(0);
      }
      layer.query_pos = Tensor<S>({k, dim}, std::move(q), cfg.learnable_queries);
      if (cfg.modulation) {
        layer.gamma = Tensor<S>::ones({k, h}, true);
        layer.beta = Tensor<S>::zeros({k, h}, true);
      }
    }

    layer.rff_b = Tensor<S>({dim, f}, normal_vec<S>(rng, dim * f, S(0), S(1)), false);
    if (cfg.distance_only_kernel) {
      layer.dist_temps = Tensor<S>::ones({ni * no}, true);
    } else {
      layer.w1 = Tensor<S>({2 * f, h}, linear_uniform_vec<S>(rng, 2 * f * h, 2 * f), true);
      layer.b1 = Tensor<S>::zeros({h}, true);
      layer.w2 = Tensor<S>({h, ni * no}, linear_uniform_vec<S>(rng, h * ni * no, h), true);
      // b2 acts as the translation-independent mean kernel; fan-in is the
      // input channel count, not the MLP width.
      layer.b2 = Tensor<S>({ni * no}, kaiming_uniform_vec<S>(rng, ni * no, ni), true);
    }
    layer.conv_bias = Tensor<S>::zeros({no}, true);
    layer.pre_w = Tensor<S>({ni, ni}, linear_uniform_vec<S>(rng, ni * ni, ni), true);
    layer.post_w1 = Tensor<S>({no, no}, linear_uniform_vec<S>(rng, no * no, no), true);
    layer.post_b1 = Tensor<S>::zeros({no}, true);
    layer.post_w2 = Tensor<S>({no, no}, linear_uniform_vec<S>(rng, no * no, no), true);
    layer.post_b2 = Tensor<S>::zeros({no}, true);
    return layer;
  }

  /// Kernel values for every (query, input) pair: modulated MLP over the
  /// RFF-encoded translations, optionally multiplied by the softmax distance
  /// weighting; or the distance-only form with learnable temperatures.
  Tensor<S> kernel_for_pairs(Tape<S>& tape, const Tensor<S>& translations,
                             const PairIndexPtr& pairs) const {
    if (translations.rows() == 0)
      throw ContractError("kernel_for_pairs: empty neighborhood");
    if (cfg.distance_only_kernel) {
      Tensor<S> sq = rowwise_sqnorm(tape, translations);
      return segment_softmax_dist_multi(tape, sq, pairs, dist_temps);
    }
    Tensor<S> r = rff_encode(tape, translations, rff_b);
    Tensor<S> h = add_rowvec(tape, matmul(tape, r, w1), b1);
    if (cfg.modulation && !cfg.external_query()) h = modulate(tape, h, gamma, beta, pairs);
    h = gelu(tape, h);
    Tensor<S> k = add_rowvec(tape, matmul(tape, h, w2), b2);
    if (cfg.distance_weighting) {
      Tensor<S> sq = rowwise_sqnorm(tape, translations);
      Tensor<S> w = segment_softmax_dist(tape, sq, pairs, S(cfg.temperature));
      k = scale_rows(tape, k, w);
    }
    return k;
  }

  /// Kernel weights for the neighbors of a single query, given their
  /// translation vectors. Output is M x (Ni*No).
  Tensor<S> kernel_weights(Tape<S>& tape, std::size_t query_index,
                           const Tensor<S>& translations) const {
    std::size_t m = translations.rows();
    if (m == 0) throw ContractError("kernel_weights: query has no neighbors");
    auto pairs = std::make_shared<PairIndex>();
    pairs->query_of.assign(m, static_cast<std::uint32_t>(query_index));
    pairs->input_of.assign(m, 0);
    pairs->offsets = {0, static_cast<std::uint32_t>(m)};
    return kernel_for_pairs(tape, translations, pairs);
  }

  /// Pair-kernel tensor for one (input, query) geometry. Value-independent,
  /// so one instance can feed every convolution that shares the geometry
  /// within a tape (all rollout steps of a decode, for instance).
  Tensor<S> pair_kernel(Tape<S>& tape, const Tensor<S>& input_pos, const Tensor<S>& query_positions,
                        const Neighborhood<S>& nb) const {
    Tensor<S> t = pair_translations(tape, query_positions, input_pos, nb.pairs, periodic);
    return kernel_for_pairs(tape, t, nb.pairs);
  }

  Tensor<S> conv_with_kernel(Tape<S>& tape, const Tensor<S>& values, const Tensor<S>& kernel,
                             const Neighborhood<S>& nb) const {
    if (values.cols() != cfg.in_channels)
      throw DimensionError("continuous_conv: expected " + std::to_string(cfg.in_channels) +
                           " input channels, got " + std::to_string(values.cols()));
    Tensor<S> out = conv_contract(tape, values, kernel, nb.pairs, cfg.out_channels);
    out = add_rowvec(tape, out, conv_bias);
    if (cfg.output_activation) out = gelu(tape, out);
    return out;
  }

  /// The continuous convolution proper (no pointwise transforms):
  /// sigma( sum_i sum_{m in RF(a_j)} f_i(alpha_m) k_io(a_j - alpha_m) + b_o ).
  Tensor<S> continuous_conv(Tape<S>& tape, const Tensor<S>& values, const Tensor<S>& input_pos,
                            const Tensor<S>& query_positions, const Neighborhood<S>& nb) const {
    Tensor<S> k = pair_kernel(tape, input_pos, query_positions, nb);
    return conv_with_kernel(tape, values, k, nb);
  }

  /// Pointwise linear, convolution against a precomputed pair kernel,
  /// pointwise MLP.
  Tensor<S> forward_with_kernel(Tape<S>& tape, const Tensor<S>& values, const Tensor<S>& kernel,
                                const Neighborhood<S>& nb) const {
    Tensor<S> v = matmul(tape, values, pre_w);
    Tensor<S> out = conv_with_kernel(tape, v, kernel, nb);
    Tensor<S> mid = gelu(tape, add_rowvec(tape, matmul(tape, out, post_w1), post_b1));
    return add_rowvec(tape, matmul(tape, mid, post_w2), post_b2);
  }

  /// Full layer: pointwise linear, continuous convolution, pointwise MLP.
  /// `frozen` skips the neighborhood rebuild (gradient checks, frozen eval).
  Result forward_layer(Tape<S>& tape, const Tensor<S>& values, const PointSet<S>& input_points,
                       const PointSet<S>* external_queries = nullptr,
                       const Neighborhood<S>* frozen = nullptr) const {
    if (cfg.external_query() && !external_queries)
      throw ContractError("forward_layer: externally queried layer needs query points");
    if (!cfg.external_query() && external_queries)
      throw ConfigError("forward_layer: external queries passed to a learned-query layer");

    Tensor<S> qpos = cfg.external_query() ? external_queries->positions : query_pos;

    Neighborhood<S> own;
    const Neighborhood<S>* nb = frozen;
    if (!nb) {
      PointSet<S> queries(qpos, input_points.periodic);
      own = build_neighborhood(queries, input_points, cfg.percentile);
      nb = &own;
    }

    Tensor<S> kernel = pair_kernel(tape, input_points.positions, qpos, *nb);
    return {forward_with_kernel(tape, values, kernel, *nb), qpos};
  }

  Neighborhood<S> build_plan(const PointSet<S>& input_points,
                             const PointSet<S>* external_queries = nullptr) const {
    Tensor<S> qpos = cfg.external_query() ? external_queries->positions : query_pos;
    PointSet<S> queries(qpos, input_points.periodic);
    return build_neighborhood(queries, input_points, cfg.percentile);
  }

  void visit_params(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    auto push = [&](const char* name, Tensor<S>& t, bool trainable) {
      if (t.defined()) out.push_back({prefix + "." + name, &t, trainable});
    };
    push("query_pos", query_pos, cfg.learnable_queries);
    push("gamma", gamma, true);
    push("beta", beta, true);
    push("w1", w1, true);
    push("b1", b1, true);
    push("w2", w2, true);
    push("b2", b2, true);
    push("dist_temps", dist_temps, true);
    push("conv_bias", conv_bias, true);
    push("pre_w", pre_w, true);
    push("post_w1", post_w1, true);
    push("post_b1", post_b1, true);
    push("post_w2", post_w2, true);
    push("post_b2", post_b2, true);
    push("rff_b", rff_b, false);
  }

 private:
  static std::vector<S> sample_mesh_rows(const PointSet<S>& mesh, std::size_t k, std::size_t dim,
                                         Rng& rng) {
    std::size_t n = mesh.size();
    std::vector<S> out(k * dim);
    if (k > n) {
      // more queries than mesh points: sample with replacement
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t j = 0; j < k; ++j) {
        std::size_t i = pick(rng);
        for (std::size_t d = 0; d < dim; ++d) out[j * dim + d] = mesh.positions[i * dim + d];
      }
      return out;
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t d = 0; d < dim; ++d) out[j * dim + d] = mesh.positions[idx[j] * dim + d];
    return out;
  }
};

}  // namespace calm
