#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "calm/codec.hpp"
#include "calm/ops.hpp"
#include "calm/rng.hpp"

namespace calm {

struct ProcessorConfig {
  std::size_t blocks = 2;
  std::size_t rff_per_dim = 32;
};

/// Latent time-stepper: a Transformer with combined dot-product/position
/// attention predicting the latent residual, integrated by explicit Euler:
/// z <- z + dt * psi(z, p).
template <typename S>
struct Processor {
  struct Block {
    Tensor<S> wq, wk, wv;        // d x d
    Tensor<S> q_gain, k_gain;    // d
    Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  ProcessorConfig cfg;
  std::vector<bool> periodic;
  Tensor<S> w_in;   // (d + 2F) x d
  Tensor<S> w_out;  // d x d, zero-initialized so the initial dynamics are the identity
  Tensor<S> rff_b;  // dim x F buffer
  std::vector<Block> blocks;
  S dt = S(1);

  static Processor build(const ProcessorConfig& cfg, std::size_t d, std::size_t dim,
                         const std::vector<bool>& periodic, S dt, Rng& rng) {
    Processor p;
    p.cfg = cfg;
    p.periodic = periodic;
    p.dt = dt;
    std::size_t f = cfg.rff_per_dim * dim;
    p.rff_b = Tensor<S>({dim, f}, normal_vec<S>(rng, dim * f, S(0), S(1)), false);
    p.w_in = Tensor<S>({d + 2 * f, d}, linear_uniform_vec<S>(rng, (d + 2 * f) * d, d + 2 * f), true);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      Block blk;
      blk.wq = Tensor<S>({d, d}, linear_uniform_vec<S>(rng, d * d, d), true);
      blk.wk = Tensor<S>({d, d}, linear_uniform_vec<S>(rng, d * d, d), true);
      blk.wv = Tensor<S>({d, d}, linear_uniform_vec<S>(rng, d * d, d), true);
      blk.q_gain = Tensor<S>::ones({d}, true);
      blk.k_gain = Tensor<S>::ones({d}, true);
      blk.mlp_w1 = Tensor<S>({d, d}, linear_uniform_vec<S>(rng, d * d, d), true);
      blk.mlp_b1 = Tensor<S>::zeros({d}, true);
      blk.mlp_w2 = Tensor<S>({d, d}, linear_uniform_vec<S>(rng, d * d, d), true);
      blk.mlp_b2 = Tensor<S>::zeros({d}, true);
      p.blocks.push_back(std::move(blk));
    }
    p.w_out = Tensor<S>::zeros({d, d}, true);
    return p;
  }

  /// Position-derived tensors shared by every step of a rollout.
  struct Context {
    Tensor<S> dpp;   // l x l pairwise distances
    Tensor<S> rffp;  // l x 2F position features
  };

  Context make_context(Tape<S>& tape, const Tensor<S>& p) const {
    return {distance_matrix_op(tape, p, periodic), rff_encode(tape, p, rff_b)};
  }

  /// softmax( (1/sqrt(d)) LN(HWq) LN(HWk)^T - d(P,P) ) HWv with the layer
  /// normalization applied to queries and keys only.
  Tensor<S> combined_attention(Tape<S>& tape, const Tensor<S>& h, const Block& blk,
                               const Tensor<S>& dpp) const {
    std::size_t d = h.cols();
    Tensor<S> q = layer_norm_gain(tape, matmul(tape, h, blk.wq), blk.q_gain);
    Tensor<S> k = layer_norm_gain(tape, matmul(tape, h, blk.wk), blk.k_gain);
    Tensor<S> scores = scale(tape, matmul_nt(tape, q, k), S(1) / std::sqrt(S(d)));
    Tensor<S> attn = softmax_lastdim(tape, sub(tape, scores, dpp));
    return matmul(tape, attn, matmul(tape, h, blk.wv));
  }

  /// The residual network psi(z, p): project [z || RFF(p)], run the
  /// attention/MLP blocks with residual connections, project out.
  Tensor<S> psi(Tape<S>& tape, const Tensor<S>& z, const Context& ctx) const {
    Tensor<S> h = matmul(tape, concat_lastdim(tape, z, ctx.rffp), w_in);
    for (const auto& blk : blocks) {
      h = add(tape, combined_attention(tape, h, blk, ctx.dpp), h);
      Tensor<S> m = gelu(tape, add_rowvec(tape, matmul(tape, h, blk.mlp_w1), blk.mlp_b1));
      m = add_rowvec(tape, matmul(tape, m, blk.mlp_w2), blk.mlp_b2);
      h = add(tape, m, h);
    }
    return matmul(tape, h, w_out);
  }

  Tensor<S> step_values(Tape<S>& tape, const Tensor<S>& z, const Context& ctx) const {
    return add(tape, z, scale(tape, psi(tape, z, ctx), dt));
  }

  /// One explicit-Euler step; the positions pass through untouched.
  LatentState<S> step(Tape<S>& tape, const LatentState<S>& state) const {
    Context ctx = make_context(tape, state.p);
    return {step_values(tape, state.z, ctx), state.p};
  }

  /// n applications, keeping every intermediate latent (index 0 is the
  /// initial state); nothing is decoded or re-encoded in between.
  std::vector<LatentState<S>> rollout(Tape<S>& tape, const LatentState<S>& state,
                                      std::size_t n_steps) const {
    std::vector<LatentState<S>> states;
    states.reserve(n_steps + 1);
    states.push_back(state);
    if (n_steps == 0) return states;
    Context ctx = make_context(tape, state.p);
    Tensor<S> z = state.z;
    for (std::size_t s = 0; s < n_steps; ++s) {
      z = step_values(tape, z, ctx);
      states.push_back({z, state.p});
    }
    return states;
  }

  void visit_params(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w_in", &w_in, true});
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& blk = blocks[b];
      std::string bp = prefix + ".block" + std::to_string(b);
      out.push_back({bp + ".wq", &blk.wq, true});
      out.push_back({bp + ".wk", &blk.wk, true});
      out.push_back({bp + ".wv", &blk.wv, true});
      out.push_back({bp + ".q_gain", &blk.q_gain, true});
      out.push_back({bp + ".k_gain", &blk.k_gain, true});
      out.push_back({bp + ".mlp_w1", &blk.mlp_w1, true});
      out.push_back({bp + ".mlp_b1", &blk.mlp_b1, true});
      out.push_back({bp + ".mlp_w2", &blk.mlp_w2, true});
      out.push_back({bp + ".mlp_b2", &blk.mlp_b2, true});
    }
    out.push_back({prefix + ".w_out", &w_out, true});
    out.push_back({prefix + ".rff_b", &rff_b, false});
  }
};

}  // namespace calm
