#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "calm/tape.hpp"
#include "calm/tensor.hpp"

namespace calm {

/// Flattened (query, input) pair lists, grouped by query. offsets has K+1
/// entries; pairs of query j live in [offsets[j], offsets[j+1]).
struct PairIndex {
  std::vector<std::uint32_t> query_of;
  std::vector<std::uint32_t> input_of;
  std::vector<std::uint32_t> offsets;

  std::size_t pair_count() const { return query_of.size(); }
  std::size_t query_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

using PairIndexPtr = std::shared_ptr<const PairIndex>;

namespace detail {

// c (+)= a*b, a: R x K, b: K x C
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t R, std::size_t K, std::size_t C,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + R * C, S(0));
  for (std::size_t r = 0; r < R; ++r) {
    S* crow = c + r * C;
    const S* arow = a + r * K;
    for (std::size_t k = 0; k < K; ++k) {
      S av = arow[k];
      const S* brow = b + k * C;
      for (std::size_t j = 0; j < C; ++j) crow[j] += av * brow[j];
    }
  }
}

// c (+)= a*b^T, a: R x K, b: C x K
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t R, std::size_t K, std::size_t C,
             bool accumulate) {
  for (std::size_t r = 0; r < R; ++r) {
    const S* arow = a + r * K;
    S* crow = c + r * C;
    for (std::size_t j = 0; j < C; ++j) {
      const S* brow = b + j * K;
      S acc = S(0);
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// c (+)= a^T*b, a: K x R, b: K x C
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t R, std::size_t K, std::size_t C,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + R * C, S(0));
  for (std::size_t k = 0; k < K; ++k) {
    const S* arow = a + k * R;
    const S* brow = b + k * C;
    for (std::size_t r = 0; r < R; ++r) {
      S av = arow[r];
      S* crow = c + r * C;
      for (std::size_t j = 0; j < C; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
S gelu_fwd(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475)));
}

template <typename S>
S gelu_grad(S x) {
  S phi = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
  S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
  return phi + x * pdf;
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename S>
Tensor<S> finish(Tape<S>& tape, const char* op, Shape shape, std::vector<S> values, bool rg) {
  Tensor<S> out(std::move(shape), std::move(values), rg);
  tape.throw_if_not_finite(op, out);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::size_t R = a.extent(0), K = a.extent(1), C = b.extent(1);
  std::vector<S> v(R * C);
  detail::gemm_nn(a.data(), b.data(), v.data(), R, K, C, false);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<S> out = detail::finish(tape, "matmul", Shape{R, C}, std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("matmul", [&tape, a, b, out, R, K, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      if (a.requires_grad())
        detail::gemm_nt(g->data(), b.data(), tape.grad_buffer(a).data(), R, C, K, true);
      if (b.requires_grad())
        detail::gemm_tn(a.data(), g->data(), tape.grad_buffer(b).data(), K, R, C, true);
    });
  }
  return out;
}

/// a * b^T for row-major operands of shape {m,k} and {n,k}.
template <typename S>
Tensor<S> matmul_nt(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1))
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::size_t R = a.extent(0), K = a.extent(1), C = b.extent(0);
  std::vector<S> v(R * C);
  detail::gemm_nt(a.data(), b.data(), v.data(), R, K, C, false);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<S> out = detail::finish(tape, "matmul_nt", Shape{R, C}, std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("matmul_nt", [&tape, a, b, out, R, K, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      if (a.requires_grad())
        detail::gemm_nn(g->data(), b.data(), tape.grad_buffer(a).data(), R, C, K, true);
      if (b.requires_grad())
        detail::gemm_tn(g->data(), a.data(), tape.grad_buffer(b).data(), C, R, K, true);
    });
  }
  return out;
}

namespace detail {

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> binary_elementwise(Tape<S>& tape, const char* op, const Tensor<S>& a, const Tensor<S>& b,
                             FwdFn fwd, BwdFn bwd) {
  require_same_shape(op, a, b);
  std::vector<S> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(a[i], b[i]);
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<S> out = finish(tape, op, a.shape(), std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record(op, [&tape, a, b, out, bwd] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* ga = a.requires_grad() ? &tape.grad_buffer(a) : nullptr;
      std::vector<S>* gb = b.requires_grad() ? &tape.grad_buffer(b) : nullptr;
      for (std::size_t i = 0; i < g->size(); ++i) bwd(i, (*g)[i], a, b, ga, gb);
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      tape, "add", a, b, [](S x, S y) { return x + y; },
      [](std::size_t i, S g, const Tensor<S>&, const Tensor<S>&, std::vector<S>* ga,
         std::vector<S>* gb) {
        if (ga) (*ga)[i] += g;
        if (gb) (*gb)[i] += g;
      });
}

template <typename S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      tape, "sub", a, b, [](S x, S y) { return x - y; },
      [](std::size_t i, S g, const Tensor<S>&, const Tensor<S>&, std::vector<S>* ga,
         std::vector<S>* gb) {
        if (ga) (*ga)[i] += g;
        if (gb) (*gb)[i] -= g;
      });
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      tape, "mul", a, b, [](S x, S y) { return x * y; },
      [](std::size_t i, S g, const Tensor<S>& a, const Tensor<S>& b, std::vector<S>* ga,
         std::vector<S>* gb) {
        if (ga) (*ga)[i] += g * b[i];
        if (gb) (*gb)[i] += g * a[i];
      });
}

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& x, S c) {
  std::vector<S> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * c;
  Tensor<S> out = detail::finish(tape, "scale", x.shape(), std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("scale", [&tape, x, out, c] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * c;
    });
  }
  return out;
}

/// Adds a length-C vector to every row of an {R,C} tensor.
template <typename S>
Tensor<S> add_rowvec(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& v) {
  if (x.cols() != v.numel())
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  std::size_t R = x.rows(), C = x.cols();
  std::vector<S> out_v(x.numel());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < C; ++j) out_v[r * C + j] = x[r * C + j] + v[j];
  bool rg = x.requires_grad() || v.requires_grad();
  Tensor<S> out = detail::finish(tape, "add_rowvec", x.shape(), std::move(out_v), rg);
  if (tape.recording() && rg) {
    tape.record("add_rowvec", [&tape, x, v, out, R, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      if (x.requires_grad()) {
        auto& gx = tape.grad_buffer(x);
        for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i];
      }
      if (v.requires_grad()) {
        auto& gv = tape.grad_buffer(v);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t j = 0; j < C; ++j) gv[j] += (*g)[r * C + j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> gelu(Tape<S>& tape, const Tensor<S>& x) {
  std::vector<S> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::gelu_fwd(x[i]);
  Tensor<S> out = detail::finish(tape, "gelu", x.shape(), std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("gelu", [&tape, x, out] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * detail::gelu_grad(x[i]);
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x) {
  std::vector<S> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] > S(0) ? x[i] : S(0);
  Tensor<S> out = detail::finish(tape, "relu", x.shape(), std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("relu", [&tape, x, out] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > S(0)) gx[i] += (*g)[i];
    });
  }
  return out;
}

/// Row-wise softmax over the last dimension, stabilized by max subtraction.
template <typename S>
Tensor<S> softmax_lastdim(Tape<S>& tape, const Tensor<S>& x) {
  std::size_t C = x.cols(), R = x.numel() / std::max<std::size_t>(C, 1);
  if (C < 1) throw ContractError("softmax_lastdim: empty last dimension");
  std::vector<S> v(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    const S* row = x.data() + r * C;
    S* orow = v.data() + r * C;
    S mx = row[0];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < C; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < C; ++j) orow[j] /= sum;
  }
  Tensor<S> out = detail::finish(tape, "softmax", x.shape(), std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("softmax", [&tape, x, out, R, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t r = 0; r < R; ++r) {
        const S* y = out.data() + r * C;
        const S* gr = g->data() + r * C;
        S dot = S(0);
        for (std::size_t j = 0; j < C; ++j) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < C; ++j) gx[r * C + j] += y[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

/// Layer normalization over the last dimension with a learnable gain and no
/// shift (the query/key normalization form).
template <typename S>
Tensor<S> layer_norm_gain(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gain) {
  std::size_t C = x.cols(), R = x.numel() / std::max<std::size_t>(C, 1);
  if (gain.numel() != C)
    throw DimensionError("layer_norm_gain: gain length " + std::to_string(gain.numel()) +
                         " vs cols " + std::to_string(C));
  const S eps = S(1e-5);
  std::vector<S> v(x.numel());
  std::vector<S> xhat(x.numel());
  std::vector<S> inv_std(R);
  for (std::size_t r = 0; r < R; ++r) {
    const S* row = x.data() + r * C;
    S mean = S(0);
    for (std::size_t j = 0; j < C; ++j) mean += row[j];
    mean /= S(C);
    S var = S(0);
    for (std::size_t j = 0; j < C; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(C);
    S inv = S(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < C; ++j) {
      xhat[r * C + j] = (row[j] - mean) * inv;
      v[r * C + j] = xhat[r * C + j] * gain[j];
    }
  }
  bool rg = x.requires_grad() || gain.requires_grad();
  Tensor<S> out = detail::finish(tape, "layer_norm", x.shape(), std::move(v), rg);
  if (tape.recording() && rg) {
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    auto is = std::make_shared<std::vector<S>>(std::move(inv_std));
    tape.record("layer_norm", [&tape, x, gain, out, xh, is, R, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* gx = x.requires_grad() ? &tape.grad_buffer(x) : nullptr;
      std::vector<S>* gg = gain.requires_grad() ? &tape.grad_buffer(gain) : nullptr;
      for (std::size_t r = 0; r < R; ++r) {
        const S* gr = g->data() + r * C;
        const S* xr = xh->data() + r * C;
        if (gg)
          for (std::size_t j = 0; j < C; ++j) (*gg)[j] += gr[j] * xr[j];
        if (gx) {
          S mean_gxh = S(0), mean_gxh_xh = S(0);
          for (std::size_t j = 0; j < C; ++j) {
            S gxh = gr[j] * gain[j];
            mean_gxh += gxh;
            mean_gxh_xh += gxh * xr[j];
          }
          mean_gxh /= S(C);
          mean_gxh_xh /= S(C);
          for (std::size_t j = 0; j < C; ++j) {
            S gxh = gr[j] * gain[j];
            (*gx)[r * C + j] += (*is)[r] * (gxh - mean_gxh - xr[j] * mean_gxh_xh);
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_lastdim(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows())
    throw DimensionError("concat_lastdim: row mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::size_t R = a.rows(), Ca = a.cols(), Cb = b.cols();
  std::vector<S> v(R * (Ca + Cb));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < Ca; ++j) v[r * (Ca + Cb) + j] = a[r * Ca + j];
    for (std::size_t j = 0; j < Cb; ++j) v[r * (Ca + Cb) + Ca + j] = b[r * Cb + j];
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor<S> out = detail::finish(tape, "concat", Shape{R, Ca + Cb}, std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("concat", [&tape, a, b, out, R, Ca, Cb] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = tape.grad_buffer(a);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t j = 0; j < Ca; ++j) ga[r * Ca + j] += (*g)[r * (Ca + Cb) + j];
      }
      if (b.requires_grad()) {
        auto& gb = tape.grad_buffer(b);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t j = 0; j < Cb; ++j) gb[r * Cb + j] += (*g)[r * (Ca + Cb) + Ca + j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(Tape<S>& tape, const Tensor<S>& x) {
  S acc = S(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor<S> out = detail::finish(tape, "sum", Shape{1}, std::vector<S>{acc}, x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("sum", [&tape, x, out] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(Tape<S>& tape, const Tensor<S>& x) {
  return scale(tape, sum_all(tape, x), S(1) / S(x.numel()));
}

/// Column sums of an {R,C} tensor, producing a length-C vector.
template <typename S>
Tensor<S> colwise_sum(Tape<S>& tape, const Tensor<S>& x) {
  std::size_t R = x.rows(), C = x.cols();
  std::vector<S> v(C, S(0));
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < C; ++j) v[j] += x[r * C + j];
  Tensor<S> out = detail::finish(tape, "colwise_sum", Shape{C}, std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("colwise_sum", [&tape, x, out, R, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < C; ++j) gx[r * C + j] += (*g)[j];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sqrt_elem(Tape<S>& tape, const Tensor<S>& x) {
  std::vector<S> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(x[i]);
  Tensor<S> out = detail::finish(tape, "sqrt", x.shape(), std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("sqrt", [&tape, x, out] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t i = 0; i < g->size(); ++i) {
        S y = out[i];
        if (y > S(0)) gx[i] += (*g)[i] * S(0.5) / y;  // subgradient 0 at the origin
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexed primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> gather_rows(Tape<S>& tape, const Tensor<S>& x, const std::vector<std::uint32_t>& idx) {
  std::size_t N = x.rows(), C = x.cols();
  for (auto i : idx)
    if (i >= N) throw IndexError("gather_rows: index " + std::to_string(i) + " out of range");
  std::vector<S> v(idx.size() * C);
  for (std::size_t m = 0; m < idx.size(); ++m)
    std::copy_n(x.data() + idx[m] * C, C, v.data() + m * C);
  auto ids = std::make_shared<std::vector<std::uint32_t>>(idx);
  Tensor<S> out =
      detail::finish(tape, "gather", Shape{idx.size(), C}, std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("gather", [&tape, x, out, ids, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t m = 0; m < ids->size(); ++m)
        for (std::size_t j = 0; j < C; ++j) gx[(*ids)[m] * C + j] += (*g)[m * C + j];
    });
  }
  return out;
}

/// Exact adjoint of gather_rows: rows of g are summed into their target rows.
template <typename S>
Tensor<S> scatter_add_rows(Tape<S>& tape, const Tensor<S>& g, const std::vector<std::uint32_t>& idx,
                           std::size_t n) {
  std::size_t C = g.cols();
  if (g.rows() != idx.size())
    throw DimensionError("scatter_add_rows: rows " + std::to_string(g.rows()) + " vs " +
                         std::to_string(idx.size()) + " indices");
  for (auto i : idx)
    if (i >= n) throw IndexError("scatter_add_rows: index " + std::to_string(i) + " out of range");
  std::vector<S> v(n * C, S(0));
  for (std::size_t m = 0; m < idx.size(); ++m)
    for (std::size_t j = 0; j < C; ++j) v[idx[m] * C + j] += g[m * C + j];
  auto ids = std::make_shared<std::vector<std::uint32_t>>(idx);
  Tensor<S> out = detail::finish(tape, "scatter_add", Shape{n, C}, std::move(v), g.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("scatter_add", [&tape, g, out, ids, C] {
      auto* go = tape.find_grad(out.id());
      if (!go) return;
      auto& gg = tape.grad_buffer(g);
      for (std::size_t m = 0; m < ids->size(); ++m)
        for (std::size_t j = 0; j < C; ++j) gg[m * C + j] += (*go)[(*ids)[m] * C + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point-pair primitives for continuous convolution
// ---------------------------------------------------------------------------

namespace detail {

/// Shortest signed displacement a-b on a unit ring, in [-0.5, 0.5).
template <typename S>
S wrap_delta(S d) {
  if (d >= S(0.5)) return d - S(1);
  if (d < S(-0.5)) return d + S(1);
  return d;
}

}  // namespace detail

/// Translation vectors a_j - alpha_m for every (query, input) pair, wrapped on
/// periodic dimensions. The wrap choice is piecewise constant; gradients pass
/// straight through to both position tensors.
template <typename S>
Tensor<S> pair_translations(Tape<S>& tape, const Tensor<S>& query_pos, const Tensor<S>& input_pos,
                            const PairIndexPtr& pairs, const std::vector<bool>& periodic) {
  std::size_t D = query_pos.cols();
  if (input_pos.cols() != D || periodic.size() != D)
    throw DimensionError("pair_translations: dimension mismatch");
  std::size_t P = pairs->pair_count();
  std::vector<S> v(P * D);
  for (std::size_t p = 0; p < P; ++p) {
    const S* q = query_pos.data() + pairs->query_of[p] * D;
    const S* a = input_pos.data() + pairs->input_of[p] * D;
    for (std::size_t d = 0; d < D; ++d) {
      S t = q[d] - a[d];
      v[p * D + d] = periodic[d] ? detail::wrap_delta(t) : t;
    }
  }
  bool rg = query_pos.requires_grad() || input_pos.requires_grad();
  Tensor<S> out = detail::finish(tape, "pair_translations", Shape{P, D}, std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("pair_translations", [&tape, query_pos, input_pos, out, pairs, D] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* gq = query_pos.requires_grad() ? &tape.grad_buffer(query_pos) : nullptr;
      std::vector<S>* ga = input_pos.requires_grad() ? &tape.grad_buffer(input_pos) : nullptr;
      for (std::size_t p = 0; p < pairs->pair_count(); ++p)
        for (std::size_t d = 0; d < D; ++d) {
          S gv = (*g)[p * D + d];
          if (gq) (*gq)[pairs->query_of[p] * D + d] += gv;
          if (ga) (*ga)[pairs->input_of[p] * D + d] -= gv;
        }
    });
  }
  return out;
}

/// Squared Euclidean norm of each row.
template <typename S>
Tensor<S> rowwise_sqnorm(Tape<S>& tape, const Tensor<S>& x) {
  std::size_t R = x.rows(), D = x.cols();
  std::vector<S> v(R, S(0));
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t d = 0; d < D; ++d) v[r] += x[r * D + d] * x[r * D + d];
  Tensor<S> out = detail::finish(tape, "rowwise_sqnorm", Shape{R}, std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("rowwise_sqnorm", [&tape, x, out, R, D] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t d = 0; d < D; ++d) gx[r * D + d] += S(2) * x[r * D + d] * (*g)[r];
    });
  }
  return out;
}

namespace detail {

/// Distance-weight math shared by the fixed- and learnable-temperature forms.
/// Normalizes squared distances to [0,1] inside each segment and applies
/// softmax(-normalized / T). A segment whose min and max coincide (to relative
/// precision) gets uniform weights and no gradient.
template <typename S>
struct SegmentStats {
  S mn, mx;
  std::size_t argmn, argmx;
  bool degenerate;
};

template <typename S>
SegmentStats<S> segment_stats(const S* d, std::size_t lo, std::size_t hi) {
  SegmentStats<S> st{d[lo], d[lo], lo, lo, false};
  for (std::size_t p = lo + 1; p < hi; ++p) {
    if (d[p] < st.mn) { st.mn = d[p]; st.argmn = p; }
    if (d[p] > st.mx) { st.mx = d[p]; st.argmx = p; }
  }
  st.degenerate = (st.mx - st.mn) <= S(1e-12) * std::max(st.mx, S(1e-30));
  return st;
}

}  // namespace detail

/// Softmax distance weighting within each neighborhood: squared distances are
/// min-max normalized per segment and passed through softmax(-u/T).
template <typename S>
Tensor<S> segment_softmax_dist(Tape<S>& tape, const Tensor<S>& sqdist, const PairIndexPtr& pairs,
                               S temperature) {
  if (temperature <= S(0)) throw ContractError("segment_softmax_dist: temperature must be > 0");
  std::size_t P = sqdist.numel();
  if (P != pairs->pair_count()) throw DimensionError("segment_softmax_dist: pair count mismatch");
  std::vector<S> w(P);
  const S* d = sqdist.data();
  for (std::size_t j = 0; j < pairs->query_count(); ++j) {
    std::size_t lo = pairs->offsets[j], hi = pairs->offsets[j + 1];
    auto st = detail::segment_stats(d, lo, hi);
    if (st.degenerate) {
      S u = S(1) / S(hi - lo);
      for (std::size_t p = lo; p < hi; ++p) w[p] = u;
      continue;
    }
    S denom = temperature * (st.mx - st.mn);
    S sum = S(0);
    for (std::size_t p = lo; p < hi; ++p) {
      w[p] = std::exp(-(d[p] - st.mn) / denom);
      sum += w[p];
    }
    for (std::size_t p = lo; p < hi; ++p) w[p] /= sum;
  }
  Tensor<S> out =
      detail::finish(tape, "segment_softmax_dist", Shape{P}, std::move(w), sqdist.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record("segment_softmax_dist", [&tape, sqdist, out, pairs, temperature] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gd = tape.grad_buffer(sqdist);
      const S* d = sqdist.data();
      const S* w = out.data();
      for (std::size_t j = 0; j < pairs->query_count(); ++j) {
        std::size_t lo = pairs->offsets[j], hi = pairs->offsets[j + 1];
        auto st = detail::segment_stats(d, lo, hi);
        if (st.degenerate) continue;
        S denom = temperature * (st.mx - st.mn);
        S dot = S(0);
        for (std::size_t p = lo; p < hi; ++p) dot += (*g)[p] * w[p];
        // g_u from the softmax, then u = -(d - mn)/denom with mn/mx routed to
        // their arg elements.
        S gu_sum = S(0), gu_dot_dmn = S(0);
        for (std::size_t p = lo; p < hi; ++p) {
          S gu = w[p] * ((*g)[p] - dot);
          gd[p] += -gu / denom;
          gu_sum += gu;
          gu_dot_dmn += gu * (d[p] - st.mn);
        }
        S via = gu_dot_dmn / (denom * (st.mx - st.mn));
        gd[st.argmn] += gu_sum / denom - via;
        gd[st.argmx] += via;
      }
    });
  }
  return out;
}

/// Distance-only kernel: one softmax weighting per output column, each with
/// its own learnable temperature (clamped to a small positive floor).
template <typename S>
Tensor<S> segment_softmax_dist_multi(Tape<S>& tape, const Tensor<S>& sqdist,
                                     const PairIndexPtr& pairs, const Tensor<S>& temps) {
  std::size_t P = sqdist.numel(), C = temps.numel();
  if (P != pairs->pair_count())
    throw DimensionError("segment_softmax_dist_multi: pair count mismatch");
  const S t_floor = S(1e-4);
  std::vector<S> w(P * C);
  const S* d = sqdist.data();
  for (std::size_t j = 0; j < pairs->query_count(); ++j) {
    std::size_t lo = pairs->offsets[j], hi = pairs->offsets[j + 1];
    auto st = detail::segment_stats(d, lo, hi);
    for (std::size_t c = 0; c < C; ++c) {
      if (st.degenerate) {
        S u = S(1) / S(hi - lo);
        for (std::size_t p = lo; p < hi; ++p) w[p * C + c] = u;
        continue;
      }
      S T = std::max(temps[c], t_floor);
      S denom = T * (st.mx - st.mn);
      S sum = S(0);
      for (std::size_t p = lo; p < hi; ++p) {
        w[p * C + c] = std::exp(-(d[p] - st.mn) / denom);
        sum += w[p * C + c];
      }
      for (std::size_t p = lo; p < hi; ++p) w[p * C + c] /= sum;
    }
  }
  bool rg = sqdist.requires_grad() || temps.requires_grad();
  Tensor<S> out =
      detail::finish(tape, "segment_softmax_dist_multi", Shape{P, C}, std::move(w), rg);
  if (tape.recording() && rg) {
    tape.record("segment_softmax_dist_multi", [&tape, sqdist, temps, out, pairs, C, t_floor] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* gd = sqdist.requires_grad() ? &tape.grad_buffer(sqdist) : nullptr;
      std::vector<S>* gt = temps.requires_grad() ? &tape.grad_buffer(temps) : nullptr;
      const S* d = sqdist.data();
      const S* w = out.data();
      for (std::size_t j = 0; j < pairs->query_count(); ++j) {
        std::size_t lo = pairs->offsets[j], hi = pairs->offsets[j + 1];
        auto st = detail::segment_stats(d, lo, hi);
        if (st.degenerate) continue;
        for (std::size_t c = 0; c < C; ++c) {
          S T = std::max(temps[c], t_floor);
          bool clamped = temps[c] < t_floor;
          S denom = T * (st.mx - st.mn);
          S dot = S(0);
          for (std::size_t p = lo; p < hi; ++p) dot += (*g)[p * C + c] * w[p * C + c];
          S gu_sum = S(0), gu_dot_dmn = S(0);
          for (std::size_t p = lo; p < hi; ++p) {
            S gu = w[p * C + c] * ((*g)[p * C + c] - dot);
            if (gd) (*gd)[p] += -gu / denom;
            gu_sum += gu;
            gu_dot_dmn += gu * (d[p] - st.mn);
            if (gt && !clamped) {
              S u = -(d[p] - st.mn) / denom;
              (*gt)[c] += gu * (-u / T);
            }
          }
          if (gd) {
            S via = gu_dot_dmn / (denom * (st.mx - st.mn));
            (*gd)[st.argmn] += gu_sum / denom - via;
            (*gd)[st.argmx] += via;
          }
        }
      }
    });
  }
  return out;
}

/// Random Fourier features: [sin(2*pi*x*B); cos(2*pi*x*B)]. B is a fixed
/// buffer of shape {D,F}; the output has 2F columns.
template <typename S>
Tensor<S> rff_encode(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& b) {
  std::size_t R = x.rows(), D = x.cols(), F = b.cols();
  if (b.rows() != D)
    throw DimensionError("rff_encode: input dim " + std::to_string(D) + " vs B rows " +
                         std::to_string(b.rows()));
  const S two_pi = S(6.283185307179586);
  std::vector<S> phase(R * F, S(0));
  detail::gemm_nn(x.data(), b.data(), phase.data(), R, D, F, false);
  std::vector<S> v(R * 2 * F);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t f = 0; f < F; ++f) {
      S z = two_pi * phase[r * F + f];
      v[r * 2 * F + f] = std::sin(z);
      v[r * 2 * F + F + f] = std::cos(z);
    }
  Tensor<S> out = detail::finish(tape, "rff", Shape{R, 2 * F}, std::move(v), x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    auto ph = std::make_shared<std::vector<S>>(std::move(phase));
    tape.record("rff", [&tape, x, b, out, ph, R, D, F, two_pi] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gx = tape.grad_buffer(x);
      std::vector<S> gphase(R * F);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t f = 0; f < F; ++f) {
          S z = two_pi * (*ph)[r * F + f];
          gphase[r * F + f] =
              two_pi * ((*g)[r * 2 * F + f] * std::cos(z) - (*g)[r * 2 * F + F + f] * std::sin(z));
        }
      detail::gemm_nt(gphase.data(), b.data(), gx.data(), R, F, D, true);
    });
  }
  return out;
}

/// Per-query FiLM modulation: h[p,:] * gamma[q(p),:] + beta[q(p),:].
template <typename S>
Tensor<S> modulate(Tape<S>& tape, const Tensor<S>& h, const Tensor<S>& gamma,
                   const Tensor<S>& beta, const PairIndexPtr& pairs) {
  std::size_t P = h.rows(), H = h.cols();
  if (gamma.cols() != H || beta.cols() != H)
    throw DimensionError("modulate: hidden width mismatch");
  if (P != pairs->pair_count()) throw DimensionError("modulate: pair count mismatch");
  std::vector<S> v(P * H);
  for (std::size_t p = 0; p < P; ++p) {
    const S* gm = gamma.data() + pairs->query_of[p] * H;
    const S* bt = beta.data() + pairs->query_of[p] * H;
    for (std::size_t j = 0; j < H; ++j) v[p * H + j] = h[p * H + j] * gm[j] + bt[j];
  }
  bool rg = h.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor<S> out = detail::finish(tape, "modulate", h.shape(), std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("modulate", [&tape, h, gamma, beta, out, pairs, H] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* gh = h.requires_grad() ? &tape.grad_buffer(h) : nullptr;
      std::vector<S>* gg = gamma.requires_grad() ? &tape.grad_buffer(gamma) : nullptr;
      std::vector<S>* gb = beta.requires_grad() ? &tape.grad_buffer(beta) : nullptr;
      for (std::size_t p = 0; p < pairs->pair_count(); ++p) {
        std::size_t q = pairs->query_of[p];
        for (std::size_t j = 0; j < H; ++j) {
          S gv = (*g)[p * H + j];
          if (gh) (*gh)[p * H + j] += gv * gamma[q * H + j];
          if (gg) (*gg)[q * H + j] += gv * h[p * H + j];
          if (gb) (*gb)[q * H + j] += gv;
        }
      }
    });
  }
  return out;
}

/// Scales row p of x by w[p].
template <typename S>
Tensor<S> scale_rows(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w) {
  std::size_t R = x.rows(), C = x.cols();
  if (w.numel() != R) throw DimensionError("scale_rows: weight length mismatch");
  std::vector<S> v(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < C; ++j) v[r * C + j] = x[r * C + j] * w[r];
  bool rg = x.requires_grad() || w.requires_grad();
  Tensor<S> out = detail::finish(tape, "scale_rows", x.shape(), std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("scale_rows", [&tape, x, w, out, R, C] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* gx = x.requires_grad() ? &tape.grad_buffer(x) : nullptr;
      std::vector<S>* gw = w.requires_grad() ? &tape.grad_buffer(w) : nullptr;
      for (std::size_t r = 0; r < R; ++r) {
        S acc = S(0);
        for (std::size_t j = 0; j < C; ++j) {
          S gv = (*g)[r * C + j];
          if (gx) (*gx)[r * C + j] += gv * w[r];
          acc += gv * x[r * C + j];
        }
        if (gw) (*gw)[r] += acc;
      }
    });
  }
  return out;
}

/// The ragged convolution contraction: for each query j,
///   out[j,o] = sum_{p in seg(j)} sum_i f[input_of[p], i] * k[p, i*No + o].
template <typename S>
Tensor<S> conv_contract(Tape<S>& tape, const Tensor<S>& f, const Tensor<S>& k,
                        const PairIndexPtr& pairs, std::size_t n_out) {
  std::size_t Ni = f.cols(), P = pairs->pair_count(), K = pairs->query_count();
  if (k.rows() != P || k.cols() != Ni * n_out)
    throw DimensionError("conv_contract: kernel shape " + shape_str(k.shape()) + " vs " +
                         std::to_string(P) + "x" + std::to_string(Ni * n_out));
  std::vector<S> v(K * n_out, S(0));
  for (std::size_t j = 0; j < K; ++j) {
    S* orow = v.data() + j * n_out;
    for (std::size_t p = pairs->offsets[j]; p < pairs->offsets[j + 1]; ++p) {
      const S* frow = f.data() + pairs->input_of[p] * Ni;
      const S* krow = k.data() + p * Ni * n_out;
      for (std::size_t i = 0; i < Ni; ++i) {
        S fv = frow[i];
        const S* kio = krow + i * n_out;
        for (std::size_t o = 0; o < n_out; ++o) orow[o] += fv * kio[o];
      }
    }
  }
  bool rg = f.requires_grad() || k.requires_grad();
  Tensor<S> out = detail::finish(tape, "conv_contract", Shape{K, n_out}, std::move(v), rg);
  if (tape.recording() && rg) {
    tape.record("conv_contract", [&tape, f, k, out, pairs, Ni, n_out] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      std::vector<S>* gf = f.requires_grad() ? &tape.grad_buffer(f) : nullptr;
      std::vector<S>* gk = k.requires_grad() ? &tape.grad_buffer(k) : nullptr;
      for (std::size_t j = 0; j < pairs->query_count(); ++j) {
        const S* grow = g->data() + j * n_out;
        for (std::size_t p = pairs->offsets[j]; p < pairs->offsets[j + 1]; ++p) {
          std::size_t n = pairs->input_of[p];
          const S* frow = f.data() + n * Ni;
          const S* krow = k.data() + p * Ni * n_out;
          for (std::size_t i = 0; i < Ni; ++i) {
            const S* kio = krow + i * n_out;
            S acc = S(0);
            for (std::size_t o = 0; o < n_out; ++o) {
              acc += grow[o] * kio[o];
              if (gk) (*gk)[p * Ni * n_out + i * n_out + o] += frow[i] * grow[o];
            }
            if (gf) (*gf)[n * Ni + i] += acc;
          }
        }
      }
    });
  }
  return out;
}

/// Pairwise periodic-aware Euclidean distances of a position set with itself.
/// Diagonal entries are exactly zero and carry no gradient.
template <typename S>
Tensor<S> distance_matrix_op(Tape<S>& tape, const Tensor<S>& pos, const std::vector<bool>& periodic) {
  std::size_t n = pos.rows(), D = pos.cols();
  if (periodic.size() != D) throw DimensionError("distance_matrix_op: periodic flag count");
  std::vector<S> v(n * n, S(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      S acc = S(0);
      for (std::size_t d = 0; d < D; ++d) {
        S t = pos[i * D + d] - pos[j * D + d];
        if (periodic[d]) t = detail::wrap_delta(t);
        acc += t * t;
      }
      S dist = std::sqrt(acc);
      v[i * n + j] = dist;
      v[j * n + i] = dist;
    }
  Tensor<S> out =
      detail::finish(tape, "distance_matrix", Shape{n, n}, std::move(v), pos.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    auto per = std::make_shared<std::vector<bool>>(periodic);
    tape.record("distance_matrix", [&tape, pos, out, per, n, D] {
      auto* g = tape.find_grad(out.id());
      if (!g) return;
      auto& gp = tape.grad_buffer(pos);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j) continue;
          S dist = out[i * n + j];
          if (dist <= S(1e-30)) continue;
          S gv = (*g)[i * n + j] / dist;
          for (std::size_t d = 0; d < D; ++d) {
            S t = pos[i * D + d] - pos[j * D + d];
            if ((*per)[d]) t = detail::wrap_delta(t);
            gp[i * D + d] += gv * t;
            gp[j * D + d] -= gv * t;
          }
        }
    });
  }
  return out;
}

}  // namespace calm
