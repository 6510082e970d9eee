#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "calm/error.hpp"
#include "calm/ops.hpp"
#include "calm/tensor.hpp"

namespace calm {

/// Sampled spatial points in the normalized domain [0,1)^D with per-dimension
/// periodicity flags. Positions are held as a tensor so learnable query sets
/// can flow gradients; construction enforces the coordinate range.
template <typename S>
struct PointSet {
  Tensor<S> positions;  // N x D
  std::vector<bool> periodic;

  PointSet(Tensor<S> pos, std::vector<bool> per) : positions(std::move(pos)), periodic(std::move(per)) {
    if (positions.rank() != 2 || positions.rows() < 1)
      throw DimensionError("PointSet: positions must be a non-empty N x D matrix");
    if (periodic.size() != positions.cols())
      throw DimensionError("PointSet: periodic flag count does not match dimension");
    for (std::size_t i = 0; i < positions.numel(); ++i)
      if (!(positions[i] >= S(0) && positions[i] < S(1)))
        throw ContractError("PointSet: coordinate outside [0,1)");
  }

  /// Internal threading of already-validated (or deliberately perturbed,
  /// e.g. finite-difference) positions; skips the range check.
  static PointSet unchecked(Tensor<S> pos, std::vector<bool> per) {
    PointSet ps;
    ps.positions = std::move(pos);
    ps.periodic = std::move(per);
    return ps;
  }

  std::size_t size() const { return positions.rows(); }
  std::size_t dim() const { return positions.cols(); }

 private:
  PointSet() = default;
};

/// Per-dimension displacement a - b, wrapped to [-0.5, 0.5) on periodic axes.
template <typename S>
std::vector<S> translation(const S* a, const S* b, const std::vector<bool>& periodic) {
  std::vector<S> t(periodic.size());
  for (std::size_t d = 0; d < periodic.size(); ++d) {
    S v = a[d] - b[d];
    t[d] = periodic[d] ? detail::wrap_delta(v) : v;
  }
  return t;
}

template <typename S>
S distance(const S* a, const S* b, const std::vector<bool>& periodic) {
  S acc = S(0);
  for (std::size_t d = 0; d < periodic.size(); ++d) {
    S v = a[d] - b[d];
    if (periodic[d]) v = detail::wrap_delta(v);
    acc += v * v;
  }
  return std::sqrt(acc);
}

/// Receptive fields of a query set over an input set: per-query neighbor
/// indices (grouped behind a shared PairIndex), their distances, and the
/// per-query epsilon. Rebuilt whenever positions move; reusable while frozen.
template <typename S>
struct Neighborhood {
  PairIndexPtr pairs;
  std::vector<S> distances;  // per pair, Euclidean
  std::vector<S> epsilons;   // per query
};

/// Nearest-rank percentile of the distances from `query` to every input
/// point: the k-th smallest with k = ceil(p*N).
template <typename S>
S epsilon_for(const S* query, const PointSet<S>& inputs, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ContractError("epsilon_for: need 0 < p <= 1");
  std::size_t n = inputs.size();
  std::vector<S> dists(n);
  for (std::size_t i = 0; i < n; ++i)
    dists[i] = distance(query, inputs.positions.data() + i * inputs.dim(), inputs.periodic);
  std::size_t k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
  k = std::min(std::max<std::size_t>(k, 1), n);
  std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
  return dists[k - 1];
}

/// All input points within the percentile epsilon of each query; ties at the
/// epsilon are included, so every list has at least ceil(p*N) members.
template <typename S>
Neighborhood<S> build_neighborhood(const PointSet<S>& queries, const PointSet<S>& inputs, double p) {
  if (queries.dim() != inputs.dim())
    throw DimensionError("build_neighborhood: dimension mismatch");
  if (!(p > 0.0 && p <= 1.0)) throw ContractError("build_neighborhood: need 0 < p <= 1");
  std::size_t K = queries.size(), N = inputs.size(), D = inputs.dim();
  std::size_t k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(N)));
  k = std::min(std::max<std::size_t>(k, 1), N);

  auto pairs = std::make_shared<PairIndex>();
  pairs->offsets.resize(K + 1);
  Neighborhood<S> nb;
  nb.epsilons.resize(K);

  std::vector<S> dists(N);
  std::vector<S> scratch(N);
  for (std::size_t j = 0; j < K; ++j) {
    const S* q = queries.positions.data() + j * D;
    for (std::size_t i = 0; i < N; ++i)
      dists[i] = distance(q, inputs.positions.data() + i * D, inputs.periodic);
    scratch = dists;
    std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end());
    S eps = scratch[k - 1];
    nb.epsilons[j] = eps;
    pairs->offsets[j] = static_cast<std::uint32_t>(pairs->query_of.size());
    for (std::size_t i = 0; i < N; ++i) {
      if (dists[i] <= eps) {
        pairs->query_of.push_back(static_cast<std::uint32_t>(j));
        pairs->input_of.push_back(static_cast<std::uint32_t>(i));
        nb.distances.push_back(dists[i]);
      }
    }
  }
  pairs->offsets[K] = static_cast<std::uint32_t>(pairs->query_of.size());
  nb.pairs = std::move(pairs);
  return nb;
}

/// Plain (non-tape) pairwise distance matrix between two point sets.
template <typename S>
std::vector<S> distance_matrix(const PointSet<S>& a, const PointSet<S>& b) {
  if (a.dim() != b.dim()) throw DimensionError("distance_matrix: dimension mismatch");
  std::size_t n = a.size(), m = b.size(), D = a.dim();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] =
          distance(a.positions.data() + i * D, b.positions.data() + j * D, a.periodic);
  return out;
}

/// Brings drifted coordinates back into the domain: mod 1 on periodic axes,
/// clamp to [0, 1-1e-6] otherwise.
template <typename S>
std::vector<S> wrap_into_domain(std::vector<S> coords, std::size_t dim,
                                const std::vector<bool>& periodic) {
  for (std::size_t i = 0; i < coords.size(); ++i) {
    std::size_t d = i % dim;
    S v = coords[i];
    if (periodic[d]) {
      v = v - std::floor(v);
      if (v >= S(1)) v = S(0);  // guards v just below 1 rounding up
    } else {
      v = std::min(std::max(v, S(0)), S(1) - S(1e-6));
    }
    coords[i] = v;
  }
  return coords;
}

}  // namespace calm
