#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace calm {

/// Single RNG type used everywhere so a seed pins the whole run.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

/// Derives an independent stream (e.g. per layer) from a base seed.
inline Rng fork_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{seed, stream ^ std::uint64_t(0x9e3779b97f4a7c15ull)};
  return Rng(seq);
}

template <typename S>
S uniform(Rng& rng, S lo, S hi) {
  std::uniform_real_distribution<S> d(lo, hi);
  return d(rng);
}

template <typename S>
std::vector<S> uniform_vec(Rng& rng, std::size_t n, S lo, S hi) {
  std::uniform_real_distribution<S> d(lo, hi);
  std::vector<S> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

template <typename S>
std::vector<S> normal_vec(Rng& rng, std::size_t n, S mean = S(0), S stddev = S(1)) {
  std::normal_distribution<S> d(mean, stddev);
  std::vector<S> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

/// He/Kaiming uniform bound: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename S>
std::vector<S> kaiming_uniform_vec(Rng& rng, std::size_t n, std::size_t fan_in) {
  S bound = std::sqrt(S(6) / S(fan_in));
  return uniform_vec<S>(rng, n, -bound, bound);
}

/// Default linear-layer init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename S>
std::vector<S> linear_uniform_vec(Rng& rng, std::size_t n, std::size_t fan_in) {
  S bound = S(1) / std::sqrt(S(fan_in));
  return uniform_vec<S>(rng, n, -bound, bound);
}

}  // namespace calm
