#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "calm/geometry.hpp"
#include "calm/rng.hpp"

using calm::PointSet;
using calm::Tensor;

namespace {

PointSet<double> points_1d(std::vector<double> xs, bool periodic) {
  std::size_t n = xs.size();
  return PointSet<double>(Tensor<double>({n, 1}, std::move(xs)), {periodic});
}

PointSet<double> random_points(calm::Rng& rng, std::size_t n, std::size_t d, std::vector<bool> per) {
  return PointSet<double>(Tensor<double>({n, d}, calm::uniform_vec<double>(rng, n * d, 0.0, 1.0)),
                          std::move(per));
}

// Enumerates integer shifts in {-1, 0, 1} and keeps the smallest magnitude.
double min_shift_oracle(double a, double b) {
  double best = a - b;
  for (int s : {-1, 1}) {
    double cand = a - b + s;
    if (std::fabs(cand) < std::fabs(best)) best = cand;
  }
  return best;
}

}  // namespace

TEST_CASE("translation wraps on periodic dimensions") {
  std::vector<bool> periodic{true};
  std::vector<bool> open{false};
  double a = 0.5, b = 0.5;
  REQUIRE(calm::translation(&a, &b, periodic)[0] == 0.0);

  a = 0.9;
  b = 0.1;
  REQUIRE(calm::translation(&a, &b, periodic)[0] == Catch::Approx(-0.2).margin(1e-15));
  REQUIRE(calm::translation(&a, &b, periodic)[0] ==
          Catch::Approx(min_shift_oracle(a, b)).margin(1e-15));
  REQUIRE(calm::translation(&a, &b, open)[0] == Catch::Approx(0.8).margin(1e-15));
}

TEST_CASE("translation matches shift enumeration on random pairs") {
  calm::Rng rng = calm::make_rng(2);
  std::vector<bool> periodic{true};
  for (int i = 0; i < 200; ++i) {
    double a = calm::uniform(rng, 0.0, 1.0);
    double b = calm::uniform(rng, 0.0, 1.0);
    REQUIRE(calm::translation(&a, &b, periodic)[0] ==
            Catch::Approx(min_shift_oracle(a, b)).margin(1e-15));
  }
}

TEST_CASE("epsilon_for uses the nearest-rank percentile") {
  // Query at 0.5 on an open domain, inputs at distances {0.1, 0.2, 0.3, 0.4}.
  auto inputs = points_1d({0.6, 0.3, 0.8, 0.9}, false);
  double q = 0.5;

  std::vector<double> dists{0.1, 0.2, 0.3, 0.4};
  auto nearest_rank = [&](double p) {
    std::vector<double> s = dists;
    std::sort(s.begin(), s.end());
    std::size_t k = static_cast<std::size_t>(std::ceil(p * s.size()));
    return s[k - 1];
  };

  REQUIRE(calm::epsilon_for(&q, inputs, 0.5) == Catch::Approx(nearest_rank(0.5)).margin(1e-15));
  REQUIRE(calm::epsilon_for(&q, inputs, 0.5) == Catch::Approx(0.2).margin(1e-15));
  REQUIRE(calm::epsilon_for(&q, inputs, 1.0) == Catch::Approx(0.4).margin(1e-15));

  auto single = points_1d({0.9}, false);
  for (double p : {0.01, 0.4, 1.0})
    REQUIRE(calm::epsilon_for(&q, single, p) == Catch::Approx(0.4).margin(1e-15));
}

TEST_CASE("epsilon_for is permutation invariant") {
  calm::Rng rng = calm::make_rng(9);
  auto pts = random_points(rng, 12, 2, {true, false});
  std::vector<double> q{0.3, 0.7};

  std::vector<std::size_t> perm(12);
  for (std::size_t i = 0; i < 12; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> shuffled(24);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t d = 0; d < 2; ++d) shuffled[i * 2 + d] = pts.positions[perm[i] * 2 + d];
  PointSet<double> pts2(Tensor<double>({12, 2}, shuffled), {true, false});

  for (double p : {0.1, 0.35, 0.8, 1.0})
    REQUIRE(calm::epsilon_for(q.data(), pts, p) == calm::epsilon_for(q.data(), pts2, p));
}

TEST_CASE("build_neighborhood covers the spec cases") {
  auto inputs = points_1d({0.1, 0.2, 0.3, 0.4}, false);

  SECTION("queries equal to inputs include themselves") {
    auto nb = calm::build_neighborhood(inputs, inputs, 0.25);
    for (std::size_t j = 0; j < 4; ++j) {
      bool self = false;
      for (std::size_t p = nb.pairs->offsets[j]; p < nb.pairs->offsets[j + 1]; ++p)
        if (nb.pairs->input_of[p] == j) self = true;
      REQUIRE(self);
    }
  }

  SECTION("collinear case selects the nearest by exhaustive sort") {
    auto query = points_1d({0.1}, false);
    auto nb = calm::build_neighborhood(query, inputs, 0.5);
    // distances from 0.1: {0, 0.1, 0.2, 0.3}; k = 2 -> epsilon 0.1.
    REQUIRE(nb.pairs->pair_count() == 2);
    REQUIRE(nb.pairs->input_of[0] == 0);
    REQUIRE(nb.pairs->input_of[1] == 1);
    REQUIRE(nb.epsilons[0] == Catch::Approx(0.1).margin(1e-15));
  }

  SECTION("p = 1 keeps every input for every query") {
    auto queries = points_1d({0.15, 0.85}, false);
    auto nb = calm::build_neighborhood(queries, inputs, 1.0);
    REQUIRE(nb.pairs->pair_count() == 8);
  }
}

TEST_CASE("neighborhood size is monotone in p and meets the percentile floor") {
  calm::Rng rng = calm::make_rng(12);
  auto inputs = random_points(rng, 40, 2, {true, true});
  auto queries = random_points(rng, 7, 2, {true, true});
  std::size_t prev = 0;
  for (double p : {0.05, 0.1, 0.2, 0.5, 0.75, 1.0}) {
    auto nb = calm::build_neighborhood(queries, inputs, p);
    std::size_t floor_k = static_cast<std::size_t>(std::ceil(p * 40));
    for (std::size_t j = 0; j < 7; ++j) {
      std::size_t sz = nb.pairs->offsets[j + 1] - nb.pairs->offsets[j];
      REQUIRE(sz >= std::max<std::size_t>(floor_k, 1));
      for (std::size_t q = nb.pairs->offsets[j]; q < nb.pairs->offsets[j + 1]; ++q)
        REQUIRE(nb.distances[q] <= nb.epsilons[j]);
    }
    REQUIRE(nb.pairs->pair_count() >= prev);
    prev = nb.pairs->pair_count();
  }
}

TEST_CASE("distance matrix diagonal, symmetry and per-pair oracle") {
  calm::Rng rng = calm::make_rng(21);
  auto pts = random_points(rng, 3, 2, {false, false});
  auto d = calm::distance_matrix(pts, pts);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(d[i * 3 + i] == 0.0);
    for (std::size_t j = 0; j < 3; ++j) {
      REQUIRE(d[i * 3 + j] == d[j * 3 + i]);
      double dx = pts.positions[i * 2] - pts.positions[j * 2];
      double dy = pts.positions[i * 2 + 1] - pts.positions[j * 2 + 1];
      REQUIRE(d[i * 3 + j] == std::sqrt(dx * dx + dy * dy));
    }
  }
}

TEST_CASE("constant shift on a fully periodic domain changes nothing") {
  calm::Rng rng = calm::make_rng(33);
  std::vector<bool> per{true, true};
  auto inputs = random_points(rng, 24, 2, per);
  auto queries = random_points(rng, 6, 2, per);

  auto shift = [&](const PointSet<double>& ps, double cx, double cy) {
    std::vector<double> v(ps.positions.values());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      v[i * 2] = std::fmod(v[i * 2] + cx, 1.0);
      v[i * 2 + 1] = std::fmod(v[i * 2 + 1] + cy, 1.0);
    }
    return PointSet<double>(Tensor<double>({ps.size(), 2}, v), per);
  };

  auto inputs2 = shift(inputs, 0.37, 0.61);
  auto queries2 = shift(queries, 0.37, 0.61);

  auto nb1 = calm::build_neighborhood(queries, inputs, 0.3);
  auto nb2 = calm::build_neighborhood(queries2, inputs2, 0.3);
  REQUIRE(nb1.pairs->input_of == nb2.pairs->input_of);
  REQUIRE(nb1.pairs->offsets == nb2.pairs->offsets);
  for (std::size_t p = 0; p < nb1.distances.size(); ++p)
    REQUIRE(nb1.distances[p] == Catch::Approx(nb2.distances[p]).margin(1e-12));

  for (std::size_t j = 0; j < queries.size(); ++j)
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto t1 = calm::translation(queries.positions.data() + j * 2,
                                  inputs.positions.data() + i * 2, per);
      auto t2 = calm::translation(queries2.positions.data() + j * 2,
                                  inputs2.positions.data() + i * 2, per);
      for (int d = 0; d < 2; ++d) REQUIRE(t1[d] == Catch::Approx(t2[d]).margin(1e-12));
    }
}

TEST_CASE("wrap_into_domain wraps periodic axes and clamps open ones") {
  auto out = calm::wrap_into_domain<double>({1.2, -0.3, 0.5, 1.7}, 2, {true, false});
  REQUIRE(out[0] == Catch::Approx(0.2).margin(1e-12));
  REQUIRE(out[1] == 0.0);
  REQUIRE(out[2] == 0.5);
  REQUIRE(out[3] == Catch::Approx(1.0 - 1e-6).margin(1e-12));
  // wrapped results always satisfy the PointSet invariant
  for (double v : calm::wrap_into_domain<double>({0.999999999999999999, -1e-18}, 1, {true}))
    REQUIRE((v >= 0.0 && v < 1.0));
}

TEST_CASE("PointSet validates coordinates") {
  REQUIRE_THROWS_AS(PointSet<double>(Tensor<double>({1, 1}, {1.0}), {false}), calm::ContractError);
  REQUIRE_THROWS_AS(PointSet<double>(Tensor<double>({1, 1}, {-0.1}), {true}), calm::ContractError);
  REQUIRE_THROWS_AS(PointSet<double>(Tensor<double>({1, 2}, {0.1, 0.2}), {true}),
                    calm::DimensionError);
}
