#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "calm/error.hpp"
#include "calm/geometry.hpp"
#include "calm/rng.hpp"

namespace calm {

/// In-memory dataset: a shared mesh and S trajectories of shape T x N x C,
/// stored in the 32-bit precision of the file format. Coordinates live in
/// [0,1); generation happens in double and is cast on store.
struct Dataset {
  std::string pde;
  std::size_t dim = 1;
  std::size_t channels = 1;
  std::size_t timesteps = 0;
  std::size_t n_points = 0;
  double dt = 0.0;
  std::vector<bool> periodic;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  std::uint64_t seed = 0;
  std::string mesh_kind;
  std::map<std::string, double> gen_params;

  std::vector<float> mesh;                  // N * dim
  std::vector<std::vector<float>> samples;  // per sample: T * N * C

  std::size_t sample_count() const { return samples.size(); }
  std::size_t frame_size() const { return n_points * channels; }

  PointSet<float> mesh_points() const {
    return PointSet<float>(Tensor<float>({n_points, dim}, mesh), periodic);
  }

  /// One timestep of one sample as an N x C tensor.
  template <typename S>
  Tensor<S> frame(std::size_t sample, std::size_t t) const {
    const float* src = samples[sample].data() + t * frame_size();
    std::vector<S> v(src, src + frame_size());
    return Tensor<S>({n_points, channels}, std::move(v));
  }
};

/// Per-channel z-score statistics over the training split.
struct ChannelStats {
  std::vector<double> mean, stddev;
};

inline ChannelStats compute_stats(const Dataset& ds) {
  std::size_t c = ds.channels;
  ChannelStats st;
  st.mean.assign(c, 0.0);
  st.stddev.assign(c, 0.0);
  std::size_t count = 0;
  for (std::size_t s = 0; s < ds.train_count; ++s) {
    const auto& traj = ds.samples[s];
    for (std::size_t i = 0; i < traj.size(); ++i) st.mean[i % c] += traj[i];
    count += traj.size() / c;
  }
  for (auto& m : st.mean) m /= double(count);
  for (std::size_t s = 0; s < ds.train_count; ++s) {
    const auto& traj = ds.samples[s];
    for (std::size_t i = 0; i < traj.size(); ++i) {
      double d = traj[i] - st.mean[i % c];
      st.stddev[i % c] += d * d;
    }
  }
  for (auto& v : st.stddev) {
    v = std::sqrt(v / double(count));
    if (!(v > 0.0)) throw ContractError("compute_stats: channel with zero variance");
  }
  return st;
}

// ---------------------------------------------------------------------------
// Random smooth initial conditions
// ---------------------------------------------------------------------------

/// Truncated Fourier series on the unit interval with mode-damped amplitudes.
struct FourierSeries1D {
  std::vector<double> sin_coef, cos_coef;

  double eval(double x) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < sin_coef.size(); ++k) {
      double w = 2.0 * M_PI * double(k + 1) * x;
      acc += sin_coef[k] * std::sin(w) + cos_coef[k] * std::cos(w);
    }
    return acc;
  }
};

inline FourierSeries1D random_fourier_series(Rng& rng, std::size_t modes) {
  FourierSeries1D f;
  std::normal_distribution<double> d(0.0, 1.0);
  for (std::size_t k = 1; k <= modes; ++k) {
    f.sin_coef.push_back(d(rng) / double(k));
    f.cos_coef.push_back(d(rng) / double(k));
  }
  return f;
}

// ---------------------------------------------------------------------------
// 1D advection (exact solution)
// ---------------------------------------------------------------------------

/// u(t, x) = u0((x - c t) mod 1) on a periodic mesh; evaluation is analytic,
/// so the targets carry no solver error.
inline Dataset gen_advection_1d(std::size_t n_train, std::size_t n_test, std::size_t n,
                                std::size_t t_steps, double speed, double dt,
                                std::uint64_t seed) {
  if (n < 2 || t_steps < 2) throw ContractError("gen_advection_1d: need N, T >= 2");
  Dataset ds;
  ds.pde = "advection1d";
  ds.dim = 1;
  ds.channels = 1;
  ds.timesteps = t_steps;
  ds.n_points = n;
  ds.dt = dt;
  ds.periodic = {true};
  ds.train_count = n_train;
  ds.test_count = n_test;
  ds.seed = seed;
  ds.mesh_kind = "uniform";
  ds.gen_params["speed"] = speed;

  ds.mesh.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.mesh[i] = float(double(i) / double(n));

  Rng rng = make_rng(seed);
  for (std::size_t s = 0; s < n_train + n_test; ++s) {
    FourierSeries1D u0 = random_fourier_series(rng, 3);
    std::vector<float> traj(t_steps * n);
    for (std::size_t t = 0; t < t_steps; ++t) {
      double time = double(t) * dt;
      for (std::size_t i = 0; i < n; ++i) {
        double x = double(i) / double(n) - speed * time;
        x -= std::floor(x);
        traj[t * n + i] = float(u0.eval(x));
      }
    }
    ds.samples.push_back(std::move(traj));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// 1D Burgers (reference solver)
// ---------------------------------------------------------------------------

/// RK4 time integration of u_t = -(u^2/2)_x + (nu/pi) u_xx with central
/// differences in conservative flux form on a periodic grid. The internal
/// step obeys an advective and a diffusive stability bound; `refine`
/// multiplies the internal step count (for self-convergence checks).
inline std::vector<double> burgers_solve(const std::vector<double>& u0, double nu,
                                         std::size_t t_steps, double dt_out,
                                         std::size_t refine = 1,
                                         std::size_t max_internal_steps = 4000000) {
  std::size_t n = u0.size();
  double dx = 1.0 / double(n);
  double diff = nu / M_PI;
  double umax = 1e-3;
  for (double v : u0) umax = std::max(umax, std::fabs(v));
  // max|u| does not grow for Burgers, so the initial bound is safe
  double h_adv = dx / umax;
  double h_diff = diff > 0.0 ? 0.5 * dx * dx / diff : 1e9;
  double h = 0.3 * std::min(h_adv, h_diff);
  std::size_t per_out = std::max<std::size_t>(1, std::size_t(std::ceil(dt_out / h))) * refine;
  std::size_t total = per_out * (t_steps - 1);
  if (total > max_internal_steps)
    throw StabilityError(
        "burgers_solve: stability requires " + std::to_string(total) +
        " internal steps (limit " + std::to_string(max_internal_steps) +
        "); reduce the resolution N, the output horizon, or increase viscosity");
  double hs = dt_out / double(per_out);

  auto rhs = [&](const std::vector<double>& u, std::vector<double>& out) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t ip = (i + 1) % n, im = (i + n - 1) % n;
      double conv = (u[ip] * u[ip] - u[im] * u[im]) * 0.5 / (2.0 * dx);
      double lap = (u[ip] - 2.0 * u[i] + u[im]) / (dx * dx);
      out[i] = -conv + diff * lap;
    }
  };

  std::vector<double> out(t_steps * n);
  std::vector<double> u = u0, k1(n), k2(n), k3(n), k4(n), tmp(n);
  std::copy(u.begin(), u.end(), out.begin());
  for (std::size_t t = 1; t < t_steps; ++t) {
    for (std::size_t s = 0; s < per_out; ++s) {
      rhs(u, k1);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = u[i] + 0.5 * hs * k1[i];
      rhs(tmp, k2);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = u[i] + 0.5 * hs * k2[i];
      rhs(tmp, k3);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = u[i] + hs * k3[i];
      rhs(tmp, k4);
      for (std::size_t i = 0; i < n; ++i)
        u[i] += hs / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    std::copy(u.begin(), u.end(), out.begin() + t * n);
  }
  return out;
}

inline Dataset gen_burgers_1d(std::size_t n_train, std::size_t n_test, std::size_t n,
                              std::size_t t_steps, double nu, double dt, std::uint64_t seed) {
  if (n < 2 || t_steps < 2) throw ContractError("gen_burgers_1d: need N, T >= 2");
  Dataset ds;
  ds.pde = "burgers1d";
  ds.dim = 1;
  ds.channels = 1;
  ds.timesteps = t_steps;
  ds.n_points = n;
  ds.dt = dt;
  ds.periodic = {true};
  ds.train_count = n_train;
  ds.test_count = n_test;
  ds.seed = seed;
  ds.mesh_kind = "uniform";
  ds.gen_params["nu"] = nu;

  ds.mesh.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.mesh[i] = float(double(i) / double(n));

  Rng rng = make_rng(seed);
  for (std::size_t s = 0; s < n_train + n_test; ++s) {
    FourierSeries1D f = random_fourier_series(rng, 4);
    std::vector<double> u0(n);
    for (std::size_t i = 0; i < n; ++i) u0[i] = f.eval(double(i) / double(n));
    auto sol = burgers_solve(u0, nu, t_steps, dt);
    ds.samples.emplace_back(sol.begin(), sol.end());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// 2D solid-body rotation (exact solution, regular or irregular mesh)
// ---------------------------------------------------------------------------

/// Scalar field made of Gaussian bumps, advected by rigid rotation about a
/// fixed center: u(t, x) = u0(R(-omega t) (x - ctr) + ctr).
struct RotatingField {
  double cx = 0.5, cy = 0.5, omega = 1.0;
  std::vector<double> bump_x, bump_y, bump_amp, bump_sigma;

  double eval(double t, double x, double y) const {
    double ca = std::cos(-omega * t), sa = std::sin(-omega * t);
    double rx = cx + ca * (x - cx) - sa * (y - cy);
    double ry = cy + sa * (x - cx) + ca * (y - cy);
    double acc = 0.0;
    for (std::size_t b = 0; b < bump_x.size(); ++b) {
      double dx = rx - bump_x[b], dy = ry - bump_y[b];
      acc += bump_amp[b] * std::exp(-(dx * dx + dy * dy) / (2.0 * bump_sigma[b] * bump_sigma[b]));
    }
    return acc;
  }
};

inline RotatingField random_rotating_field(Rng& rng, double omega) {
  RotatingField f;
  f.omega = omega;
  std::size_t bumps = 3;
  for (std::size_t b = 0; b < bumps; ++b) {
    double r = uniform(rng, 0.04, 0.18);
    double a = uniform(rng, 0.0, 2.0 * M_PI);
    f.bump_x.push_back(f.cx + r * std::cos(a));
    f.bump_y.push_back(f.cy + r * std::sin(a));
    f.bump_amp.push_back(uniform(rng, 0.5, 1.5) * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0));
    // keep bumps a few mesh spacings wide at desk-scale point counts
    f.bump_sigma.push_back(uniform(rng, 0.05, 0.10));
  }
  return f;
}

/// Dart-throwing blue noise with a smaller rejection radius inside the
/// refinement disk, giving a denser sampling there.
inline std::vector<double> blue_noise_mesh(Rng& rng, std::size_t target, double disk_cx,
                                           double disk_cy, double disk_r, double radius_ratio) {
  // Dart throwing jams near 55% disk coverage; size the inner rejection
  // radius so roughly half the requested points land inside the disk, and
  // run the full attempt budget so both regions approach saturation (an
  // early stop would over-sample the easier outer region).
  double disk_area = M_PI * disk_r * disk_r;
  double r_in = 2.0 * std::sqrt(0.52 * disk_area / (M_PI * 0.5 * double(target)));
  double r_out = r_in * radius_ratio;

  std::vector<double> pts;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::size_t attempts = target * 120;
  for (std::size_t a = 0; a < attempts; ++a) {
    double x = u01(rng), y = u01(rng);
    double ddx = x - disk_cx, ddy = y - disk_cy;
    bool inside = ddx * ddx + ddy * ddy <= disk_r * disk_r;
    double r = inside ? r_in : r_out;
    bool ok = true;
    for (std::size_t i = 0; i < pts.size() / 2; ++i) {
      double px = pts[2 * i], py = pts[2 * i + 1];
      double pdx = px - disk_cx, pdy = py - disk_cy;
      bool p_inside = pdx * pdx + pdy * pdy <= disk_r * disk_r;
      double rr = std::min(r, p_inside ? r_in : r_out);
      double dx = x - px, dy = y - py;
      if (dx * dx + dy * dy < rr * rr) {
        ok = false;
        break;
      }
    }
    if (ok) {
      pts.push_back(x);
      pts.push_back(y);
    }
  }
  return pts;
}

inline Dataset gen_rotating_2d(std::size_t n_train, std::size_t n_test, std::size_t n_target,
                               std::size_t t_steps, double omega, double dt, std::uint64_t seed,
                               bool irregular) {
  Dataset ds;
  ds.pde = "rotating2d";
  ds.dim = 2;
  ds.channels = 1;
  ds.timesteps = t_steps;
  ds.dt = dt;
  ds.periodic = {false, false};
  ds.train_count = n_train;
  ds.test_count = n_test;
  ds.seed = seed;
  ds.gen_params["omega"] = omega;

  Rng rng = make_rng(seed);
  const double disk_r = 0.28;
  if (irregular) {
    ds.mesh_kind = "blue_noise";
    auto pts = blue_noise_mesh(rng, n_target, 0.5, 0.5, disk_r, 2.2);
    ds.n_points = pts.size() / 2;
    ds.mesh.assign(pts.begin(), pts.end());
    ds.gen_params["disk_radius"] = disk_r;
  } else {
    ds.mesh_kind = "grid";
    std::size_t side = std::size_t(std::round(std::sqrt(double(n_target))));
    ds.n_points = side * side;
    ds.mesh.resize(ds.n_points * 2);
    for (std::size_t i = 0; i < side; ++i)
      for (std::size_t j = 0; j < side; ++j) {
        ds.mesh[(i * side + j) * 2] = float((double(i) + 0.5) / double(side));
        ds.mesh[(i * side + j) * 2 + 1] = float((double(j) + 0.5) / double(side));
      }
  }

  for (std::size_t s = 0; s < n_train + n_test; ++s) {
    RotatingField f = random_rotating_field(rng, omega);
    std::vector<float> traj(t_steps * ds.n_points);
    for (std::size_t t = 0; t < t_steps; ++t) {
      double time = double(t) * dt;
      for (std::size_t i = 0; i < ds.n_points; ++i)
        traj[t * ds.n_points + i] =
            float(f.eval(time, double(ds.mesh[i * 2]), double(ds.mesh[i * 2 + 1])));
    }
    ds.samples.push_back(std::move(traj));
  }
  return ds;
}

}  // namespace calm
