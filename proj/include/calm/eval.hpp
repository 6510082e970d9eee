#pragma once

#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

#include "calm/model.hpp"

namespace calm {

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

enum class PredictorKind { kModel, kPersistence, kIdentity };

struct EvalOptions {
  PredictorKind kind = PredictorKind::kModel;
  std::vector<std::size_t> samples;
  std::vector<std::uint32_t> input_subset;  // encode from these mesh rows when non-empty
  std::size_t threads = 0;
};

struct EvalReport {
  std::vector<double> per_sample;    // relative L2 per trajectory
  std::vector<double> per_timestep;  // mean over trajectories, future steps only
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t zero_norm_guards = 0;
};

/// Relative L2 over a prediction window on raw buffers (double accumulation).
template <typename P, typename T>
double relative_l2_scalar(const P* pred, const T* truth, std::size_t t_steps, std::size_t n,
                          std::size_t c, std::size_t* guards = nullptr,
                          std::vector<double>* per_t = nullptr) {
  double acc = 0.0;
  for (std::size_t t = 0; t < t_steps; ++t) {
    double t_acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double pv = double(pred[(t * n + i) * c + ch]);
        double tv = double(truth[(t * n + i) * c + ch]);
        num += (pv - tv) * (pv - tv);
        den += tv * tv;
      }
      num = std::sqrt(num);
      den = std::sqrt(den);
      if (den == 0.0) {
        den += 1e-12;
        if (guards) ++*guards;
      }
      t_acc += num / den;
    }
    if (per_t) (*per_t)[t] += t_acc / double(c);
    acc += t_acc;
  }
  return acc / double(t_steps * c);
}

/// Rolls the model (or a baseline predictor) over the full horizon of each
/// requested trajectory and reports raw-space relative L2 errors. The model
/// path encodes only the IC, steps entirely in latent space and decodes every
/// future timestep on the full mesh.
template <typename S>
EvalReport evaluate(const CalmPdeModel<S>& model, const Dataset& ds, const EvalOptions& opt) {
  std::size_t t_future = ds.timesteps - 1;
  std::size_t n = ds.n_points, c = ds.channels;
  EvalReport rep;
  rep.per_sample.resize(opt.samples.size(), 0.0);
  rep.per_timestep.assign(t_future, 0.0);

  PointSet<S> out_mesh = cast_points<S>(ds.mesh_points());
  bool subset = !opt.input_subset.empty();
  PointSet<S> in_mesh = out_mesh;
  if (subset) {
    std::vector<S> pos(opt.input_subset.size() * ds.dim);
    for (std::size_t i = 0; i < opt.input_subset.size(); ++i)
      for (std::size_t d = 0; d < ds.dim; ++d)
        pos[i * ds.dim + d] = out_mesh.positions[opt.input_subset[i] * ds.dim + d];
    in_mesh = PointSet<S>::unchecked(Tensor<S>({opt.input_subset.size(), ds.dim}, std::move(pos)),
                                     ds.periodic);
  }

  typename CalmPdeModel<S>::Plans plans;
  if (opt.kind == PredictorKind::kModel) plans = model.build_plans(in_mesh, out_mesh);

  std::vector<std::vector<double>> per_t_partial(opt.samples.size());
  std::vector<std::size_t> guard_partial(opt.samples.size(), 0);

  auto eval_one = [&](std::size_t si) {
    std::size_t sample = opt.samples[si];
    const auto& traj = ds.samples[sample];
    const float* truth_future = traj.data() + n * c;  // steps 1..T-1
    std::vector<double> per_t(t_future, 0.0);
    double err = 0.0;

    if (opt.kind == PredictorKind::kIdentity) {
      err = relative_l2_scalar(truth_future, truth_future, t_future, n, c, &guard_partial[si],
                               &per_t);
    } else if (opt.kind == PredictorKind::kPersistence) {
      std::vector<float> pred(t_future * n * c);
      for (std::size_t t = 0; t < t_future; ++t)
        std::copy_n(traj.data(), n * c, pred.data() + t * n * c);
      err = relative_l2_scalar(pred.data(), truth_future, t_future, n, c, &guard_partial[si],
                               &per_t);
    } else {
      Tensor<S> ic_raw = ds.frame<S>(sample, 0);
      if (subset) {
        std::vector<S> sub(opt.input_subset.size() * c);
        for (std::size_t i = 0; i < opt.input_subset.size(); ++i)
          for (std::size_t ch = 0; ch < c; ++ch)
            sub[i * c + ch] = ic_raw[opt.input_subset[i] * c + ch];
        ic_raw = Tensor<S>({opt.input_subset.size(), c}, std::move(sub));
      }
      Tape<S> tape(false);
      auto preds = model.forward_window(tape, model.normalize(ic_raw), in_mesh, out_mesh,
                                        t_future, false, &plans);
      std::vector<S> flat(t_future * n * c);
      for (std::size_t t = 0; t < t_future; ++t) {
        auto raw = model.denormalize(preds[t]);
        std::copy(raw.begin(), raw.end(), flat.begin() + std::ptrdiff_t(t * n * c));
      }
      err = relative_l2_scalar(flat.data(), truth_future, t_future, n, c, &guard_partial[si],
                               &per_t);
    }
    rep.per_sample[si] = err;
    per_t_partial[si] = std::move(per_t);
  };

  std::size_t nthreads = std::min(resolve_threads(opt.threads), opt.samples.size());
  if (nthreads <= 1) {
    for (std::size_t si = 0; si < opt.samples.size(); ++si) eval_one(si);
  } else {
    std::vector<std::thread> pool;
    std::size_t chunk = (opt.samples.size() + nthreads - 1) / nthreads;
    for (std::size_t t = 0; t < nthreads; ++t) {
      std::size_t lo = t * chunk, hi = std::min(opt.samples.size(), lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] {
        for (std::size_t si = lo; si < hi; ++si) eval_one(si);
      });
    }
    for (auto& th : pool) th.join();
  }

  for (std::size_t si = 0; si < opt.samples.size(); ++si) {
    rep.mean += rep.per_sample[si];
    rep.zero_norm_guards += guard_partial[si];
    for (std::size_t t = 0; t < t_future; ++t) rep.per_timestep[t] += per_t_partial[si][t];
  }
  std::size_t count = std::max<std::size_t>(opt.samples.size(), 1);
  rep.mean /= double(count);
  for (auto& v : rep.per_timestep) v /= double(count);
  for (double e : rep.per_sample) rep.stddev += (e - rep.mean) * (e - rep.mean);
  rep.stddev = std::sqrt(rep.stddev / double(count));
  return rep;
}

}  // namespace calm
