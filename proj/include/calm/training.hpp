#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "calm/eval.hpp"
#include "calm/model.hpp"

namespace calm {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::size_t epochs_per_increment = 0;  // 0: reach the full length halfway through
  bool random_start = true;
  bool self_reconstruction = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // 0 disables the max-norm clip
  std::size_t threads = 0;  // 0: hardware concurrency
  std::size_t val_count = 16;
  std::uint64_t seed = 7;
};

inline std::size_t resolve_epochs_per_increment(const TrainConfig& cfg, std::size_t t_steps) {
  if (cfg.epochs_per_increment > 0) return cfg.epochs_per_increment;
  std::size_t full = t_steps > 1 ? t_steps - 1 : 1;
  return std::max<std::size_t>(1, cfg.epochs / (2 * full));
}

/// Rollout length schedule: starts at 1, +1 every `epochs_per_increment`
/// epochs, capped at the full trajectory length.
inline std::size_t curriculum_len(std::size_t epoch, std::size_t epochs_per_increment,
                                  std::size_t t_steps) {
  std::size_t len = 1 + epoch / std::max<std::size_t>(epochs_per_increment, 1);
  return std::min(len, t_steps > 1 ? t_steps - 1 : 1);
}

/// Uniform over the valid start indices when randomized starts are on.
inline std::size_t sample_start(Rng& rng, std::size_t t_steps, std::size_t rollout_len,
                                bool random_start) {
  if (rollout_len + 1 > t_steps)
    throw ContractError("sample_start: rollout length exceeds the trajectory");
  if (!random_start) return 0;
  std::uniform_int_distribution<std::size_t> d(0, t_steps - 1 - rollout_len);
  return d(rng);
}

// ---------------------------------------------------------------------------
// Relative L2 loss
// ---------------------------------------------------------------------------

/// (1/(T*C)) sum_t sum_c ||pred[t,:,c] - truth[t,:,c]|| / ||truth[t,:,c]||
/// on the tape. A zero-norm truth slice gets 1e-12 added to its denominator;
/// `guard_count` reports how often that fired.
template <typename S>
Tensor<S> relative_l2(Tape<S>& tape, const std::vector<Tensor<S>>& preds,
                      const std::vector<Tensor<S>>& truths, std::size_t* guard_count = nullptr) {
  if (preds.size() != truths.size() || preds.empty())
    throw DimensionError("relative_l2: prediction/truth window mismatch");
  std::size_t c = preds[0].cols();
  Tensor<S> total;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    detail::require_same_shape("relative_l2", preds[t], truths[t]);
    std::vector<S> inv(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double den = 0.0;
      for (std::size_t n = 0; n < truths[t].rows(); ++n) {
        double v = truths[t].at(n, ch);
        den += v * v;
      }
      den = std::sqrt(den);
      if (den == 0.0) {
        den += 1e-12;
        if (guard_count) ++*guard_count;
      }
      inv[ch] = S(1.0 / den);
    }
    Tensor<S> diff = sub(tape, preds[t], truths[t]);
    Tensor<S> norms = sqrt_elem(tape, colwise_sum(tape, mul(tape, diff, diff)));
    Tensor<S> term = sum_all(tape, mul(tape, norms, Tensor<S>({c}, std::move(inv))));
    total = total.defined() ? add(tape, total, term) : term;
  }
  return scale(tape, total, S(1) / S(preds.size() * c));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam over every trainable parameter, query positions and modulation
/// included. Moments are kept in double regardless of the training scalar.
template <typename S>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;

  void init(const std::vector<ParamRef<S>>& trainable) {
    m.clear();
    v.clear();
    for (const auto& p : trainable) {
      m.emplace_back(p.slot->numel(), 0.0);
      v.emplace_back(p.slot->numel(), 0.0);
    }
  }

  void step(const std::vector<ParamRef<S>>& trainable, std::vector<std::vector<double>>& grads,
            double lr, double grad_clip = 0.0) {
    if (grad_clip > 0.0) {
      double norm2 = 0.0;
      for (const auto& g : grads)
        for (double gv : g) norm2 += gv * gv;
      double norm = std::sqrt(norm2);
      if (norm > grad_clip) {
        double s = grad_clip / norm;
        for (auto& g : grads)
          for (double& gv : g) gv *= s;
      }
    }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      Tensor<S>& x = *trainable[i].slot;
      std::vector<S> next(x.values());
      for (std::size_t j = 0; j < next.size(); ++j) {
        double g = grads[i][j];
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
        double update = lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
        next[j] = S(double(next[j]) - update);
      }
      x = Tensor<S>(x.shape(), std::move(next), x.requires_grad());
    }
  }
};

// ---------------------------------------------------------------------------
// End-to-end training
// ---------------------------------------------------------------------------

struct TrainLogRow {
  std::size_t epoch;
  std::size_t rollout_len;
  double train_loss;
  double val_rel_l2;
};

template <typename S>
struct Trainer {
  CalmPdeModel<S>* model;
  const Dataset* data;
  TrainConfig cfg;
  Adam<S> opt;
  Rng rng;
  std::size_t start_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::pair<std::string, Tensor<S>>> best_params;

  std::vector<std::size_t> train_idx, val_idx;

  Trainer(CalmPdeModel<S>& m, const Dataset& ds, TrainConfig c)
      : model(&m), data(&ds), cfg(c), rng(make_rng(c.seed ^ 0x7261696eull)) {
    opt.beta1 = cfg.adam_beta1;
    opt.beta2 = cfg.adam_beta2;
    opt.eps = cfg.adam_eps;
    std::size_t val = std::min(cfg.val_count, ds.train_count > 1 ? ds.train_count / 2 : 0);
    for (std::size_t i = 0; i < ds.train_count - val; ++i) train_idx.push_back(i);
    for (std::size_t i = ds.train_count - val; i < ds.train_count; ++i) val_idx.push_back(i);
    opt.init(trainable_params());
  }

  std::vector<ParamRef<S>> trainable_params() {
    std::vector<ParamRef<S>> out;
    for (auto& p : model->params())
      if (p.trainable && p.slot->requires_grad()) out.push_back(p);
    return out;
  }

  /// One optimizer update over a batch: per-sample forward/backward in
  /// parallel, deterministic in-order gradient reduction, Adam, position
  /// wrap. Returns the mean window loss.
  double run_batch(const std::vector<std::size_t>& batch, std::size_t rollout_len) {
    auto trainable = trainable_params();
    std::vector<std::size_t> offsets{0};
    for (auto& p : trainable) offsets.push_back(offsets.back() + p.slot->numel());
    std::size_t total = offsets.back();

    PointSet<S> mesh = cast_points<S>(data->mesh_points());
    auto plans = model->build_plans(mesh, mesh);

    std::vector<std::size_t> starts(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b)
      starts[b] = sample_start(rng, data->timesteps, rollout_len, cfg.random_start);

    std::size_t nthreads = std::min(resolve_threads(cfg.threads), batch.size());
    std::vector<std::vector<double>> partial(nthreads, std::vector<double>(total, 0.0));
    std::vector<double> losses(batch.size(), 0.0);
    std::vector<int> bad(batch.size(), 0);

    auto worker = [&](std::size_t tid, std::size_t lo, std::size_t hi) {
      for (std::size_t b = lo; b < hi; ++b) {
        Tape<S> tape;
        Tensor<S> loss = window_loss(tape, batch[b], starts[b], rollout_len, mesh, &plans);
        double lv = double(loss[0]);
        losses[b] = lv;
        if (!std::isfinite(lv)) {
          bad[b] = 1;
          continue;
        }
        tape.backward(loss);
        for (std::size_t i = 0; i < trainable.size(); ++i) {
          const auto* g = tape.grad(*trainable[i].slot);
          if (!g) continue;
          double* dst = partial[tid].data() + offsets[i];
          for (std::size_t j = 0; j < g->size(); ++j) dst[j] += double((*g)[j]);
        }
      }
    };

    if (nthreads <= 1) {
      worker(0, 0, batch.size());
    } else {
      std::vector<std::thread> pool;
      std::size_t chunk = (batch.size() + nthreads - 1) / nthreads;
      for (std::size_t t = 0; t < nthreads; ++t) {
        std::size_t lo = t * chunk, hi = std::min(batch.size(), lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(worker, t, lo, hi);
      }
      for (auto& th : pool) th.join();
    }

    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (bad[b]) diagnose_non_finite(batch[b], starts[b], rollout_len, mesh, &plans);
    }

    std::vector<std::vector<double>> grads;
    grads.reserve(trainable.size());
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      std::vector<double> g(trainable[i].slot->numel(), 0.0);
      for (std::size_t t = 0; t < nthreads; ++t) {
        const double* src = partial[t].data() + offsets[i];
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
      }
      for (double& gv : g) gv /= double(batch.size());
      grads.push_back(std::move(g));
    }

    opt.step(trainable, grads, cfg.learning_rate, cfg.grad_clip);
    model->constrain_positions();

    double mean_loss = 0.0;
    for (double l : losses) mean_loss += l;
    return mean_loss / double(batch.size());
  }

  Tensor<S> window_loss(Tape<S>& tape, std::size_t sample, std::size_t start,
                        std::size_t rollout_len, const PointSet<S>& mesh,
                        const typename CalmPdeModel<S>::Plans* plans) const {
    Tensor<S> ic = model->normalize(data->frame<S>(sample, start));
    auto preds = model->forward_window(tape, ic, mesh, mesh, rollout_len,
                                       cfg.self_reconstruction, plans);
    std::vector<Tensor<S>> truths;
    for (std::size_t t = cfg.self_reconstruction ? 0 : 1; t <= rollout_len; ++t)
      truths.push_back(model->normalize(data->frame<S>(sample, start + t)));
    return relative_l2(tape, preds, truths);
  }

  /// Reruns one diverged sample in checked mode to name the first op that
  /// produced a non-finite value, then aborts the epoch.
  [[noreturn]] void diagnose_non_finite(std::size_t sample, std::size_t start,
                                        std::size_t rollout_len, const PointSet<S>& mesh,
                                        const typename CalmPdeModel<S>::Plans* plans) const {
    try {
      Tape<S> tape(false);
      tape.set_check_finite(true);
      window_loss(tape, sample, start, rollout_len, mesh, plans);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("epoch aborted: sample " + std::to_string(sample) + ": " + e.what());
    }
    throw NonFiniteError("epoch aborted: non-finite loss on sample " + std::to_string(sample));
  }

  double validate() {
    if (val_idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    EvalOptions opt_eval;
    opt_eval.samples = val_idx;
    opt_eval.threads = cfg.threads;
    return evaluate(*model, *data, opt_eval).mean;
  }

  /// Runs the epoch loop; `on_epoch` fires after each epoch with the log row.
  void train(const std::function<void(const TrainLogRow&)>& on_epoch = nullptr) {
    std::size_t inc = resolve_epochs_per_increment(cfg, data->timesteps);
    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
      std::size_t len = curriculum_len(epoch, inc, data->timesteps);
      std::vector<std::size_t> order = train_idx;
      std::shuffle(order.begin(), order.end(), rng);

      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
        std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
        std::vector<std::size_t> batch(order.begin() + std::ptrdiff_t(lo),
                                       order.begin() + std::ptrdiff_t(hi));
        loss_sum += run_batch(batch, len);
        ++batches;
      }

      TrainLogRow row{epoch, len, loss_sum / double(std::max<std::size_t>(batches, 1)),
                      validate()};
      if (std::isfinite(row.val_rel_l2) && row.val_rel_l2 < best_val) {
        best_val = row.val_rel_l2;
        best_params.clear();
        for (auto& p : model->params()) best_params.emplace_back(p.name, *p.slot);
      }
      if (on_epoch) on_epoch(row);
    }
  }
};

}  // namespace calm
