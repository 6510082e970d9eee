// calm-pde: data generation, training, evaluation, query export and timing
// for the continuous-convolution latent PDE surrogate.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "calm/config.hpp"
#include "calm/eval.hpp"
#include "calm/io.hpp"
#include "calm/model.hpp"
#include "calm/training.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

std::vector<std::string> validate_against_dataset(const calm::RunConfig& cfg,
                                                  const calm::Dataset& ds) {
  std::vector<std::string> errs;
  if (cfg.codec.dec_channels.back() != ds.channels)
    errs.push_back("decoder output channels (" + std::to_string(cfg.codec.dec_channels.back()) +
                   ") must equal the dataset channel count (" + std::to_string(ds.channels) + ")");
  if (ds.train_count == 0) errs.push_back("dataset has no training samples");
  if (cfg.train.val_count >= ds.train_count && ds.train_count > 1)
    errs.push_back("training.val_count must leave at least one training sample");
  if (ds.timesteps < 2) errs.push_back("dataset needs at least two timesteps");
  return errs;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw calm::FormatError("cannot write '" + path.string() + "'");
  f << text;
}

int cmd_gen_data(const std::string& pde, const std::string& out, std::uint64_t seed,
                 std::size_t train_samples, std::size_t test_samples, std::size_t points,
                 std::size_t timesteps, double dt, double speed, double nu, double omega,
                 bool irregular) {
  calm::Dataset ds;
  if (pde == "advection1d") {
    ds = calm::gen_advection_1d(train_samples, test_samples, points, timesteps, speed, dt, seed);
  } else if (pde == "burgers1d") {
    ds = calm::gen_burgers_1d(train_samples, test_samples, points, timesteps, nu, dt, seed);
  } else if (pde == "rotating2d") {
    ds = calm::gen_rotating_2d(train_samples, test_samples, points, timesteps, omega, dt, seed,
                               irregular);
  } else {
    throw calm::ConfigError("unknown pde '" + pde +
                            "' (expected advection1d, burgers1d or rotating2d)");
  }
  calm::save_dataset(ds, out);
  std::cout << "wrote " << out << "\n"
            << "  pde:        " << ds.pde << (irregular ? " (irregular mesh)" : "") << "\n"
            << "  points:     " << ds.n_points << " (dim " << ds.dim << ")\n"
            << "  timesteps:  " << ds.timesteps << " (dt " << ds.dt << ")\n"
            << "  samples:    " << ds.train_count << " train + " << ds.test_count << " test\n"
            << "  channels:   " << ds.channels << "\n";
  for (const auto& [k, v] : ds.gen_params) std::cout << "  " << k << ": " << v << "\n";
  std::cout << "  file bytes: " << fs::file_size(out) << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_override,
              const std::string& out_override, const std::string& resume_path,
              long threads_override) {
  calm::RunConfig cfg = calm::load_run_config(config_path);
  if (!data_override.empty()) cfg.dataset_path = data_override;
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (threads_override >= 0) cfg.threads = std::size_t(threads_override);
  cfg.train.seed = cfg.seed;
  cfg.train.threads = cfg.threads;
  if (cfg.dataset_path.empty())
    throw calm::ConfigError("no dataset given (config [data] dataset or --data)");

  calm::Dataset ds = calm::load_dataset(cfg.dataset_path);
  auto errs = validate_against_dataset(cfg, ds);
  if (!errs.empty()) {
    std::string msg = "configuration is invalid for this dataset:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw calm::ConfigError(msg);
  }

  fs::create_directories(cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / "config.resolved.cfg", calm::serialize_run_config(cfg));

  calm::CalmPdeModel<Scalar> model;
  std::size_t start_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  calm::ProcessorConfig pc;
  pc.blocks = cfg.processor_blocks;
  pc.rff_per_dim = cfg.codec.rff_per_dim;

  std::optional<calm::Checkpoint<Scalar>> resume_ck;
  if (!resume_path.empty()) {
    resume_ck = calm::load_checkpoint<Scalar>(resume_path);
    model = calm::load_model_checkpoint(*resume_ck, ds);
    start_epoch = resume_ck->meta.at("epochs_done");
    best_val = resume_ck->meta.at("best_val");
  } else {
    model = calm::CalmPdeModel<Scalar>::build(cfg.codec, pc, ds, cfg.seed);
  }

  calm::Trainer<Scalar> trainer(model, ds, cfg.train);
  trainer.start_epoch = start_epoch;
  trainer.best_val = best_val;
  if (resume_ck) {
    trainer.opt.t = resume_ck->meta.at("adam_step");
    auto trainable = trainer.trainable_params();
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      const auto& m = resume_ck->require("adam.m." + trainable[i].name);
      const auto& v = resume_ck->require("adam.v." + trainable[i].name);
      trainer.opt.m[i].assign(m.values().begin(), m.values().end());
      trainer.opt.v[i].assign(v.values().begin(), v.values().end());
    }
    std::istringstream rs(resume_ck->meta.at("rng").get<std::string>());
    rs >> trainer.rng;
  }

  fs::path log_path = fs::path(cfg.out_dir) / "log.csv";
  bool fresh_log = resume_path.empty() || !fs::exists(log_path);
  std::ofstream log(log_path, fresh_log ? std::ios::trunc : std::ios::app);
  if (fresh_log) log << "epoch,rollout_len,train_loss,val_rel_l2\n";

  auto t0 = std::chrono::steady_clock::now();
  trainer.train([&](const calm::TrainLogRow& row) {
    log << row.epoch << ',' << row.rollout_len << ',' << std::setprecision(10) << row.train_loss
        << ',' << row.val_rel_l2 << '\n';
    log.flush();
    std::cout << "epoch " << row.epoch << "  len " << row.rollout_len << "  train "
              << std::setprecision(6) << row.train_loss << "  val " << row.val_rel_l2
              << std::endl;
  });
  auto secs =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0)
          .count() /
      1000.0;

  std::vector<std::pair<std::string, calm::Tensor<Scalar>>> opt_tensors;
  {
    auto trainable = trainer.trainable_params();
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      opt_tensors.emplace_back(
          "adam.m." + trainable[i].name,
          calm::Tensor<Scalar>({trainer.opt.m[i].size()},
                               std::vector<Scalar>(trainer.opt.m[i].begin(),
                                                   trainer.opt.m[i].end())));
      opt_tensors.emplace_back(
          "adam.v." + trainable[i].name,
          calm::Tensor<Scalar>({trainer.opt.v[i].size()},
                               std::vector<Scalar>(trainer.opt.v[i].begin(),
                                                   trainer.opt.v[i].end())));
    }
  }

  nlohmann::json extra;
  extra["run_config"] = calm::run_config_json(cfg);
  extra["epochs_done"] = cfg.train.epochs;
  extra["adam_step"] = trainer.opt.t;
  extra["best_val"] = trainer.best_val;
  std::ostringstream rs;
  rs << trainer.rng;
  extra["rng"] = rs.str();
  calm::save_model_checkpoint((fs::path(cfg.out_dir) / "final.calmck").string(), model, extra,
                              opt_tensors);

  if (!trainer.best_params.empty()) {
    nlohmann::json best_extra = extra;
    best_extra["arch"] = model.arch_json();
    std::vector<std::pair<std::string, calm::Tensor<Scalar>>> best = trainer.best_params;
    for (auto& t : opt_tensors) best.push_back(t);
    calm::save_checkpoint((fs::path(cfg.out_dir) / "best.calmck").string(), best_extra, best);
  }

  std::cout << "trained " << cfg.train.epochs - start_epoch << " epochs in " << secs
            << " s; best val " << trainer.best_val << "\nrun directory: " << cfg.out_dir
            << std::endl;
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& report_dir, const std::string& split, const std::string& oracle,
             double subsample, std::uint64_t subsample_seed, long threads) {
  calm::Dataset ds = calm::load_dataset(data_path);
  auto ck = calm::load_checkpoint<Scalar>(ckpt_path);
  auto model = calm::load_model_checkpoint(ck, ds);

  calm::EvalOptions opt;
  if (split == "train") {
    for (std::size_t i = 0; i < ds.train_count; ++i) opt.samples.push_back(i);
  } else if (split == "test") {
    for (std::size_t i = ds.train_count; i < ds.sample_count(); ++i) opt.samples.push_back(i);
  } else {
    throw calm::ConfigError("unknown split '" + split + "'");
  }
  if (opt.samples.empty()) throw calm::ConfigError("selected split is empty");

  if (oracle == "model")
    opt.kind = calm::PredictorKind::kModel;
  else if (oracle == "persistence")
    opt.kind = calm::PredictorKind::kPersistence;
  else if (oracle == "identity")
    opt.kind = calm::PredictorKind::kIdentity;
  else
    throw calm::ConfigError("unknown oracle '" + oracle + "'");

  if (subsample < 1.0) {
    std::size_t keep = std::size_t(std::ceil(subsample * double(ds.n_points)));
    if (keep == 0) throw calm::ConfigError("--subsample keeps no points");
    std::vector<std::uint32_t> idx(ds.n_points);
    for (std::size_t i = 0; i < ds.n_points; ++i) idx[i] = std::uint32_t(i);
    calm::Rng rng = calm::make_rng(subsample_seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(keep);
    opt.input_subset = std::move(idx);
  }
  opt.threads = threads >= 0 ? std::size_t(threads) : 0;

  auto rep = calm::evaluate(model, ds, opt);

  fs::create_directories(report_dir);
  {
    std::ofstream f(fs::path(report_dir) / "per_trajectory.csv");
    f << "sample,relative_l2\n";
    for (std::size_t i = 0; i < opt.samples.size(); ++i)
      f << opt.samples[i] << ',' << std::setprecision(10) << rep.per_sample[i] << '\n';
  }
  {
    std::ofstream f(fs::path(report_dir) / "per_timestep.csv");
    f << "step,relative_l2\n";
    for (std::size_t t = 0; t < rep.per_timestep.size(); ++t)
      f << (t + 1) << ',' << std::setprecision(10) << rep.per_timestep[t] << '\n';
  }
  nlohmann::json j;
  j["mean"] = rep.mean;
  j["stddev"] = rep.stddev;
  j["count"] = opt.samples.size();
  j["split"] = split;
  j["oracle"] = oracle;
  j["subsample"] = subsample;
  j["zero_norm_guards"] = rep.zero_norm_guards;
  j["latent_tokens"] = model.latent_tokens();
  j["latent_dim"] = model.latent_dim();
  j["latent_size"] = model.latent_tokens() * model.latent_dim();
  write_text(fs::path(report_dir) / "summary.json", j.dump(2) + "\n");

  std::cout << split << " relative L2 (" << oracle << "): " << std::setprecision(6) << rep.mean
            << " +- " << rep.stddev << "  (n=" << opt.samples.size() << ")" << std::endl;
  return 0;
}

int cmd_export_queries(const std::string& ckpt_path, const std::string& out_dir) {
  auto ck = calm::load_checkpoint<Scalar>(ckpt_path);
  auto model = calm::load_model_checkpoint(ck);
  fs::create_directories(out_dir);

  auto dump_layer = [&](const calm::CalmLayer<Scalar>& layer, const std::string& role,
                        std::size_t depth) {
    if (layer.cfg.external_query()) return;
    fs::path path = fs::path(out_dir) / ("queries-" + role + "-" + std::to_string(depth) + ".csv");
    std::ofstream f(path);
    f << "index";
    for (std::size_t d = 0; d < model.dim; ++d) f << ",x" << d;
    f << ",role,depth,modulation_norm\n";
    for (std::size_t j = 0; j < layer.query_pos.rows(); ++j) {
      f << j;
      for (std::size_t d = 0; d < model.dim; ++d)
        f << ',' << std::setprecision(9) << layer.query_pos.at(j, d);
      double norm = 0.0;
      if (layer.gamma.defined()) {
        for (std::size_t h = 0; h < layer.gamma.cols(); ++h) {
          double dg = double(layer.gamma.at(j, h)) - 1.0;
          double db = double(layer.beta.at(j, h));
          norm += dg * dg + db * db;
        }
        norm = std::sqrt(norm);
      }
      f << ',' << role << ',' << depth << ',' << std::setprecision(9) << norm << '\n';
    }
    std::cout << "wrote " << path.string() << " (" << layer.query_pos.rows() << " rows)\n";
  };

  for (std::size_t i = 0; i < model.encoder.layers.size(); ++i)
    dump_layer(model.encoder.layers[i], "encoder", i);
  for (std::size_t i = 0; i < model.decoder.layers.size(); ++i)
    dump_layer(model.decoder.layers[i], "decoder", i);
  return 0;
}

int cmd_bench(const std::string& ckpt_path, const std::string& data_path, std::size_t steps,
              const std::string& report_path) {
  calm::Dataset ds = calm::load_dataset(data_path);
  auto ck = calm::load_checkpoint<Scalar>(ckpt_path);
  auto model = calm::load_model_checkpoint(ck, ds);

  calm::PointSet<Scalar> mesh = calm::cast_points<Scalar>(ds.mesh_points());
  calm::Tensor<Scalar> ic = model.normalize(ds.frame<Scalar>(0, 0));

  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };

  auto t0 = clock::now();
  auto plans = model.build_plans(mesh, mesh);
  auto t1 = clock::now();

  calm::Tape<Scalar> tape(false);
  auto state = model.encoder.encode(tape, ic, mesh, &plans.enc);
  auto t2 = clock::now();

  auto ctx = model.processor.make_context(tape, state.p);
  calm::Tensor<Scalar> z = state.z;
  auto t3 = clock::now();
  for (std::size_t s = 0; s < steps; ++s) z = model.processor.step_values(tape, z, ctx);
  auto t4 = clock::now();

  auto decoded = model.decoder.decode(tape, {z, state.p}, mesh, &plans.dec);
  auto t5 = clock::now();

  double plan_ms = ms(t0, t1), encode_ms = ms(t1, t2), steps_ms = ms(t3, t4),
         decode_ms = ms(t4, t5);
  double step_avg = steps > 0 ? steps_ms / double(steps) : 0.0;
  double total_ms = encode_ms + steps_ms + decode_ms;

  nlohmann::json j;
  j["plan_build_ms"] = plan_ms;
  j["encode_ms"] = encode_ms;
  j["latent_steps"] = steps;
  j["latent_steps_ms"] = steps_ms;
  j["latent_step_avg_ms"] = step_avg;
  j["decode_ms"] = decode_ms;
  j["rollout_total_ms"] = total_ms;
  j["latent_tokens"] = model.latent_tokens();
  j["latent_dim"] = model.latent_dim();
  j["latent_size"] = model.latent_tokens() * model.latent_dim();
  j["physical_size"] = ds.n_points * ds.channels;
  j["output_points"] = decoded.rows();

  std::cout << "plan build:      " << plan_ms << " ms\n"
            << "encode:          " << encode_ms << " ms\n"
            << "latent steps:    " << steps << " x " << step_avg << " ms\n"
            << "decode:          " << decode_ms << " ms\n"
            << "rollout total:   " << total_ms << " ms\n"
            << "representation:  " << model.latent_tokens() << " x " << model.latent_dim()
            << " = " << model.latent_tokens() * model.latent_dim() << " (physical "
            << ds.n_points * ds.channels << ")\n";
  if (!report_path.empty()) write_text(report_path, j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CALM-PDE: continuous-convolution latent surrogate for time-dependent PDEs"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gd_pde, gd_out = "dataset.calmds";
  std::uint64_t gd_seed = 7;
  std::size_t gd_train = 512, gd_test = 64, gd_points = 256, gd_steps = 21;
  double gd_dt = 0.05, gd_speed = 0.4, gd_nu = 0.5, gd_omega = 2.0;
  bool gd_irregular = false;
  gen->add_option("--pde", gd_pde, "advection1d | burgers1d | rotating2d")->required();
  gen->add_option("--out", gd_out, "output file");
  gen->add_option("--seed", gd_seed, "generator seed");
  gen->add_option("--train-samples", gd_train, "training trajectories");
  gen->add_option("--test-samples", gd_test, "test trajectories");
  gen->add_option("--points", gd_points, "spatial points (target for irregular meshes)");
  gen->add_option("--timesteps", gd_steps, "timesteps per trajectory");
  gen->add_option("--dt", gd_dt, "temporal resolution");
  gen->add_option("--speed", gd_speed, "advection speed");
  gen->add_option("--nu", gd_nu, "Burgers viscosity");
  gen->add_option("--omega", gd_omega, "rotation angular velocity");
  gen->add_flag("--irregular", gd_irregular, "blue-noise mesh with a refined disk (rotating2d)");

  auto* train = app.add_subcommand("train", "train a model from a run configuration");
  std::string tr_config, tr_data, tr_out, tr_resume;
  long tr_threads = -1;
  train->add_option("--config", tr_config, "run configuration file")->required();
  train->add_option("--data", tr_data, "dataset (overrides the config)");
  train->add_option("--out", tr_out, "run directory (overrides the config)");
  train->add_option("--resume", tr_resume, "checkpoint to resume from");
  train->add_option("--threads", tr_threads, "worker threads (overrides the config)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_report = "report", ev_split = "test", ev_oracle = "model";
  double ev_subsample = 1.0;
  std::uint64_t ev_subseed = 1;
  long ev_threads = -1;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--report", ev_report, "report directory");
  ev->add_option("--split", ev_split, "test | train");
  ev->add_option("--oracle", ev_oracle, "model | persistence | identity");
  ev->add_option("--subsample", ev_subsample, "fraction of mesh points fed to the encoder");
  ev->add_option("--subsample-seed", ev_subseed, "seed for the subsample choice");
  ev->add_option("--threads", ev_threads, "worker threads");

  auto* ex = app.add_subcommand("export-queries", "dump learned query positions as CSV");
  std::string ex_ckpt, ex_out = "queries";
  ex->add_option("--checkpoint", ex_ckpt)->required();
  ex->add_option("--out", ex_out, "output directory");

  auto* be = app.add_subcommand("bench", "single-machine timing of encode/step/decode");
  std::string be_ckpt, be_data, be_report;
  std::size_t be_steps = 20;
  be->add_option("--checkpoint", be_ckpt)->required();
  be->add_option("--data", be_data)->required();
  be->add_option("--steps", be_steps, "latent steps to time");
  be->add_option("--report", be_report, "also write the timing JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gd_pde, gd_out, gd_seed, gd_train, gd_test, gd_points, gd_steps, gd_dt,
                          gd_speed, gd_nu, gd_omega, gd_irregular);
    if (train->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_threads);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_report, ev_split, ev_oracle, ev_subsample, ev_subseed,
                      ev_threads);
    if (ex->parsed()) return cmd_export_queries(ex_ckpt, ex_out);
    if (be->parsed()) return cmd_bench(be_ckpt, be_data, be_steps, be_report);
  } catch (const calm::ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const calm::FormatError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const calm::DimensionError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const calm::ContractError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
