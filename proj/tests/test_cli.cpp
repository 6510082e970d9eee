#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "calm/config.hpp"
#include "calm/eval.hpp"
#include "calm/io.hpp"
#include "calm/model.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "calm_cli_test";

int run_cli(const std::string& args, const std::string& log_name = "") {
  fs::create_directories(kWork);
  std::string cmd = std::string(CALM_CLI_PATH) + " " + args;
  if (!log_name.empty()) cmd += " > " + (kWork / log_name).string() + " 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::string tiny_config(const fs::path& dataset, const fs::path& out, int epochs,
                        unsigned seed = 5) {
  std::ostringstream os;
  os << "[data]\ndataset = " << dataset.string() << "\n"
     << "[codec]\n"
     << "encoder_channels = 4,8,12\nencoder_queries = 24,12,4\n"
     << "encoder_percentiles = 0.1,0.2,0.5\nencoder_temperatures = 1,1,1\n"
     << "decoder_channels = 8,4,1\ndecoder_queries = 12,24\n"
     << "decoder_percentiles = 1.0,0.4,0.1\ndecoder_temperatures = 1,1,1\n"
     << "rff_per_dim = 6\nkernel_hidden = 8\n"
     << "[training]\nepochs = " << epochs << "\nbatch_size = 4\nlearning_rate = 2e-3\n"
     << "epochs_per_increment = 2\nval_count = 2\n"
     << "[run]\nseed = " << seed << "\nthreads = 2\nout_dir = " << out.string() << "\n";
  return os.str();
}

const fs::path& small_dataset() {
  static fs::path path = [] {
    fs::path p = kWork / "small.calmds";
    fs::create_directories(kWork);
    REQUIRE(run_cli("gen-data --pde advection1d --out " + p.string() +
                        " --seed 3 --train-samples 10 --test-samples 3 --points 48 --timesteps 7",
                    "gen_small.log") == 0);
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("gen-data is deterministic under a fixed seed") {
  fs::create_directories(kWork);
  auto a = kWork / "det_a.calmds";
  auto b = kWork / "det_b.calmds";
  REQUIRE(run_cli("gen-data --pde advection1d --out " + a.string() +
                      " --seed 7 --train-samples 6 --test-samples 2 --points 32 --timesteps 5",
                  "gen_a.log") == 0);
  REQUIRE(run_cli("gen-data --pde advection1d --out " + b.string() +
                      " --seed 7 --train-samples 6 --test-samples 2 --points 32 --timesteps 5",
                  "gen_b.log") == 0);
  REQUIRE(slurp(a) == slurp(b));
}

TEST_CASE("gen-data burgers records its viscosity and loads back") {
  auto p = kWork / "burgers.calmds";
  REQUIRE(run_cli("gen-data --pde burgers1d --out " + p.string() +
                      " --seed 5 --train-samples 3 --test-samples 1 --points 64 --timesteps 5 "
                      "--dt 0.04 --nu 0.8",
                  "gen_burgers.log") == 0);
  auto ds = calm::load_dataset(p.string());
  REQUIRE(ds.pde == "burgers1d");
  REQUIRE(ds.gen_params.at("nu") == 0.8);
  REQUIRE(ds.sample_count() == 4);
}

TEST_CASE("gen-data payload size matches the format arithmetic") {
  auto p = kWork / "sized.calmds";
  REQUIRE(run_cli("gen-data --pde advection1d --out " + p.string() +
                      " --seed 2 --train-samples 512 --test-samples 64 --points 256 --timesteps 21",
                  "gen_sized.log") == 0);
  auto ds = calm::load_dataset(p.string());
  std::string json = calm::dataset_meta_json(ds).dump();
  std::size_t payload = 256 + 576 * 21 * 256;  // mesh + S*T*N floats
  REQUIRE(fs::file_size(p) == calm::io::aligned_header_size(json.size()) + 4 * payload);
}

TEST_CASE("gen-data rejects unknown pde names and missing flags") {
  REQUIRE(run_cli("gen-data --pde heat9d --out " + (kWork / "x.calmds").string(),
                  "gen_bad.log") == 1);
  REQUIRE(run_cli("gen-data --out " + (kWork / "y.calmds").string(), "gen_bad2.log") == 1);
}

TEST_CASE("train writes a self-contained run directory") {
  auto out = kWork / "run_basic";
  fs::remove_all(out);
  auto cfg = kWork / "basic.cfg";
  write_file(cfg, tiny_config(small_dataset(), out, 3));
  REQUIRE(run_cli("train --config " + cfg.string(), "train_basic.log") == 0);

  REQUIRE(fs::exists(out / "config.resolved.cfg"));
  REQUIRE(fs::exists(out / "log.csv"));
  REQUIRE(fs::exists(out / "final.calmck"));
  REQUIRE(fs::exists(out / "best.calmck"));

  auto rc = calm::load_run_config((out / "config.resolved.cfg").string());
  REQUIRE(rc.train.epochs == 3);
  REQUIRE(rc.codec.enc_queries == std::vector<std::size_t>{24, 12, 4});

  std::string log = slurp(out / "log.csv");
  REQUIRE(log.rfind("epoch,rollout_len,train_loss,val_rel_l2\n", 0) == 0);
  REQUIRE(std::count(log.begin(), log.end(), '\n') == 4);  // header + 3 epochs
}

TEST_CASE("train is deterministic for a fixed config and seed") {
  auto cfg1 = kWork / "det1.cfg";
  auto cfg2 = kWork / "det2.cfg";
  write_file(cfg1, tiny_config(small_dataset(), kWork / "run_det1", 2, 11));
  write_file(cfg2, tiny_config(small_dataset(), kWork / "run_det2", 2, 11));
  fs::remove_all(kWork / "run_det1");
  fs::remove_all(kWork / "run_det2");
  REQUIRE(run_cli("train --config " + cfg1.string(), "train_det1.log") == 0);
  REQUIRE(run_cli("train --config " + cfg2.string(), "train_det2.log") == 0);
  REQUIRE(slurp(kWork / "run_det1" / "final.calmck") ==
          slurp(kWork / "run_det2" / "final.calmck"));
}

TEST_CASE("resuming continues the log without a loss discontinuity") {
  auto out = kWork / "run_resume";
  fs::remove_all(out);
  auto cfg_short = kWork / "resume_short.cfg";
  auto cfg_full = kWork / "resume_full.cfg";
  write_file(cfg_short, tiny_config(small_dataset(), out, 3, 13));
  write_file(cfg_full, tiny_config(small_dataset(), out, 6, 13));

  REQUIRE(run_cli("train --config " + cfg_short.string(), "train_res1.log") == 0);
  REQUIRE(run_cli("train --config " + cfg_full.string() + " --resume " +
                      (out / "final.calmck").string(),
                  "train_res2.log") == 0);

  std::ifstream log(out / "log.csv");
  std::string line;
  std::getline(log, line);  // header
  std::vector<double> losses;
  std::vector<int> epochs;
  while (std::getline(log, line)) {
    std::istringstream ss(line);
    std::string epoch_s, len_s, loss_s;
    std::getline(ss, epoch_s, ',');
    std::getline(ss, len_s, ',');
    std::getline(ss, loss_s, ',');
    epochs.push_back(std::stoi(epoch_s));
    losses.push_back(std::stod(loss_s));
  }
  REQUIRE(epochs == std::vector<int>{0, 1, 2, 3, 4, 5});
  // the run boundary sits between rows 2 and 3
  REQUIRE(std::fabs(losses[3] - losses[2]) <= 0.10 * std::fabs(losses[2]));
}

TEST_CASE("train rejects configs that disagree with the dataset") {
  auto cfg = kWork / "bad_channels.cfg";
  std::string text = tiny_config(small_dataset(), kWork / "run_bad", 2);
  text.replace(text.find("decoder_channels = 8,4,1"), 24, "decoder_channels = 8,4,2");
  write_file(cfg, text);
  REQUIRE(run_cli("train --config " + cfg.string(), "train_bad.log") == 1);
  std::string log = slurp(kWork / "train_bad.log");
  REQUIRE(log.find("channel count") != std::string::npos);
}

TEST_CASE("eval oracles and reports") {
  auto out = kWork / "run_eval";
  auto cfg = kWork / "eval.cfg";
  if (!fs::exists(out / "final.calmck")) {
    write_file(cfg, tiny_config(small_dataset(), out, 2, 17));
    REQUIRE(run_cli("train --config " + cfg.string(), "train_eval.log") == 0);
  }
  auto ckpt = (out / "final.calmck").string();
  auto data = small_dataset().string();

  SECTION("identity oracle reports zero error") {
    auto rep = kWork / "rep_identity";
    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --data " + data + " --report " +
                        rep.string() + " --oracle identity",
                    "eval_id.log") == 0);
    auto j = nlohmann::json::parse(slurp(rep / "summary.json"));
    REQUIRE(double(j.at("mean")) == 0.0);
  }

  SECTION("persistence oracle equals an independent recomputation") {
    auto rep = kWork / "rep_persistence";
    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --data " + data + " --report " +
                        rep.string() + " --oracle persistence",
                    "eval_pers.log") == 0);
    auto j = nlohmann::json::parse(slurp(rep / "summary.json"));

    auto ds = calm::load_dataset(data);
    double expect = 0.0;
    std::size_t n = ds.n_points;
    for (std::size_t s = ds.train_count; s < ds.sample_count(); ++s) {
      double sample_err = 0.0;
      for (std::size_t t = 1; t < ds.timesteps; ++t) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          double p = ds.samples[s][i];
          double y = ds.samples[s][t * n + i];
          num += (p - y) * (p - y);
          den += y * y;
        }
        sample_err += std::sqrt(num) / std::sqrt(den);
      }
      expect += sample_err / double(ds.timesteps - 1);
    }
    expect /= double(ds.test_count);
    REQUIRE(double(j.at("mean")) == Catch::Approx(expect).epsilon(1e-9));
  }

  SECTION("model eval writes per-trajectory and per-timestep curves") {
    auto rep = kWork / "rep_model";
    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --data " + data + " --report " + rep.string(),
                    "eval_model.log") == 0);
    std::string per_traj = slurp(rep / "per_trajectory.csv");
    REQUIRE(std::count(per_traj.begin(), per_traj.end(), '\n') == 4);  // header + 3 samples
    std::string per_t = slurp(rep / "per_timestep.csv");
    REQUIRE(std::count(per_t.begin(), per_t.end(), '\n') == 7);  // header + 6 future steps
  }

  SECTION("checkpoint/dataset channel or dimension mismatch fails validation") {
    auto rot = kWork / "rot.calmds";
    if (!fs::exists(rot))
      REQUIRE(run_cli("gen-data --pde rotating2d --out " + rot.string() +
                          " --seed 4 --train-samples 2 --test-samples 1 --points 64 --timesteps 4",
                      "gen_rot.log") == 0);
    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --data " + rot.string() + " --report " +
                        (kWork / "rep_bad").string(),
                    "eval_bad.log") == 1);
  }
}

TEST_CASE("the overfit smoke run memorizes one trajectory") {
  auto data = kWork / "overfit.calmds";
  if (!fs::exists(data))
    REQUIRE(run_cli("gen-data --pde advection1d --out " + data.string() +
                        " --seed 9 --train-samples 1 --test-samples 2 --points 64 --timesteps 6",
                    "gen_overfit.log") == 0);
  auto out = kWork / "run_overfit";
  fs::remove_all(out);
  REQUIRE(run_cli("train --config " + std::string(CALM_CONFIG_DIR) + "/overfit-smoke.cfg" +
                      " --data " + data.string() + " --out " + out.string(),
                  "train_overfit.log") == 0);

  std::ifstream log(out / "log.csv");
  std::string line, last;
  std::getline(log, line);
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    ++rows;
    last = line;
  }
  REQUIRE(rows <= 500);  // one batch per epoch: at most 500 steps
  double final_loss = std::stod(last.substr(last.find(',', last.find(',') + 1) + 1));
  INFO("final train loss " << final_loss);
  REQUIRE(final_loss < 0.02);

  // memorized training trajectory evaluates better than unseen test ones
  REQUIRE(run_cli("eval --checkpoint " + (out / "final.calmck").string() + " --data " +
                      data.string() + " --report " + (kWork / "rep_train").string() +
                      " --split train",
                  "eval_train.log") == 0);
  REQUIRE(run_cli("eval --checkpoint " + (out / "final.calmck").string() + " --data " +
                      data.string() + " --report " + (kWork / "rep_test").string() +
                      " --split test",
                  "eval_test.log") == 0);
  auto train_j = nlohmann::json::parse(slurp(kWork / "rep_train" / "summary.json"));
  auto test_j = nlohmann::json::parse(slurp(kWork / "rep_test" / "summary.json"));
  REQUIRE(double(train_j.at("mean")) < double(test_j.at("mean")));
}

TEST_CASE("export-queries dumps positions per layer") {
  // fixture: an untrained mesh-prior model on an irregular 2D mesh
  auto ds = calm::gen_rotating_2d(3, 1, 200, 4, 1.0, 0.1, 99, true);
  calm::CodecConfig codec;
  codec.enc_channels = {4, 8, 12};
  codec.enc_queries = {32, 16, 4};
  codec.enc_percentiles = {0.1, 0.2, 0.5};
  codec.enc_temperatures = {1, 1, 1};
  codec.dec_channels = {8, 4, 1};
  codec.dec_queries = {16, 32};
  codec.dec_percentiles = {1.0, 0.4, 0.1};
  codec.dec_temperatures = {1, 1, 1};
  codec.rff_per_dim = 4;
  codec.kernel_hidden = 6;
  codec.mesh_prior = true;
  calm::ProcessorConfig pc;
  pc.blocks = 1;
  pc.rff_per_dim = 4;
  auto model = calm::CalmPdeModel<float>::build(codec, pc, ds, 42);
  auto ckpt = kWork / "meshprior.calmck";
  calm::save_model_checkpoint(ckpt.string(), model, nlohmann::json::object());

  auto out = kWork / "queries";
  fs::remove_all(out);
  REQUIRE(run_cli("export-queries --checkpoint " + ckpt.string() + " --out " + out.string(),
                  "export.log") == 0);

  std::set<std::pair<float, float>> mesh_pts;
  for (std::size_t i = 0; i < ds.n_points; ++i)
    mesh_pts.insert({ds.mesh[i * 2], ds.mesh[i * 2 + 1]});

  struct Expect {
    std::string file;
    std::size_t rows;
  };
  std::vector<Expect> expected{{"queries-encoder-0.csv", 32}, {"queries-encoder-1.csv", 16},
                               {"queries-encoder-2.csv", 4},  {"queries-decoder-0.csv", 16},
                               {"queries-decoder-1.csv", 32}};
  for (const auto& e : expected) {
    auto path = out / e.file;
    INFO(path.string());
    REQUIRE(fs::exists(path));
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);  // header
    std::size_t rows = 0;
    while (std::getline(f, line)) {
      ++rows;
      std::istringstream ss(line);
      std::string idx, xs, ys;
      std::getline(ss, idx, ',');
      std::getline(ss, xs, ',');
      std::getline(ss, ys, ',');
      float x = std::stof(xs), y = std::stof(ys);
      REQUIRE((x >= 0.f && x < 1.f));
      REQUIRE((y >= 0.f && y < 1.f));
      // untrained with mesh prior: every query sits on a mesh point
      REQUIRE(mesh_pts.count({x, y}) == 1);
    }
    REQUIRE(rows == e.rows);
  }
  // externally queried final decoder layer has no file
  REQUIRE(!fs::exists(out / "queries-decoder-2.csv"));
}

TEST_CASE("bench reports phase timings and the latent size") {
  auto out = kWork / "run_eval";
  REQUIRE(fs::exists(out / "final.calmck"));
  auto ckpt = (out / "final.calmck").string();
  auto data = small_dataset().string();

  auto rep0 = kWork / "bench0.json";
  auto rep1 = kWork / "bench1.json";
  auto rep2 = kWork / "bench2.json";
  REQUIRE(run_cli("bench --checkpoint " + ckpt + " --data " + data + " --steps 0 --report " +
                      rep0.string(),
                  "bench0.log") == 0);
  REQUIRE(run_cli("bench --checkpoint " + ckpt + " --data " + data + " --steps 400 --report " +
                      rep1.string(),
                  "bench1.log") == 0);
  REQUIRE(run_cli("bench --checkpoint " + ckpt + " --data " + data + " --steps 800 --report " +
                      rep2.string(),
                  "bench2.log") == 0);

  auto j0 = nlohmann::json::parse(slurp(rep0));
  auto j1 = nlohmann::json::parse(slurp(rep1));
  auto j2 = nlohmann::json::parse(slurp(rep2));

  REQUIRE(double(j0.at("latent_steps_ms")) == 0.0);
  REQUIRE(double(j0.at("rollout_total_ms")) ==
          Catch::Approx(double(j0.at("encode_ms")) + double(j0.at("decode_ms"))));
  REQUIRE(std::size_t(j1.at("latent_size")) ==
          std::size_t(j1.at("latent_tokens")) * std::size_t(j1.at("latent_dim")));

  // the latent-step portion roughly doubles with the step count
  double s1 = j1.at("latent_steps_ms"), s2 = j2.at("latent_steps_ms");
  REQUIRE(s2 / s1 > 1.5);
  REQUIRE(s2 / s1 < 2.5);
}
