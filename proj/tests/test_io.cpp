#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "calm/io.hpp"
#include "calm/model.hpp"
#include "calm/rng.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / "calm_io_test";
  fs::create_directories(dir);
  return dir;
}

calm::CodecConfig tiny_codec() {
  calm::CodecConfig c;
  c.enc_channels = {3, 5};
  c.enc_queries = {10, 4};
  c.enc_percentiles = {0.3, 0.5};
  c.enc_temperatures = {1.0, 1.0};
  c.dec_channels = {3, 1};
  c.dec_queries = {10};
  c.dec_percentiles = {1.0, 0.3};
  c.dec_temperatures = {1.0, 1.0};
  c.rff_per_dim = 3;
  c.kernel_hidden = 4;
  return c;
}

}  // namespace

TEST_CASE("dataset containers round-trip bit-exactly") {
  auto path = (temp_dir() / "adv.calmds").string();
  auto ds = calm::gen_advection_1d(3, 2, 20, 4, 0.3, 0.05, 7);
  calm::save_dataset(ds, path);
  auto back = calm::load_dataset(path);

  REQUIRE(back.pde == ds.pde);
  REQUIRE(back.mesh == ds.mesh);
  REQUIRE(back.sample_count() == ds.sample_count());
  for (std::size_t s = 0; s < ds.sample_count(); ++s) REQUIRE(back.samples[s] == ds.samples[s]);
  REQUIRE(back.dt == ds.dt);
  REQUIRE(back.train_count == 3);
  REQUIRE(back.test_count == 2);
  REQUIRE(back.gen_params.at("speed") == 0.3);
}

TEST_CASE("dataset file size follows the header-plus-payload arithmetic") {
  auto path = (temp_dir() / "two.calmds").string();
  auto ds = calm::gen_advection_1d(2, 0, 16, 3, 0.2, 0.1, 9);
  calm::save_dataset(ds, path);

  std::string json = calm::dataset_meta_json(ds).dump();
  std::size_t payload = ds.mesh.size() + 2 * 3 * 16;  // mesh + S*T*N floats
  std::size_t expected = calm::io::aligned_header_size(json.size()) + 4 * payload;
  REQUIRE(fs::file_size(path) == expected);
}

TEST_CASE("corrupted containers are rejected with typed errors") {
  auto dir = temp_dir();
  auto path = (dir / "victim.calmds").string();
  auto ds = calm::gen_advection_1d(2, 0, 8, 3, 0.2, 0.1, 13);
  calm::save_dataset(ds, path);

  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("BOGUS!!!", 8);
    f.close();
    REQUIRE_THROWS_AS(calm::load_dataset(path), calm::FormatError);
  }

  SECTION("truncation") {
    auto bytes = fs::file_size(path);
    fs::resize_file(path, bytes - 10);
    REQUIRE_THROWS_AS(calm::load_dataset(path), calm::FormatError);
  }

  SECTION("payload/metadata disagreement") {
    // append a stray frame of floats
    std::ofstream f(path, std::ios::binary | std::ios::app);
    std::vector<float> junk(8, 1.f);
    f.write(reinterpret_cast<const char*>(junk.data()), 32);
    f.close();
    REQUIRE_THROWS_AS(calm::load_dataset(path), calm::FormatError);
  }

  SECTION("missing file") {
    REQUIRE_THROWS_AS(calm::load_dataset((dir / "nope.calmds").string()), calm::FormatError);
  }
}

TEST_CASE("model checkpoints restore every tensor bit-exactly") {
  auto ds = calm::gen_advection_1d(4, 1, 24, 4, 0.25, 0.05, 21);
  calm::ProcessorConfig pc;
  pc.blocks = 1;
  pc.rff_per_dim = 3;
  auto model = calm::CalmPdeModel<float>::build(tiny_codec(), pc, ds, 99);

  auto path = (temp_dir() / "model.calmck").string();
  nlohmann::json extra;
  extra["epoch"] = 5;
  calm::save_model_checkpoint(path, model, extra);

  auto ck = calm::load_checkpoint<float>(path);
  REQUIRE(ck.meta.at("epoch") == 5);
  auto restored = calm::load_model_checkpoint(ck, ds);

  auto a = model.params();
  auto b = restored.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    INFO(a[i].name);
    REQUIRE(a[i].slot->values() == b[i].slot->values());
    REQUIRE(a[i].slot->requires_grad() == b[i].slot->requires_grad());
  }
  REQUIRE(restored.stats.mean == model.stats.mean);
  REQUIRE(restored.stats.stddev == model.stats.stddev);

  SECTION("a second save produces identical bytes") {
    auto path2 = (temp_dir() / "model2.calmck").string();
    calm::save_model_checkpoint(path2, restored, extra);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);
  }

  SECTION("channel mismatch is rejected") {
    auto ds2 = calm::gen_rotating_2d(2, 1, 36, 3, 1.0, 0.1, 5, false);
    REQUIRE_THROWS_AS(calm::load_model_checkpoint(ck, ds2), calm::ConfigError);
  }

  SECTION("missing tensors are rejected") {
    auto ck2 = ck;
    ck2.tensors.erase("enc.0.w1");
    REQUIRE_THROWS_AS(calm::load_model_checkpoint(ck2, ds), calm::FormatError);
  }
}

TEST_CASE("checkpoint magic differs from dataset magic") {
  auto ds = calm::gen_advection_1d(2, 0, 8, 3, 0.2, 0.1, 33);
  auto path = (temp_dir() / "xmagic.calmds").string();
  calm::save_dataset(ds, path);
  REQUIRE_THROWS_AS(calm::load_checkpoint<float>(path), calm::FormatError);
}
