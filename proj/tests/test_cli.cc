// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ssmsep/spectral.h"

namespace fs = std::filesystem;
using namespace ssmsep;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args`, capturing stdout and stderr.
Run cli(const std::string& args, const fs::path& cwd) {
  const fs::path log = cwd / "cli.log";
  const std::string cmd =
      "cd '" + cwd.string() + "' && '" + SSMSEP_CLI_PATH + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

AudioBuffer noise(double seconds, int rate, std::uint64_t seed, double sd = 0.1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sd);
  AudioBuffer a;
  a.sample_rate = rate;
  a.samples.resize(std::size_t(seconds * rate));
  for (auto& v : a.samples) v = float(g(rng));
  return a;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("ssmsep_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const std::string kTinyModel =
    R"({"blocks": 1, "channels": 8, "module_hidden": 8, "bmamba_hidden": 8, "window": 128,
        "hop": 32, "fft_size": 128, "sample_rate": 8000, "heads": 2, "d_state": 4})";

}  // namespace

TEST_CASE("datagen: empty spec list gives an empty manifest") {
  TempDir d("empty");
  write_file(d.path / "cfg.json", R"({"scenes": []})");
  const auto r = cli("--config cfg.json datagen --out out", d.path);
  CHECK(r.code == 0);
  CHECK(fs::exists(d.path / "out/manifest.jsonl"));
  CHECK(fs::file_size(d.path / "out/manifest.jsonl") == 0);
}

TEST_CASE("datagen: three scenes give three mixtures and six references, reproducibly") {
  TempDir d("scenes");
  fs::create_directories(d.path / "src");
  write_wav(d.path / "src/a.wav", noise(1.0, 16000, 1));
  write_wav(d.path / "src/b.wav", noise(1.2, 16000, 2));
  write_wav(d.path / "src/fx.wav", noise(0.6, 16000, 3));
  std::string scenes;
  for (int i = 0; i < 3; ++i) {
    if (i) scenes += ",";
    scenes += R"({"duration_s": 2.0, "speech": [{"file": "src/a.wav", "speaker": "A", "onset_s": -1},
                  {"file": "src/b.wav", "speaker": "B", "onset_s": -1}],
                  "effects": [{"file": "src/fx.wav", "onset_s": -1}]})";
  }
  write_file(d.path / "cfg.json", R"({"scenes": [)" + scenes + "]}");
  auto r = cli("--config cfg.json --seed 3 --jobs 2 datagen --out out1", d.path);
  REQUIRE(r.code == 0);
  std::size_t mixes = 0, refs = 0;
  for (const auto& e : fs::directory_iterator(d.path / "out1/mix")) mixes += e.path().extension() == ".wav";
  for (const auto& e : fs::directory_iterator(d.path / "out1/refs")) refs += e.path().extension() == ".wav";
  CHECK(mixes == 3);
  CHECK(refs == 6);

  r = cli("--config cfg.json --seed 3 datagen --out out2", d.path);
  REQUIRE(r.code == 0);
  CHECK(slurp(d.path / "out1/manifest.jsonl") == slurp(d.path / "out2/manifest.jsonl"));
  CHECK(slurp(d.path / "out1/mix/item_0002.wav") == slurp(d.path / "out2/mix/item_0002.wav"));

  write_file(d.path / "bad.json", R"({"scenes": [{"duration_s": 2.0, "speech": [{"file": "missing.wav"}]}]})");
  CHECK(cli("--config bad.json datagen --out out3", d.path).code == 2);
  CHECK(cli("--config nowhere.json datagen --out out3", d.path).code == 2);
}

TEST_CASE("separate: J outputs of the input length, deterministic, rate-checked") {
  TempDir d("separate");
  write_file(d.path / "model.json", R"({"model": )" + kTinyModel + "}");
  REQUIRE(cli("--config model.json --seed 4 init --out model.spmb", d.path).code == 0);
  write_wav(d.path / "in.wav", noise(1.0, 8000, 5));
  auto r = cli("separate --checkpoint model.spmb --input in.wav --out a", d.path);
  REQUIRE(r.code == 0);
  for (int j = 0; j < 2; ++j) {
    const auto out = read_wav(d.path / ("a/in_spk" + std::to_string(j) + ".wav"));
    CHECK(out.size() == 8000);
    CHECK(out.sample_rate == 8000);
  }
  REQUIRE(cli("separate --checkpoint model.spmb --input in.wav --out b", d.path).code == 0);
  CHECK(slurp(d.path / "a/in_spk1.wav") == slurp(d.path / "b/in_spk1.wav"));

  AudioBuffer zero;
  zero.sample_rate = 8000;
  zero.samples.assign(8000, 0.0f);
  write_wav(d.path / "zero.wav", zero);
  REQUIRE(cli("separate --checkpoint model.spmb --input zero.wav --out z", d.path).code == 0);
  for (float v : read_wav(d.path / "z/zero_spk0.wav").samples) CHECK(std::abs(v) < 1e-6f);

  write_wav(d.path / "wide.wav", noise(1.0, 16000, 6));
  CHECK(cli("separate --checkpoint model.spmb --input wide.wav --out w", d.path).code == 3);
}

TEST_CASE("train then bench") {
  TempDir d("train");
  write_file(d.path / "train.json", R"({"model": )" + kTinyModel +
                                        R"(, "train": {"epochs": 2, "lr": 0.002}, "data": {"toy": {"items": 2, "seconds": 0.25}}})");
  auto r = cli("--config train.json --seed 1 train --out run", d.path);
  REQUIRE(r.code == 0);
  CHECK(slurp(d.path / "run/metrics.csv").rfind("epoch,train_loss,val_loss,val_sisnri,lr\n", 0) == 0);
  CHECK(fs::exists(d.path / "run/model.spmb"));

  r = cli("bench --checkpoint run/model.spmb --lengths 0.5 --runs 3 --out one.csv", d.path);
  CHECK(r.code == 0);
  CHECK(r.out.find("exponent fit skipped") != std::string::npos);
  r = cli("bench --checkpoint run/model.spmb --lengths 0.5,1 --runs 3 --out two.csv", d.path);
  CHECK(r.code == 0);
  CHECK(r.out.find("time exponent") != std::string::npos);
  CHECK(slurp(d.path / "two.csv").rfind("length_s,wall_s,peak_rss_bytes,activation_bytes,runs,config_hash\n", 0) == 0);
  CHECK(cli("bench --checkpoint run/model.spmb --lengths 1,0.5 --out x.csv", d.path).code == 2);
  CHECK(cli("bench --checkpoint run/model.spmb --runs 2 --out x.csv", d.path).code == 2);
}

TEST_CASE("check: passes, catches the injected scan defect, rejects bad flags") {
  TempDir d("check");
  auto r = cli("check --quick", d.path);
  CHECK(r.code == 0);
  CHECK(r.out.find("all checks passed") != std::string::npos);
  r = cli("--precision f64 check --quick", d.path);
  CHECK(r.code == 0);
  r = cli("check --quick --mutate scan-off-by-one", d.path);
  CHECK(r.code == 1);
  CHECK(r.out.find("scan_oracle        FAIL") != std::string::npos);
  CHECK(cli("--precision f16 check", d.path).code == 2);
  CHECK(cli("frobnicate", d.path).code == 2);
}
