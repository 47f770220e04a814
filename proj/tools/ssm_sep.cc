// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// ssm-sep: data generation, training, separation, benchmarking and
// self-checks. Exit codes: 0 success, 1 check failure, 2 bad input,
// 3 contract mismatch.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssmsep/checks.h"
#include "ssmsep/errors.h"
#include "ssmsep/mixgen.h"
#include "ssmsep/separator.h"
#include "ssmsep/train.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssmsep;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitBadInput = 2;
constexpr int kExitContract = 3;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  std::string precision = "f32";
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

json config_or_empty(const Globals& g) { return g.config.empty() ? json::object() : read_json(g.config); }

fs::path config_dir(const Globals& g) {
  return g.config.empty() ? fs::current_path() : fs::absolute(g.config).parent_path();
}

// A config is either {"model": {...}, ...} or a bare model object.
ModelConfig model_from(const json& j) {
  if (j.contains("model")) return ModelConfig::from_json(j["model"].dump());
  return ModelConfig::from_json(j.dump());
}

template <typename V>
void take(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for ") + key);
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* name) { return k == name; }))
      throw ConfigError(std::string(where) + ": unknown key " + k);
}

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

AudioBuffer from_vector(const std::vector<double>& x, int rate) {
  AudioBuffer a;
  a.sample_rate = rate;
  a.samples.assign(x.begin(), x.end());
  return a;
}

std::vector<double> to_vector(const AudioBuffer& a) { return {a.samples.begin(), a.samples.end()}; }

// Runs fn(i) for i < n on `jobs` threads; the first exception is rethrown.
void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max(1u, std::min<unsigned>(jobs, unsigned(std::max<std::size_t>(n, 1))));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------- datagen

struct DatagenItem {
  std::vector<AudioBuffer> refs;
  AudioBuffer mix;
  json record;
};

int cmd_datagen(const Globals& g, const fs::path& out) {
  const json cfg = config_or_empty(g);
  reject_unknown(cfg, {"scenes", "toy"}, "datagen config");
  const fs::path base = config_dir(g);
  std::vector<std::function<DatagenItem()>> jobs;

  if (cfg.contains("scenes")) {
    if (!cfg["scenes"].is_array()) throw ConfigError("datagen config: scenes must be an array");
    for (std::size_t i = 0; i < cfg["scenes"].size(); ++i) {
      auto spec = SceneSpec::from_json(cfg["scenes"][i].dump());
      if (!cfg["scenes"][i].contains("seed")) spec.seed = g.seed + i;
      jobs.push_back([spec, base] {
        const AudioLoader load = [&](const std::string& p) {
          const fs::path path(p);
          return read_wav(path.is_absolute() ? path : base / path);
        };
        auto item = synthesize_scene(spec, load);
        DatagenItem d;
        d.mix = std::move(item.mixture);
        d.refs = std::move(item.references);
        json sources = json::array();
        for (const auto& p : item.placements) {
          const char* kind = p.kind == StemKind::kSpeech ? "speech" : p.kind == StemKind::kEffect ? "effect" : "music";
          sources.push_back({{"kind", kind}, {"file", p.file}, {"speaker", p.speaker}, {"ir", p.ir},
                             {"onset", p.onset}, {"length", p.length}, {"lufs", p.target_lufs}, {"gain", p.gain}});
        }
        d.record = {{"seed", spec.seed}, {"speakers", item.speakers}, {"clipped", item.clipped},
                    {"sources", sources}, {"scene", json::parse(spec.to_json())}};
        return d;
      });
    }
  }
  if (cfg.contains("toy")) {
    const json& t = cfg["toy"];
    reject_unknown(t, {"items", "seconds", "sample_rate"}, "datagen toy");
    std::size_t items = 20;
    double seconds = 1.0;
    int rate = 8000;
    take(t, "items", items);
    take(t, "seconds", seconds);
    take(t, "sample_rate", rate);
    auto data = std::make_shared<std::vector<Example>>(make_band_noise_dataset(items, seconds, rate, g.seed));
    for (std::size_t i = 0; i < items; ++i)
      jobs.push_back([data, i, rate, seed = g.seed] {
        DatagenItem d;
        d.mix = from_vector((*data)[i].mix, rate);
        for (const auto& r : (*data)[i].refs) d.refs.push_back(from_vector(r, rate));
        d.record = {{"seed", seed}, {"toy_index", i}};
        return d;
      });
  }

  fs::create_directories(out / "mix");
  fs::create_directories(out / "refs");
  std::vector<DatagenItem> results(jobs.size());
  parallel_for(jobs.size(), g.jobs, [&](std::size_t i) {
    results[i] = jobs[i]();
    char id[32];
    std::snprintf(id, sizeof id, "item_%04zu", i);
    const std::string mix_rel = std::string("mix/") + id + ".wav";
    write_wav(out / mix_rel, results[i].mix);
    json refs = json::array();
    for (std::size_t j = 0; j < results[i].refs.size(); ++j) {
      const std::string rel = std::string("refs/") + id + "_s" + std::to_string(j) + ".wav";
      write_wav(out / rel, results[i].refs[j]);
      refs.push_back(rel);
    }
    results[i].record["id"] = id;
    results[i].record["mix"] = mix_rel;
    results[i].record["refs"] = refs;
  });

  std::ofstream manifest(out / "manifest.jsonl");
  if (!manifest) throw IoError("cannot write " + (out / "manifest.jsonl").string());
  for (const auto& r : results) manifest << r.record.dump() << '\n';
  std::cout << "wrote " << results.size() << " items to " << out.string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ train

std::vector<Example> load_manifest(const fs::path& path, int sample_rate) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    if (!rec.contains("mix") || !rec.contains("refs")) throw ConfigError(path.string() + ": record lacks mix/refs");
    Example ex;
    const auto mix = read_wav(base / rec["mix"].get<std::string>());
    if (mix.sample_rate != sample_rate)
      throw ContractError("manifest audio is " + std::to_string(mix.sample_rate) + " Hz, model expects " +
                          std::to_string(sample_rate));
    ex.mix = to_vector(mix);
    for (const auto& r : rec["refs"]) ex.refs.push_back(to_vector(read_wav(base / r.get<std::string>())));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Example> load_data(const json& j, const fs::path& base, int sample_rate, std::uint64_t seed,
                               const char* where) {
  reject_unknown(j, {"manifest", "toy"}, where);
  if (j.contains("manifest")) {
    const fs::path p(j["manifest"].get<std::string>());
    return load_manifest(p.is_absolute() ? p : base / p, sample_rate);
  }
  if (j.contains("toy")) {
    reject_unknown(j["toy"], {"items", "seconds"}, where);
    std::size_t items = 20;
    double seconds = 1.0;
    take(j["toy"], "items", items);
    take(j["toy"], "seconds", seconds);
    return make_band_noise_dataset(items, seconds, sample_rate, seed);
  }
  throw ConfigError(std::string(where) + ": needs manifest or toy");
}

TrainConfig train_config_from(const json& j, int sample_rate, std::uint64_t seed) {
  TrainConfig t;
  t.seed = seed;
  if (j.is_null()) return t;
  reject_unknown(j,
                 {"epochs", "batch", "crop_s", "lr", "clip_norm", "halve_patience", "stop_patience",
                  "time_limit_s", "shuffle", "target_sisnri"},
                 "train config");
  double crop_s = 0;
  take(j, "epochs", t.epochs);
  take(j, "batch", t.batch);
  take(j, "crop_s", crop_s);
  take(j, "lr", t.adam.lr);
  take(j, "clip_norm", t.adam.clip_norm);
  take(j, "halve_patience", t.halve_patience);
  take(j, "stop_patience", t.stop_patience);
  take(j, "time_limit_s", t.time_limit_s);
  take(j, "shuffle", t.shuffle);
  take(j, "target_sisnri", t.target_sisnri);
  t.crop_samples = std::size_t(std::lround(crop_s * sample_rate));
  return t;
}

template <typename T>
int run_train(const Globals& g, const fs::path& out) {
  const json cfg = config_or_empty(g);
  reject_unknown(cfg, {"model", "train", "data", "val"}, "train config");
  const auto model_cfg = model_from(cfg.contains("model") ? cfg : json{{"model", json::object()}});
  model_cfg.validate();
  const auto tc = train_config_from(cfg.value("train", json()), model_cfg.sample_rate, g.seed);
  const fs::path base = config_dir(g);
  if (!cfg.contains("data")) throw ConfigError("train config: missing data");
  const auto train = load_data(cfg["data"], base, model_cfg.sample_rate, g.seed, "data");
  const auto val = cfg.contains("val") ? load_data(cfg["val"], base, model_cfg.sample_rate, g.seed + 1, "val")
                                       : std::vector<Example>{};

  SeparatorWeights<T> w(model_cfg);
  w.init(g.seed);
  Separator<T> model(std::move(w));
  fs::create_directories(out);
  std::printf("epoch  train_loss  val_loss  val_sisnri        lr\n");
  const auto result = train_toy(model, train, val, tc, [](const EpochMetrics& m) {
    std::printf("%5zu  %10.4f  %8.4f  %10.3f  %8.2e\n", m.epoch, m.train_loss, m.val_loss, m.val_sisnri, m.lr);
    std::fflush(stdout);
  });
  write_metrics_csv(out / "metrics.csv", result.history);
  save_checkpoint(out / "model.spmb", model.weights());
  std::printf("stopped: %s; checkpoint %s\n", result.stop_reason.c_str(), (out / "model.spmb").c_str());
  return kExitOk;
}

// ------------------------------------------------------------------- init

template <typename T>
int run_init(const Globals& g, const fs::path& out) {
  const auto cfg = model_from(config_or_empty(g));
  SeparatorWeights<T> w(cfg);
  w.init(g.seed);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(out, w);
  const auto c = count_params_macs(cfg);
  std::printf("wrote %s: %zu parameters, %.2f GMAC/s\n", out.c_str(), c.params, c.macs_per_second / 1e9);
  return kExitOk;
}

// --------------------------------------------------------------- separate

template <typename T>
int run_separate(const fs::path& checkpoint, const fs::path& input, const fs::path& out) {
  Separator<T> model(load_checkpoint<T>(checkpoint));
  const auto mix = read_wav(input);
  if (mix.sample_rate != model.config().sample_rate)
    throw ContractError("input is " + std::to_string(mix.sample_rate) + " Hz but the checkpoint expects " +
                        std::to_string(model.config().sample_rate) + " Hz");
  const auto outs = model.separate(mix);
  fs::create_directories(out);
  for (std::size_t j = 0; j < outs.size(); ++j) {
    const auto path = out / (input.stem().string() + "_spk" + std::to_string(j) + ".wav");
    write_wav(path, outs[j]);
    std::printf("%s\n", path.c_str());
  }
  return kExitOk;
}

// ------------------------------------------------------------------ bench

std::size_t proc_status_kb(const char* key) {
  std::ifstream in("/proc/self/status");
  std::string line;
  const std::string k(key);
  while (std::getline(in, line))
    if (line.rfind(k, 0) == 0) return std::stoull(line.substr(k.size() + 1));
  return 0;
}

// Resets the kernel's peak-RSS counter; false when unsupported.
bool reset_peak_rss() {
  std::ofstream f("/proc/self/clear_refs");
  if (!f) return false;
  f << "5";
  return bool(f.flush());
}

// Least-squares slope of log(y) on log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

template <typename T>
int run_bench(const Globals& g, const std::string& checkpoint, std::vector<double> lengths, std::size_t runs,
              const fs::path& out) {
  if (runs < 3) throw ConfigError("bench: runs must be at least 3");
  if (lengths.empty()) throw ConfigError("bench: no lengths");
  if (!std::is_sorted(lengths.begin(), lengths.end())) throw ConfigError("bench: lengths must be ascending");
  if (lengths.front() <= 0) throw ConfigError("bench: lengths must be positive");

  auto weights = [&] {
    if (!checkpoint.empty()) return load_checkpoint<T>(checkpoint);
    SeparatorWeights<T> w(model_from(config_or_empty(g)));
    w.init(g.seed);
    return w;
  }();
  Separator<T> model(std::move(weights));
  const int rate = model.config().sample_rate;
  const std::string hash = fnv1a_hex(model.config().to_json());
  const bool peak_resettable = reset_peak_rss();

  std::ofstream csv(out);
  if (!csv) throw IoError("cannot write " + out.string());
  csv << "length_s,wall_s,peak_rss_bytes,activation_bytes,runs,config_hash\n";
  std::printf("length_s    wall_s  peak_rss_mb  activation_mb\n");
  std::mt19937_64 rng(g.seed);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::vector<double> xs, times, mems;
  for (double len : lengths) {
    AudioBuffer x;
    x.sample_rate = rate;
    x.samples.resize(std::size_t(std::lround(len * rate)));
    for (auto& v : x.samples) v = noise(rng);
    reset_peak_rss();
    const std::size_t base_kb = proc_status_kb("VmRSS:");
    std::vector<double> wall;
    for (std::size_t r = 0; r < runs; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto y = model.separate(x);
      wall.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::nth_element(wall.begin(), wall.begin() + long(runs / 2), wall.end());
    const double median = wall[runs / 2];
    const std::size_t peak_kb = proc_status_kb("VmHWM:");
    const double peak = double(peak_kb) * 1024.0;
    const double activation = double(peak_kb > base_kb ? peak_kb - base_kb : 0) * 1024.0;
    csv << len << ',' << median << ',' << std::size_t(peak) << ',' << std::size_t(activation) << ',' << runs << ','
        << hash << '\n';
    std::printf("%8.2f  %8.3f  %11.1f  %13.1f\n", len, median, peak / 1048576.0, activation / 1048576.0);
    xs.push_back(len);
    times.push_back(median);
    mems.push_back(activation);
  }
  if (xs.size() >= 2) {
    std::printf("time exponent %.3f\n", loglog_slope(xs, times));
    if (std::all_of(mems.begin(), mems.end(), [](double m) { return m > 0; }))
      std::printf("memory exponent %.3f%s\n", loglog_slope(xs, mems),
                  peak_resettable ? "" : " (peak counter not resettable; growth measured from a running peak)");
  } else {
    std::printf("single length: exponent fit skipped\n");
  }
  return kExitOk;
}

// ------------------------------------------------------------------ check

int cmd_check(const Globals& g, bool quick, const std::string& mutate) {
  CheckOptions o;
  o.seed = g.seed;
  o.precision = g.precision == "f64" ? Precision::kF64 : Precision::kF32;
  if (!mutate.empty()) {
    if (mutate != "scan-off-by-one") throw ConfigError("unknown mutation " + mutate);
    o.scan_off_by_one = true;
  }
  if (quick) {
    o.scan_instances = 100;
    o.stft_signals = 10;
    o.pit_instances = 100;
  }
  const auto results = run_all_checks(o);
  std::cout << "precision " << g.precision << "\n" << format_checks(results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.pass; });
  std::cout << (ok ? "all checks passed\n" : "check FAILED\n");
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech separation with bidirectional selective state space models"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--jobs", g.jobs, "Worker threads for datagen")->check(CLI::PositiveNumber);
  app.add_option("--precision", g.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  std::string out, checkpoint, input, mutate;
  std::vector<double> lengths{1, 2, 3, 4, 5, 6, 7, 8};
  std::size_t runs = 3;
  bool quick = false;

  auto* datagen = app.add_subcommand("datagen", "Synthesize mixtures from scene specs");
  datagen->add_option("--out", out, "Output directory")->required();
  auto* train = app.add_subcommand("train", "Train a separator");
  train->add_option("--out", out, "Output directory")->required();
  auto* init = app.add_subcommand("init", "Write a randomly initialized checkpoint");
  init->add_option("--out", out, "Checkpoint path")->required();
  auto* separate = app.add_subcommand("separate", "Separate a mono WAV file");
  separate->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  separate->add_option("--input", input, "Input WAV")->required();
  separate->add_option("--out", out, "Output directory")->required();
  auto* bench = app.add_subcommand("bench", "Time inference over input lengths");
  bench->add_option("--checkpoint", checkpoint, "Checkpoint (default: random weights from --config)");
  bench->add_option("--lengths", lengths, "Input lengths in seconds, ascending")->delimiter(',');
  bench->add_option("--runs", runs, "Timed runs per length");
  bench->add_option("--out", out, "CSV path")->default_val("bench.csv");
  auto* check = app.add_subcommand("check", "Run the invariant suite");
  check->add_flag("--quick", quick, "Fewer random instances");
  check->add_option("--mutate", mutate, "Inject a known defect")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitBadInput;
  }

  const bool f64 = g.precision == "f64";
  try {
    if (*datagen) return cmd_datagen(g, out);
    if (*train) return f64 ? run_train<double>(g, out) : run_train<float>(g, out);
    if (*init) return f64 ? run_init<double>(g, out) : run_init<float>(g, out);
    if (*separate)
      return f64 ? run_separate<double>(checkpoint, input, out) : run_separate<float>(checkpoint, input, out);
    if (*bench)
      return f64 ? run_bench<double>(g, checkpoint, lengths, runs, out) : run_bench<float>(g, checkpoint, lengths, runs, out);
    if (*check) return cmd_check(g, quick, mutate);
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
  return kExitOk;
}
