// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/mixgen.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "json.hpp"
#include "ssmsep/errors.h"

namespace ssmsep {

namespace {

using nlohmann::json;

constexpr int kMaxPlacementTries = 1000;

struct Interval {
  std::size_t lo, hi;  // [lo, hi)
  bool overlaps(const Interval& o) const { return lo < o.hi && o.lo < hi; }
};

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* name) { return k == name; }))
      throw ConfigError(where + ": unknown key " + k);
}

template <typename V>
void read_opt(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError(where + ": bad value for " + key);
  }
}

SourceSpec source_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  reject_unknown(j, {"file", "speaker", "onset_s", "lufs", "ir"}, where);
  SourceSpec s;
  read_opt(j, "file", s.file, where);
  read_opt(j, "speaker", s.speaker, where);
  read_opt(j, "onset_s", s.onset_s, where);
  read_opt(j, "lufs", s.lufs, where);
  read_opt(j, "ir", s.ir, where);
  if (s.file.empty()) throw ConfigError(where + ": missing file");
  return s;
}

json source_to_json(const SourceSpec& s) {
  return {{"file", s.file}, {"speaker", s.speaker}, {"onset_s", s.onset_s}, {"lufs", s.lufs}, {"ir", s.ir}};
}

class SourceCache {
 public:
  SourceCache(const AudioLoader& load, int rate) : load_(load), rate_(rate) {}

  const AudioBuffer& get(const std::string& path) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    AudioBuffer a;
    try {
      a = load_ ? load_(path) : read_wav(path);
    } catch (const std::exception& e) {
      throw GenerationError("cannot load source " + path + ": " + e.what());
    }
    if (a.sample_rate != rate_)
      throw GenerationError("source " + path + " is " + std::to_string(a.sample_rate) + " Hz, scene is " +
                            std::to_string(rate_) + " Hz");
    if (a.samples.empty()) throw GenerationError("source " + path + " is empty");
    return cache_.emplace(path, std::move(a)).first->second;
  }

 private:
  const AudioLoader& load_;
  int rate_;
  std::map<std::string, AudioBuffer> cache_;
};

double category_default(const SceneSpec& s, StemKind kind) {
  switch (kind) {
    case StemKind::kSpeech: return s.speech_lufs;
    case StemKind::kEffect: return s.effect_lufs;
    case StemKind::kMusic: return s.music_lufs;
  }
  return 0;
}

}  // namespace

SceneSpec SceneSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  const std::string where = "scene";
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  reject_unknown(j,
                 {"duration_s", "sample_rate", "speech", "effects", "music", "speech_lufs", "effect_lufs",
                  "music_lufs", "jitter_lu", "seed"},
                 where);
  SceneSpec s;
  read_opt(j, "duration_s", s.duration_s, where);
  read_opt(j, "sample_rate", s.sample_rate, where);
  read_opt(j, "speech_lufs", s.speech_lufs, where);
  read_opt(j, "effect_lufs", s.effect_lufs, where);
  read_opt(j, "music_lufs", s.music_lufs, where);
  read_opt(j, "jitter_lu", s.jitter_lu, where);
  read_opt(j, "seed", s.seed, where);
  for (const char* key : {"speech", "effects"}) {
    if (!j.contains(key)) continue;
    if (!j[key].is_array()) throw ConfigError(where + ": " + key + " must be an array");
    auto& dst = std::string(key) == "speech" ? s.speech : s.effects;
    for (std::size_t i = 0; i < j[key].size(); ++i)
      dst.push_back(source_from_json(j[key][i], where + "." + key + "[" + std::to_string(i) + "]"));
  }
  if (j.contains("music") && !j["music"].is_null()) s.music = source_from_json(j["music"], where + ".music");
  return s;
}

std::string SceneSpec::to_json() const {
  json j = {{"duration_s", duration_s}, {"sample_rate", sample_rate}, {"speech_lufs", speech_lufs},
            {"effect_lufs", effect_lufs}, {"music_lufs", music_lufs}, {"jitter_lu", jitter_lu},
            {"seed", seed}};
  j["speech"] = json::array();
  for (const auto& s : speech) j["speech"].push_back(source_to_json(s));
  j["effects"] = json::array();
  for (const auto& s : effects) j["effects"].push_back(source_to_json(s));
  if (music) j["music"] = source_to_json(*music);
  return j.dump();
}

MixtureItem synthesize_scene(const SceneSpec& spec, const AudioLoader& load) {
  if (spec.duration_s <= 0 || spec.sample_rate <= 0) throw ConfigError("scene: duration and rate must be positive");
  if (spec.jitter_lu < 0) throw ConfigError("scene: jitter must be non-negative");
  const auto n = std::size_t(std::lround(spec.duration_s * spec.sample_rate));
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> jitter(-spec.jitter_lu, spec.jitter_lu);
  // One draw per category so each category's average level moves together.
  const double jit[3] = {jitter(rng), jitter(rng), jitter(rng)};

  SourceCache cache(load, spec.sample_rate);
  MixtureItem item;
  item.seed = spec.seed;
  std::vector<double> mix(n, 0.0);
  std::vector<std::vector<double>> refs;
  std::map<std::string, std::vector<Interval>> busy;

  auto place = [&](const SourceSpec& src, StemKind kind, std::size_t index) {
    const auto& dry = cache.get(src.file);
    const double target = (src.lufs != 0 ? src.lufs : category_default(spec, kind)) + jit[int(kind)];
    LevelResult leveled;
    try {
      leveled = set_loudness(dry, target);
    } catch (const std::exception& e) {
      throw GenerationError("cannot level source " + src.file + ": " + e.what());
    }
    AudioBuffer wet = src.ir.empty() ? std::move(leveled.audio) : convolve_ir(leveled.audio, cache.get(src.ir));

    std::string speaker = src.speaker;
    if (kind == StemKind::kSpeech && speaker.empty()) speaker = "speech" + std::to_string(index);
    const std::size_t len = std::min(wet.size(), n);
    std::size_t onset = 0;
    auto& taken = busy[kind == StemKind::kSpeech ? speaker : std::string()];
    auto free_at = [&](std::size_t at) {
      const Interval iv{at, std::min(n, at + len)};
      return kind != StemKind::kSpeech ||
             std::none_of(taken.begin(), taken.end(), [&](const Interval& o) { return iv.overlaps(o); });
    };
    if (src.onset_s >= 0) {
      onset = std::size_t(std::lround(src.onset_s * spec.sample_rate));
      if (onset >= n) throw GenerationError("source " + src.file + " starts after the scene ends");
      if (!free_at(onset))
        throw GenerationError("speaker " + speaker + ": segment at " + std::to_string(src.onset_s) +
                              " s overlaps another segment of the same speaker");
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - len);
      int tries = 0;
      do onset = pick(rng);
      while (!free_at(onset) && ++tries < kMaxPlacementTries);
      if (tries == kMaxPlacementTries)
        throw GenerationError("speaker " + speaker + ": no non-overlapping placement for " + src.file);
    }
    const std::size_t used = std::min(len, n - onset);
    taken.push_back({onset, onset + used});

    std::vector<double> stem(n, 0.0);
    for (std::size_t i = 0; i < used; ++i) stem[onset + i] = wet.samples[i];
    for (std::size_t i = 0; i < n; ++i) mix[i] += stem[i];
    if (kind == StemKind::kSpeech) {
      auto it = std::find(item.speakers.begin(), item.speakers.end(), speaker);
      if (it == item.speakers.end()) {
        item.speakers.push_back(speaker);
        refs.emplace_back(n, 0.0);
        it = item.speakers.end() - 1;
      }
      auto& ref = refs[std::size_t(it - item.speakers.begin())];
      for (std::size_t i = 0; i < n; ++i) ref[i] += stem[i];
    }

    AudioBuffer out;
    out.sample_rate = spec.sample_rate;
    out.samples.assign(stem.begin(), stem.end());
    item.stems.push_back(std::move(out));
    item.placements.push_back({kind, src.file, speaker, src.ir, onset, used, target, leveled.gain});
  };

  for (std::size_t i = 0; i < spec.speech.size(); ++i) place(spec.speech[i], StemKind::kSpeech, i);
  for (std::size_t i = 0; i < spec.effects.size(); ++i) place(spec.effects[i], StemKind::kEffect, i);
  if (spec.music) place(*spec.music, StemKind::kMusic, 0);

  item.mixture.sample_rate = spec.sample_rate;
  item.mixture.samples.assign(mix.begin(), mix.end());
  for (double v : mix) item.clipped = item.clipped || std::abs(v) > 1.0;
  for (auto& r : refs) {
    AudioBuffer b;
    b.sample_rate = spec.sample_rate;
    b.samples.assign(r.begin(), r.end());
    item.references.push_back(std::move(b));
  }
  return item;
}

}  // namespace ssmsep
