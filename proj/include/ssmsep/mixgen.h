// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Loudness measurement and scene synthesis: leveled, reverberated speech,
// effects and music stems summed into a mixture with per-speaker references.

#ifndef SSMSEP_MIXGEN_H_
#define SSMSEP_MIXGEN_H_

#include <array>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssmsep/spectral.h"

namespace ssmsep {

// Returned by measure_lufs when every block falls below the absolute gate.
inline constexpr double kLufsSilence = -std::numeric_limits<double>::infinity();

struct Biquad {
  std::array<double, 3> b{1, 0, 0};
  std::array<double, 3> a{1, 0, 0};  // a[0] == 1
};

// The two K-weighting stages (high shelf, then high pass) for a sample rate.
std::array<Biquad, 2> k_weighting(int sample_rate);

// Gated integrated loudness: K-weighting, 400 ms blocks with 75% overlap,
// absolute gate at -70 LUFS and relative gate at -10 LU. Throws
// ContractError for input shorter than one block.
double measure_lufs(std::span<const double> x, int sample_rate);
double measure_lufs(const AudioBuffer& x);

struct LevelResult {
  AudioBuffer audio;
  double gain = 1;       // linear amplitude
  bool clipped = false;  // a sample exceeds +-1 (left in place)
};

// Scales `x` by one gain so it measures `target_lufs`. Throws DomainError on
// silent input.
LevelResult set_loudness(const AudioBuffer& x, double target_lufs);

// Linear convolution truncated to x.size(). Short responses run directly,
// long ones through one FFT. Throws ContractError on an empty response.
std::vector<double> convolve(std::span<const double> x, std::span<const double> ir);
AudioBuffer convolve_ir(const AudioBuffer& x, const AudioBuffer& ir);

enum class StemKind { kSpeech, kEffect, kMusic };

struct SourceSpec {
  std::string file;
  std::string speaker;    // speech only; segments of one speaker never overlap
  double onset_s = 0;     // negative: drawn from the scene seed
  double lufs = 0;        // 0 selects the category default
  std::string ir;         // empty: dry
};

struct SceneSpec {
  double duration_s = 10;
  int sample_rate = 16000;
  std::vector<SourceSpec> speech;
  std::vector<SourceSpec> effects;
  std::optional<SourceSpec> music;
  double speech_lufs = -17;
  double effect_lufs = -21;
  double music_lufs = -24;
  double jitter_lu = 2.0;  // uniform +- jitter, drawn once per category
  std::uint64_t seed = 0;

  static SceneSpec from_json(const std::string& text);
  std::string to_json() const;
};

struct PlacedStem {
  StemKind kind = StemKind::kSpeech;
  std::string file, speaker, ir;
  std::size_t onset = 0;  // samples
  std::size_t length = 0;
  double target_lufs = 0;
  double gain = 1;
};

struct MixtureItem {
  AudioBuffer mixture;
  std::vector<std::string> speakers;     // order of first appearance
  std::vector<AudioBuffer> references;   // reverberant speech per speaker
  std::vector<AudioBuffer> stems;        // every placed stem, full length
  std::vector<PlacedStem> placements;    // parallel to stems
  bool clipped = false;
  std::uint64_t seed = 0;
};

using AudioLoader = std::function<AudioBuffer(const std::string& path)>;

// Deterministic for a given spec. An empty loader reads WAV files. Throws
// GenerationError when a source is unusable or a speaker's segments cannot
// be placed without overlap.
MixtureItem synthesize_scene(const SceneSpec& spec, const AudioLoader& load = {});

}  // namespace ssmsep

#endif  // SSMSEP_MIXGEN_H_
