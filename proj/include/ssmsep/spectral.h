// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef SSMSEP_SPECTRAL_H_
#define SSMSEP_SPECTRAL_H_

#include <filesystem>
#include <span>
#include <vector>

#include "ssmsep/autograd.h"
#include "ssmsep/fft.h"
#include "ssmsep/tensor.h"

namespace ssmsep {

struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = 16000;

  std::size_t size() const noexcept { return samples.size(); }
  double seconds() const noexcept { return double(samples.size()) / sample_rate; }
  // Throws DomainError on a non-finite sample or a non-positive rate.
  void validate() const;
};

enum class WindowType { kHann, kRect };

struct StftConfig {
  std::size_t window_len = 512;
  std::size_t hop = 128;
  std::size_t fft_size = 512;
  WindowType window = WindowType::kHann;

  std::size_t bins() const noexcept { return fft_size / 2 + 1; }
};

// data is [2, F, frames]: real plane then imaginary plane.
template <typename T>
struct Spectrogram {
  Tensor<T> data;
  StftConfig config;
  int sample_rate = 16000;

  std::size_t bins() const { return data.dim(1); }
  std::size_t frames() const { return data.dim(2); }
};

// Center-padded STFT with reflect padding of fft_size/2 on both ends and the
// window centered inside each fft frame. Arithmetic runs in double for every
// T. Synthesis divides the overlap-add by the summed squared window.
template <typename T>
class Stft {
 public:
  // Throws ConfigError for hop > window_len, window_len > fft_size, or a
  // non-power-of-two fft_size.
  explicit Stft(StftConfig config);

  const StftConfig& config() const noexcept { return config_; }
  std::size_t bins() const noexcept { return config_.bins(); }
  // Frame count for a signal of `length` samples (length >= 1).
  std::size_t frames(std::size_t length) const;
  // Length-fft_size analysis window (zero outside the centered window_len).
  std::span<const double> window() const noexcept { return window_; }

  Tensor<T> analyze(std::span<const T> x) const;
  // Throws ConfigError when a covered output sample has a zero denominator.
  std::vector<T> synthesize(const Tensor<T>& spec, std::size_t length) const;
  // Adjoint of synthesize: maps d(loss)/d(audio) to d(loss)/d(spec).
  Tensor<T> synthesize_adjoint(std::span<const T> dy, std::size_t frames) const;

 private:
  std::size_t pad() const noexcept { return config_.fft_size / 2; }
  // Summed squared window over padded positions covered by `frames` frames.
  std::vector<double> window_sum_sq(std::size_t frames) const;

  StftConfig config_;
  Fft<double> fft_;
  std::vector<double> window_;
};

std::vector<double> hann_periodic(std::size_t n);

Spectrogram<float> stft(const AudioBuffer& x, const StftConfig& config);
AudioBuffer istft(const Spectrogram<float>& s, std::size_t original_len);

namespace ag {

// Differentiable synthesis: spec [2, F, frames] -> audio [length].
template <typename T>
Var<T> istft(const Stft<T>& stft, const Var<T>& spec, std::size_t length);

}  // namespace ag

// Mono WAV I/O. Reads PCM16 and IEEE float32; stereo and other encodings
// raise IoError.
enum class WavFormat { kPcm16, kFloat32 };

AudioBuffer read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio,
               WavFormat format = WavFormat::kFloat32);

}  // namespace ssmsep

#endif  // SSMSEP_SPECTRAL_H_
