// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cmath>
#include <complex>
#include <numbers>

#include "ssmsep/errors.h"
#include "ssmsep/fft.h"
#include "ssmsep/mixgen.h"

namespace ssmsep {

namespace {

// Analog prototype of the K-weighting curve, mapped per rate through the
// bilinear transform. At 48 kHz this reproduces the tabulated coefficients.
constexpr double kShelfHz = 1681.974450955533;
constexpr double kShelfGainDb = 3.999843853973347;
constexpr double kShelfQ = 0.7071752369554196;
constexpr double kShelfVb = 0.4996667741545416;  // exponent for the band gain
constexpr double kHighPassHz = 38.13547087602444;
constexpr double kHighPassQ = 0.5003270373238773;

constexpr double kBlockS = 0.4;
constexpr double kStepS = 0.1;
constexpr double kAbsoluteGate = -70.0;
constexpr double kRelativeGate = -10.0;
constexpr double kOffset = -0.691;

std::vector<double> filter(const Biquad& f, std::span<const double> x) {
  std::vector<double> y(x.size());
  double s1 = 0, s2 = 0;  // transposed direct form II state
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double out = f.b[0] * x[i] + s1;
    s1 = f.b[1] * x[i] - f.a[1] * out + s2;
    s2 = f.b[2] * x[i] - f.a[2] * out;
    y[i] = out;
  }
  return y;
}

double block_loudness(double mean_square) { return kOffset + 10.0 * std::log10(mean_square); }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<double> to_double(const AudioBuffer& x) { return {x.samples.begin(), x.samples.end()}; }

AudioBuffer to_buffer(const std::vector<double>& x, int rate) {
  AudioBuffer out;
  out.sample_rate = rate;
  out.samples.assign(x.begin(), x.end());
  return out;
}

}  // namespace

std::array<Biquad, 2> k_weighting(int sample_rate) {
  if (sample_rate <= 0) throw ConfigError("k_weighting: sample rate must be positive");
  const double fs = sample_rate;
  std::array<Biquad, 2> out;

  double k = std::tan(std::numbers::pi * kShelfHz / fs);
  const double vh = std::pow(10.0, kShelfGainDb / 20.0);
  const double vb = std::pow(vh, kShelfVb);
  double a0 = 1.0 + k / kShelfQ + k * k;
  out[0].b = {(vh + vb * k / kShelfQ + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / kShelfQ + k * k) / a0};
  out[0].a = {1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / kShelfQ + k * k) / a0};

  k = std::tan(std::numbers::pi * kHighPassHz / fs);
  a0 = 1.0 + k / kHighPassQ + k * k;
  out[1].b = {1.0, -2.0, 1.0};
  out[1].a = {1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / kHighPassQ + k * k) / a0};
  return out;
}

double measure_lufs(std::span<const double> x, int sample_rate) {
  const auto block = std::size_t(std::lround(kBlockS * sample_rate));
  const auto step = std::size_t(std::lround(kStepS * sample_rate));
  if (x.size() < block)
    throw ContractError("measure_lufs: need at least one 400 ms block, got " + std::to_string(x.size()) +
                        " samples");
  const auto stages = k_weighting(sample_rate);
  const auto y = filter(stages[1], filter(stages[0], x));

  std::vector<double> prefix(y.size() + 1, 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) prefix[i + 1] = prefix[i] + y[i] * y[i];
  const std::size_t count = (y.size() - block) / step + 1;
  std::vector<double> z(count);
  for (std::size_t j = 0; j < count; ++j) z[j] = (prefix[j * step + block] - prefix[j * step]) / double(block);

  double sum = 0;
  std::size_t kept = 0;
  for (double v : z)
    if (v > 0 && block_loudness(v) > kAbsoluteGate) {
      sum += v;
      ++kept;
    }
  if (kept == 0) return kLufsSilence;
  const double gate = block_loudness(sum / double(kept)) + kRelativeGate;

  sum = 0;
  kept = 0;
  for (double v : z)
    if (v > 0 && block_loudness(v) > kAbsoluteGate && block_loudness(v) > gate) {
      sum += v;
      ++kept;
    }
  return block_loudness(sum / double(kept));
}

double measure_lufs(const AudioBuffer& x) {
  const auto d = to_double(x);
  return measure_lufs(d, x.sample_rate);
}

LevelResult set_loudness(const AudioBuffer& x, double target_lufs) {
  const auto d = to_double(x);
  double measured = measure_lufs(d, x.sample_rate);
  if (measured == kLufsSilence) throw DomainError("set_loudness: input is silent");
  double gain = std::pow(10.0, (target_lufs - measured) / 20.0);
  // Blocks near the absolute gate can enter or leave the average once
  // scaled; one correction pass absorbs that.
  std::vector<double> scaled(d.size());
  for (int pass = 0; pass < 3; ++pass) {
    for (std::size_t i = 0; i < d.size(); ++i) scaled[i] = d[i] * gain;
    measured = measure_lufs(scaled, x.sample_rate);
    if (std::abs(measured - target_lufs) < 1e-3) break;
    gain *= std::pow(10.0, (target_lufs - measured) / 20.0);
  }
  LevelResult r;
  r.gain = gain;
  r.audio = to_buffer(scaled, x.sample_rate);
  for (double v : scaled) r.clipped = r.clipped || std::abs(v) > 1.0;
  return r;
}

std::vector<double> convolve(std::span<const double> x, std::span<const double> ir) {
  if (ir.empty()) throw ContractError("convolve: empty impulse response");
  const std::size_t n = x.size(), m = ir.size();
  std::vector<double> y(n, 0.0);
  if (n == 0) return y;
  if (m <= 64) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0;
      const std::size_t kmax = std::min(m, i + 1);
      for (std::size_t k = 0; k < kmax; ++k) acc += ir[k] * x[i - k];
      y[i] = acc;
    }
    return y;
  }
  // Only the first n outputs are kept, so the circular wrap must clear n.
  const std::size_t size = next_pow2(n + std::min(m, n) - 1);
  Fft<double> fft(size);
  std::vector<double> xa(size, 0.0), ha(size, 0.0), out(size);
  std::copy(x.begin(), x.end(), xa.begin());
  std::copy_n(ir.begin(), std::min(m, n), ha.begin());
  std::vector<std::complex<double>> xs(size / 2 + 1), hs(size / 2 + 1);
  fft.rfft(xa, xs);
  fft.rfft(ha, hs);
  for (std::size_t k = 0; k < xs.size(); ++k) xs[k] *= hs[k];
  fft.irfft(xs, out);
  std::copy_n(out.begin(), n, y.begin());
  return y;
}

AudioBuffer convolve_ir(const AudioBuffer& x, const AudioBuffer& ir) {
  if (ir.sample_rate != x.sample_rate)
    throw ContractError("convolve_ir: impulse response rate " + std::to_string(ir.sample_rate) +
                        " differs from signal rate " + std::to_string(x.sample_rate));
  return to_buffer(convolve(to_double(x), to_double(ir)), x.sample_rate);
}

}  // namespace ssmsep
