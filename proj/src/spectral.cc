// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/spectral.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "ssmsep/errors.h"

namespace ssmsep {

void AudioBuffer::validate() const {
  if (sample_rate <= 0) throw DomainError("audio: sample_rate must be positive");
  for (float v : samples)
    if (!std::isfinite(v)) throw DomainError("audio: non-finite sample");
}

std::vector<double> hann_periodic(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
  return w;
}

namespace {

StftConfig checked(StftConfig c) {
  if (c.hop == 0) throw ConfigError("stft: hop must be positive");
  if (c.hop > c.window_len) throw ConfigError("stft: hop exceeds window_len");
  if (c.window_len > c.fft_size) throw ConfigError("stft: window_len exceeds fft_size");
  if (!is_power_of_two(c.fft_size) || c.fft_size < 2)
    throw ConfigError("stft: fft_size must be a power of two >= 2");
  return c;
}

// Reflect index into [0, n) without repeating the edge sample.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * std::ptrdiff_t(n - 1);
  i %= period;
  if (i < 0) i += period;
  return std::size_t(i < std::ptrdiff_t(n) ? i : period - i);
}

}  // namespace

template <typename T>
Stft<T>::Stft(StftConfig config) : config_(checked(config)), fft_(config_.fft_size) {
  window_.assign(config_.fft_size, 0.0);
  const std::size_t off = (config_.fft_size - config_.window_len) / 2;
  const auto w = config_.window == WindowType::kHann ? hann_periodic(config_.window_len)
                                                     : std::vector<double>(config_.window_len, 1.0);
  std::copy(w.begin(), w.end(), window_.begin() + std::ptrdiff_t(off));
}

template <typename T>
std::size_t Stft<T>::frames(std::size_t length) const {
  if (length == 0) throw ContractError("stft: empty signal");
  return 1 + length / config_.hop;
}

template <typename T>
Tensor<T> Stft<T>::analyze(std::span<const T> x) const {
  const std::size_t n = config_.fft_size, f = bins(), nt = frames(x.size());
  const auto p = std::ptrdiff_t(pad());
  Tensor<T> out({2, f, nt});
  std::vector<double> frame(n);
  std::vector<std::complex<double>> spec(f);
  for (std::size_t t = 0; t < nt; ++t) {
    const std::ptrdiff_t start = std::ptrdiff_t(t * config_.hop) - p;
    for (std::size_t m = 0; m < n; ++m)
      frame[m] = window_[m] * double(x[reflect(start + std::ptrdiff_t(m), x.size())]);
    fft_.rfft(frame, spec);
    for (std::size_t k = 0; k < f; ++k) {
      out(0, k, t) = T(spec[k].real());
      out(1, k, t) = T(spec[k].imag());
    }
  }
  return out;
}

template <typename T>
std::vector<double> Stft<T>::window_sum_sq(std::size_t nt) const {
  const std::size_t n = config_.fft_size;
  std::vector<double> wss((nt - 1) * config_.hop + n, 0.0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t m = 0; m < n; ++m) wss[t * config_.hop + m] += window_[m] * window_[m];
  return wss;
}

namespace {

void check_denominator(const std::vector<double>& wss, std::size_t lo, std::size_t hi) {
  const double peak = *std::max_element(wss.begin(), wss.end());
  for (std::size_t p = lo; p < hi; ++p)
    if (!(wss[p] > 1e-10 * peak))
      throw ConfigError("istft: zero window normalization; window/hop is not overlap-add invertible");
}

}  // namespace

template <typename T>
std::vector<T> Stft<T>::synthesize(const Tensor<T>& spec, std::size_t length) const {
  if (spec.rank() != 3 || spec.dim(0) != 2 || spec.dim(1) != bins() || spec.dim(2) == 0)
    throw ContractError("istft: expected [2, " + std::to_string(bins()) + ", frames], got " +
                        shape_str(spec.shape()));
  const std::size_t n = config_.fft_size, f = bins(), nt = spec.dim(2);
  const auto wss = window_sum_sq(nt);
  const std::size_t covered = std::min(length, wss.size() > pad() ? wss.size() - pad() : 0);
  check_denominator(wss, pad(), pad() + covered);

  std::vector<double> ola(wss.size(), 0.0), frame(n);
  std::vector<std::complex<double>> bins_(f);
  for (std::size_t t = 0; t < nt; ++t) {
    for (std::size_t k = 0; k < f; ++k) bins_[k] = {double(spec(0, k, t)), double(spec(1, k, t))};
    fft_.irfft(bins_, frame);
    for (std::size_t m = 0; m < n; ++m) ola[t * config_.hop + m] += window_[m] * frame[m];
  }
  std::vector<T> y(length, T(0));
  for (std::size_t i = 0; i < covered; ++i) y[i] = T(ola[i + pad()] / wss[i + pad()]);
  return y;
}

template <typename T>
Tensor<T> Stft<T>::synthesize_adjoint(std::span<const T> dy, std::size_t nt) const {
  const std::size_t n = config_.fft_size, f = bins();
  const auto wss = window_sum_sq(nt);
  const std::size_t covered = std::min(dy.size(), wss.size() > pad() ? wss.size() - pad() : 0);
  check_denominator(wss, pad(), pad() + covered);

  std::vector<double> g(wss.size(), 0.0), frame(n);
  for (std::size_t i = 0; i < covered; ++i) g[i + pad()] = double(dy[i]) / wss[i + pad()];
  Tensor<T> out({2, f, nt});
  std::vector<std::complex<double>> spec(f);
  for (std::size_t t = 0; t < nt; ++t) {
    for (std::size_t m = 0; m < n; ++m) frame[m] = window_[m] * g[t * config_.hop + m];
    fft_.rfft(frame, spec);
    for (std::size_t k = 0; k < f; ++k) {
      const bool edge = k == 0 || k == n / 2;
      const double c = (edge ? 1.0 : 2.0) / double(n);
      out(0, k, t) = T(c * spec[k].real());
      out(1, k, t) = edge ? T(0) : T(c * spec[k].imag());
    }
  }
  return out;
}

Spectrogram<float> stft(const AudioBuffer& x, const StftConfig& config) {
  const Stft<float> op(config);
  return {op.analyze(x.samples), op.config(), x.sample_rate};
}

AudioBuffer istft(const Spectrogram<float>& s, std::size_t original_len) {
  const Stft<float> op(s.config);
  return {op.synthesize(s.data, original_len), s.sample_rate};
}

namespace ag {

template <typename T>
Var<T> istft(const Stft<T>& op, const Var<T>& spec, std::size_t length) {
  const Shape& s = spec.shape();
  if (s.size() < 3) throw ContractError("istft: spec rank must be >= 3");
  const std::size_t f = s[s.size() - 2], nt = s.back();
  if (s[s.size() - 3] != 2 || f != op.bins())
    throw ContractError("istft: bad spec shape " + shape_str(s));
  const std::size_t per = 2 * f * nt, items = spec.value().size() / per;
  Shape out_shape(s.begin(), s.end() - 3);
  out_shape.push_back(length);

  Tensor<T> y(out_shape);
  for (std::size_t b = 0; b < items; ++b) {
    Tensor<T> one({2, f, nt});
    std::copy_n(spec.value().data() + b * per, per, one.data());
    const auto wav = op.synthesize(one, length);
    std::copy(wav.begin(), wav.end(), y.data() + b * length);
  }
  // The plan is captured by value so the graph does not dangle.
  return make_op<T>(std::move(y), {spec}, [op, per, nt, items, length](Node<T>& self) {
    auto& parent = *self.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    for (std::size_t b = 0; b < items; ++b) {
      const auto d = op.synthesize_adjoint(
          std::span<const T>(self.grad.data() + b * length, length), nt);
      for (std::size_t i = 0; i < per; ++i) g[b * per + i] += d[i];
    }
  });
}

template Var<float> istft<float>(const Stft<float>&, const Var<float>&, std::size_t);
template Var<double> istft<double>(const Stft<double>&, const Var<double>&, std::size_t);

}  // namespace ag

template class Stft<float>;
template class Stft<double>;

}  // namespace ssmsep
