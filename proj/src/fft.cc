// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/fft.h"

#include <cmath>
#include <numbers>
#include <utility>

#include "ssmsep/errors.h"

namespace ssmsep {

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

template <typename T>
Fft<T>::Fft(std::size_t n) : n_(n) {
  if (!is_power_of_two(n)) throw ConfigError("fft size must be a power of two, got " + std::to_string(n));
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  bitrev_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b)
      if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
    bitrev_[i] = r;
  }
  twiddle_.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double th = -2.0 * std::numbers::pi * double(k) / double(n);
    twiddle_[k] = {T(std::cos(th)), T(std::sin(th))};
  }
}

template <typename T>
void Fft<T>::transform(std::span<std::complex<T>> a, bool inverse) const {
  if (a.size() != n_) throw ContractError("fft: buffer size mismatch");
  for (std::size_t i = 0; i < n_; ++i)
    if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
  for (std::size_t len = 2; len <= n_; len <<= 1) {
    const std::size_t half = len / 2, step = n_ / len;
    for (std::size_t s = 0; s < n_; s += len) {
      for (std::size_t j = 0; j < half; ++j) {
        std::complex<T> w = twiddle_[j * step];
        if (inverse) w = std::conj(w);
        const std::complex<T> u = a[s + j];
        const std::complex<T> v = a[s + j + half] * w;
        a[s + j] = u + v;
        a[s + j + half] = u - v;
      }
    }
  }
}

template <typename T>
void Fft<T>::forward(std::span<std::complex<T>> data) const {
  transform(data, false);
}

template <typename T>
void Fft<T>::inverse(std::span<std::complex<T>> data) const {
  transform(data, true);
  const T inv = T(1) / T(n_);
  for (auto& v : data) v *= inv;
}

template <typename T>
void Fft<T>::rfft(std::span<const T> in, std::span<std::complex<T>> out) const {
  if (in.size() != n_ || out.size() != n_ / 2 + 1) throw ContractError("rfft: size mismatch");
  std::vector<std::complex<T>> buf(in.begin(), in.end());
  transform(buf, false);
  std::copy(buf.begin(), buf.begin() + std::ptrdiff_t(n_ / 2 + 1), out.begin());
}

template <typename T>
void Fft<T>::irfft(std::span<const std::complex<T>> in, std::span<T> out) const {
  if (out.size() != n_ || in.size() != n_ / 2 + 1) throw ContractError("irfft: size mismatch");
  std::vector<std::complex<T>> buf(n_);
  const std::size_t h = n_ / 2;
  buf[0] = {in[0].real(), 0};
  if (n_ > 1) buf[h] = {in[h].real(), 0};
  for (std::size_t k = 1; k < h; ++k) {
    buf[k] = in[k];
    buf[n_ - k] = std::conj(in[k]);
  }
  inverse(buf);
  for (std::size_t i = 0; i < n_; ++i) out[i] = buf[i].real();
}

template class Fft<float>;
template class Fft<double>;

}  // namespace ssmsep
