// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef SSMSEP_FFT_H_
#define SSMSEP_FFT_H_

#include <complex>
#include <span>
#include <vector>

namespace ssmsep {

// Iterative radix-2 decimation-in-time FFT for a fixed power-of-two size.
// Immutable after construction, so one plan may be shared across threads.
template <typename T>
class Fft {
 public:
  explicit Fft(std::size_t n);

  std::size_t size() const noexcept { return n_; }

  // Unnormalized forward transform, X_k = sum_n x_n exp(-2 pi i k n / N).
  void forward(std::span<std::complex<T>> data) const;
  // Inverse including the 1/N factor.
  void inverse(std::span<std::complex<T>> data) const;

  // Onesided spectrum of a real frame: N/2 + 1 bins.
  void rfft(std::span<const T> in, std::span<std::complex<T>> out) const;
  // Real frame from a onesided spectrum (imaginary parts of DC and Nyquist
  // are ignored).
  void irfft(std::span<const std::complex<T>> in, std::span<T> out) const;

 private:
  void transform(std::span<std::complex<T>> data, bool inverse) const;

  std::size_t n_;
  std::vector<std::size_t> bitrev_;
  std::vector<std::complex<T>> twiddle_;  // exp(-2 pi i k / N), k < N/2
};

bool is_power_of_two(std::size_t n) noexcept;

}  // namespace ssmsep

#endif  // SSMSEP_FFT_H_
