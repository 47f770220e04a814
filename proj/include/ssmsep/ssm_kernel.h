// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Zero-order-hold discretization and the selective state-space scan.
//
// Layout conventions for a batch of S independent sequences of length L,
// E channels and N state dimensions per channel:
//   x, delta : [S, L, E]
//   a        : [E, N]     continuous diagonal of A, strictly negative
//   b, c     : [S, L, N]  input-dependent, shared across channels
// For every (s, e) the recurrence is
//   h_t = exp(delta_t a) h_{t-1} + g(delta_t, a) b_t x_t,   y_t = <c_t, h_t>
// with g(delta, a) = (exp(delta a) - 1) / a the ZOH input gain.

#ifndef SSMSEP_SSM_KERNEL_H_
#define SSMSEP_SSM_KERNEL_H_

#include <cstdint>
#include <span>
#include <vector>

#include "ssmsep/tensor.h"

namespace ssmsep::ssm {

// |delta * a| below this uses the truncated Taylor series for the input gain.
inline constexpr double kSeriesThreshold = 1e-4;

template <typename T>
struct ZohStep {
  T a_bar;
  T b_bar;
};

// g(delta, a) such that b_bar = g * b. Continuous at a = 0 (g -> delta).
template <typename T>
T zoh_input_gain(T a, T delta);

// Exact-branch and series-branch evaluations of the input gain, exposed so
// the switchover can be audited. Neither checks its argument range.
template <typename T>
T zoh_input_gain_exact(T a, T delta);
template <typename T>
T zoh_input_gain_series(T a, T delta);

// Scalar (single diagonal element) discretization.
// Throws DomainError if delta <= 0.
template <typename T>
ZohStep<T> discretize_zoh(T a, T b, T delta);

template <typename T>
struct ZohDiag {
  std::vector<T> a_bar;
  std::vector<T> b_bar;
};

// Element-wise discretization of a diagonal A.
template <typename T>
ZohDiag<T> discretize_zoh(std::span<const T> a_diag, std::span<const T> b, T delta);

// Dense A (N x N, row-major) and B (N). Uses the matrix exponential and a
// linear solve; requires delta * A to be invertible.
struct ZohDense {
  Tensor<double> a_bar;  // [N, N]
  Tensor<double> b_bar;  // [N]
};
ZohDense discretize_zoh_dense(const Tensor<double>& a, const Tensor<double>& b, double delta);

template <typename T>
struct ScanParams {
  Tensor<T> delta;  // [S, L, E]
  Tensor<T> a;      // [E, N]
  Tensor<T> b;      // [S, L, N]
  Tensor<T> c;      // [S, L, N]
};

// Hidden state of one channel while stepping the reference recurrence.
template <typename T>
struct ScanState {
  std::vector<T> h;
  std::size_t t = 0;
};

struct ScanStats {
  std::uint64_t flops = 0;
};

struct ScanOptions {
  // Sequences longer than this keep only chunk checkpoints of the hidden
  // state and recompute the rest during the backward pass.
  std::size_t recompute_threshold = 256;
  std::size_t chunk = 64;
};

// Forward state retained for the backward pass.
template <typename T>
struct ScanCache {
  Tensor<T> x;
  ScanParams<T> params;
  std::size_t chunk = 0;   // 0 means the cache was never filled
  bool full = false;       // states holds every h_t
  std::vector<T> states;   // full: [S, L, E, N]; otherwise [S, chunks, E, N]

  bool valid() const noexcept { return chunk != 0; }
};

template <typename T>
struct ScanGrads {
  Tensor<T> dx;
  ScanParams<T> dparams;
};

// Throws ContractError when shapes disagree, DomainError on delta <= 0.
template <typename T>
void validate_scan(const Tensor<T>& x, const ScanParams<T>& p);

// Naive left-to-right recurrence through discretize_zoh. Correctness oracle.
template <typename T>
Tensor<T> selective_scan_ref(const Tensor<T>& x, const ScanParams<T>& p);

// Production scan: O(S * L * E * N). Optionally counts floating-point
// operations and fills a cache for selective_scan_grad.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const ScanParams<T>& p,
                         ScanStats* stats = nullptr, ScanCache<T>* cache = nullptr,
                         const ScanOptions& opts = {});

// Reverse-mode gradients w.r.t. x, delta, a, b and c.
// Throws ContractError if the cache is empty or dy has the wrong shape.
template <typename T>
ScanGrads<T> selective_scan_grad(const ScanCache<T>& cache, const Tensor<T>& dy);

}  // namespace ssmsep::ssm

#endif  // SSMSEP_SSM_KERNEL_H_
