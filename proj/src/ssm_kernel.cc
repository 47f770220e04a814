// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/ssm_kernel.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unsupported/Eigen/MatrixFunctions>

namespace ssmsep::ssm {

namespace {

// Operation counts charged per (sequence, channel, step) and per state
// element inside that step.
constexpr std::uint64_t kFlopsPerStep = 1;
constexpr std::uint64_t kFlopsPerState = 9;

// Below this |u| the derivative of the input gain w.r.t. a is evaluated by
// series; the closed form cancels badly there.
constexpr double kGradSeriesThreshold = 1e-2;

struct Dims {
  std::size_t s, l, e, n;
};

template <typename T>
Dims dims_of(const Tensor<T>& x, const ScanParams<T>& p) {
  return {x.dim(0), x.dim(1), x.dim(2), p.a.dim(1)};
}

// d g / d a.
template <typename T>
inline T gain_grad_a(T a, T delta, T a_bar, T gain) {
  const T u = delta * a;
  if (std::abs(u) < T(kGradSeriesThreshold))
    return delta * delta *
           (T(0.5) + u * (T(1) / T(3) + u * (T(1) / T(8) + u * (T(1) / T(30) + u / T(144)))));
  return (delta * a_bar - gain) / a;
}

}  // namespace

template <typename T>
T zoh_input_gain_exact(T a, T delta) {
  return std::expm1(delta * a) / a;
}

template <typename T>
T zoh_input_gain_series(T a, T delta) {
  const T u = delta * a;
  return delta * (T(1) + u / T(2) + u * u / T(6));
}

template <typename T>
T zoh_input_gain(T a, T delta) {
  if (std::abs(delta * a) < T(kSeriesThreshold)) return zoh_input_gain_series(a, delta);
  return zoh_input_gain_exact(a, delta);
}

template <typename T>
ZohStep<T> discretize_zoh(T a, T b, T delta) {
  if (!(delta > T(0))) throw DomainError("discretize_zoh: delta must be positive");
  return {std::exp(delta * a), zoh_input_gain(a, delta) * b};
}

template <typename T>
ZohDiag<T> discretize_zoh(std::span<const T> a_diag, std::span<const T> b, T delta) {
  if (a_diag.size() != b.size()) throw ContractError("discretize_zoh: A and B sizes differ");
  ZohDiag<T> out;
  out.a_bar.reserve(a_diag.size());
  out.b_bar.reserve(a_diag.size());
  for (std::size_t i = 0; i < a_diag.size(); ++i) {
    const auto step = discretize_zoh(a_diag[i], b[i], delta);
    out.a_bar.push_back(step.a_bar);
    out.b_bar.push_back(step.b_bar);
  }
  return out;
}

ZohDense discretize_zoh_dense(const Tensor<double>& a, const Tensor<double>& b, double delta) {
  if (!(delta > 0.0)) throw DomainError("discretize_zoh_dense: delta must be positive");
  if (a.rank() != 2 || a.dim(0) != a.dim(1) || b.size() != a.dim(0))
    throw ContractError("discretize_zoh_dense: expected A [N, N] and B [N]");
  const auto n = static_cast<Eigen::Index>(a.dim(0));
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Mat da = Eigen::Map<const Mat>(a.data(), n, n) * delta;
  const Mat a_bar = da.exp();
  const Eigen::VectorXd db = Eigen::Map<const Eigen::VectorXd>(b.data(), n) * delta;
  Eigen::FullPivLU<Mat> lu(da);
  if (!lu.isInvertible()) throw DomainError("discretize_zoh_dense: delta * A is singular");
  const Eigen::VectorXd b_bar = lu.solve((a_bar - Mat::Identity(n, n)) * db);

  ZohDense out{Tensor<double>({a.dim(0), a.dim(0)}), Tensor<double>({a.dim(0)})};
  Eigen::Map<Mat>(out.a_bar.data(), n, n) = a_bar;
  Eigen::Map<Eigen::VectorXd>(out.b_bar.data(), n) = b_bar;
  return out;
}

template <typename T>
void validate_scan(const Tensor<T>& x, const ScanParams<T>& p) {
  if (x.rank() != 3) throw ContractError("selective_scan: x must be [S, L, E], got " + shape_str(x.shape()));
  if (p.a.rank() != 2 || p.a.dim(0) != x.dim(2))
    throw ContractError("selective_scan: a must be [E, N], got " + shape_str(p.a.shape()));
  if (p.delta.shape() != x.shape())
    throw ContractError("selective_scan: delta shape " + shape_str(p.delta.shape()) +
                        " != x shape " + shape_str(x.shape()));
  const Shape bc{x.dim(0), x.dim(1), p.a.dim(1)};
  if (p.b.shape() != bc || p.c.shape() != bc)
    throw ContractError("selective_scan: b and c must be " + shape_str(bc));
  for (const T d : p.delta.values())
    if (!(d > T(0))) throw DomainError("selective_scan: delta must be positive");
}

template <typename T>
Tensor<T> selective_scan_ref(const Tensor<T>& x, const ScanParams<T>& p) {
  validate_scan(x, p);
  const auto [S, L, E, N] = dims_of(x, p);
  Tensor<T> y(x.shape());
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t e = 0; e < E; ++e) {
      ScanState<T> st{std::vector<T>(N, T(0)), 0};
      for (std::size_t t = 0; t < L; ++t, ++st.t) {
        T out = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const auto step = discretize_zoh(p.a(e, n), p.b(s, t, n), p.delta(s, t, e));
          st.h[n] = step.a_bar * st.h[n] + step.b_bar * x(s, t, e);
          if (!std::isfinite(st.h[n]))
            throw NumericError("selective_scan_ref: non-finite hidden state");
          out += p.c(s, t, n) * st.h[n];
        }
        y(s, t, e) = out;
      }
    }
  }
  return y;
}

namespace {

// Discretizes one time step for every (channel, state) pair: a_bar = exp(u)
// and the input gain, u = delta_e * a_en. Exponentials run in double over
// the whole [E, N] slab so they vectorize; float callers lose nothing.
class StepDiscretizer {
 public:
  template <typename T>
  StepDiscretizer(const T* a, std::size_t e, std::size_t n) : e_(e), n_(n), a_(e * n), d_(e * n) {
    for (std::size_t i = 0; i < e * n; ++i) a_[i] = double(a[i]);
    inv_a_ = a_.inverse();
  }

  template <typename T>
  void run(const T* delta) {
    for (std::size_t e = 0; e < e_; ++e) d_.segment(Eigen::Index(e * n_), Eigen::Index(n_)).setConstant(double(delta[e]));
    u_ = d_ * a_;
    ab_ = u_.exp();
    gain_ = (u_.abs() < kSeriesThreshold).select(d_ * (1.0 + u_ * (0.5 + u_ * (1.0 / 6.0))), (ab_ - 1.0) * inv_a_);
  }

  double a_bar(std::size_t i) const { return ab_[Eigen::Index(i)]; }
  double gain(std::size_t i) const { return gain_[Eigen::Index(i)]; }

 private:
  std::size_t e_, n_;
  Eigen::ArrayXd a_, inv_a_, d_, u_, ab_, gain_;
};

}  // namespace

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const ScanParams<T>& p, ScanStats* stats,
                         ScanCache<T>* cache, const ScanOptions& opts) {
  validate_scan(x, p);
  const auto [S, L, E, N] = dims_of(x, p);
  const std::size_t EN = E * N;
  Tensor<T> y(x.shape());

  bool full = false;
  std::size_t chunk = 0, chunks = 0;
  if (cache) {
    full = L <= opts.recompute_threshold;
    chunk = full ? L : std::max<std::size_t>(1, opts.chunk);
    chunks = (L + chunk - 1) / chunk;
    cache->x = x;
    cache->params = p;
    cache->chunk = std::max<std::size_t>(chunk, 1);
    cache->full = full;
    cache->states.assign(full ? S * L * EN : S * chunks * EN, T(0));
  }

  StepDiscretizer step(p.a.data(), E, N);
  std::vector<T> h(EN);
  for (std::size_t s = 0; s < S; ++s) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < L; ++t) {
      if (cache && !full && t % chunk == 0)
        std::copy(h.begin(), h.end(), cache->states.data() + (s * chunks + t / chunk) * EN);
      const std::size_t row = s * L + t;
      const T* xt = x.data() + row * E;
      const T* bt = p.b.data() + row * N;
      const T* ct = p.c.data() + row * N;
      T* yt = y.data() + row * E;
      step.run(p.delta.data() + row * E);
      for (std::size_t e = 0; e < E; ++e) {
        T* he = h.data() + e * N;
        T out = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t i = e * N + n;
          he[n] = T(step.a_bar(i)) * he[n] + T(step.gain(i)) * bt[n] * xt[e];
          out += ct[n] * he[n];
        }
        yt[e] = out;
      }
      if (cache && full) std::copy(h.begin(), h.end(), cache->states.data() + row * EN);
    }
  }
  if (stats) stats->flops += S * E * L * (kFlopsPerStep + kFlopsPerState * N);
  if (!y.all_finite()) throw NumericError("selective_scan: non-finite output");
  return y;
}

template <typename T>
ScanGrads<T> selective_scan_grad(const ScanCache<T>& cache, const Tensor<T>& dy) {
  if (!cache.valid()) throw ContractError("selective_scan_grad: forward cache is empty");
  const auto& x = cache.x;
  const auto& p = cache.params;
  if (dy.shape() != x.shape())
    throw ContractError("selective_scan_grad: dy shape " + shape_str(dy.shape()) +
                        " != " + shape_str(x.shape()));
  const auto [S, L, E, N] = dims_of(x, p);
  const std::size_t EN = E * N;
  const std::size_t chunk = cache.chunk;
  const std::size_t chunks = (L + chunk - 1) / chunk;

  ScanGrads<T> g{Tensor<T>(x.shape()),
                 {Tensor<T>(x.shape()), Tensor<T>(p.a.shape()), Tensor<T>(p.b.shape()),
                  Tensor<T>(p.c.shape())}};
  const T* a = p.a.data();
  T* da = g.dparams.a.data();

  StepDiscretizer step(p.a.data(), E, N);
  std::vector<T> dh(EN), zeros(EN, T(0));
  std::vector<T> buf(cache.full ? 0 : chunk * EN);

  for (std::size_t s = 0; s < S; ++s) {
    std::fill(dh.begin(), dh.end(), T(0));
    for (std::size_t c = chunks; c-- > 0;) {
      const std::size_t t0 = c * chunk;
      const std::size_t t1 = std::min(L, t0 + chunk);
      const T* start = nullptr;  // h_{t0-1}
      if (cache.full) {
        start = t0 == 0 ? zeros.data() : cache.states.data() + (s * L + t0 - 1) * EN;
      } else {
        start = cache.states.data() + (s * chunks + c) * EN;
        const T* prev = start;
        for (std::size_t t = t0; t < t1; ++t) {
          const std::size_t row = s * L + t;
          const T* xt = x.data() + row * E;
          const T* bt = p.b.data() + row * N;
          T* ht = buf.data() + (t - t0) * EN;
          step.run(p.delta.data() + row * E);
          for (std::size_t e = 0; e < E; ++e)
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t i = e * N + n;
              ht[i] = T(step.a_bar(i)) * prev[i] + T(step.gain(i)) * bt[n] * xt[e];
            }
          prev = ht;
        }
      }
      const auto state_at = [&](std::size_t t) -> const T* {
        if (cache.full) return cache.states.data() + (s * L + t) * EN;
        return buf.data() + (t - t0) * EN;
      };

      for (std::size_t t = t1; t-- > t0;) {
        const std::size_t row = s * L + t;
        const T* delta = p.delta.data() + row * E;
        const T* xt = x.data() + row * E;
        const T* dyt = dy.data() + row * E;
        const T* bt = p.b.data() + row * N;
        const T* ct = p.c.data() + row * N;
        T* dxt = g.dx.data() + row * E;
        T* ddt = g.dparams.delta.data() + row * E;
        T* dbt = g.dparams.b.data() + row * N;
        T* dct = g.dparams.c.data() + row * N;
        const T* ht = state_at(t);
        const T* hp = t == t0 ? start : state_at(t - 1);
        step.run(delta);
        for (std::size_t e = 0; e < E; ++e) {
          const T dv = delta[e], xv = xt[e], dyv = dyt[e];
          T dx_acc = 0, ddelta_acc = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t i = e * N + n;
            const T ab = T(step.a_bar(i)), gn = T(step.gain(i));
            dct[n] += dyv * ht[i];
            dh[i] += ct[n] * dyv;
            const T adj_a = dh[i] * hp[i];
            const T adj_g = dh[i] * bt[n] * xv;
            dx_acc += dh[i] * gn * bt[n];
            dbt[n] += dh[i] * gn * xv;
            ddelta_acc += adj_a * a[i] * ab + adj_g * ab;
            da[i] += adj_a * dv * ab + adj_g * gain_grad_a(a[i], dv, ab, gn);
            dh[i] *= ab;
          }
          dxt[e] = dx_acc;
          ddt[e] = ddelta_acc;
        }
      }
    }
  }
  return g;
}

#define SSMSEP_INSTANTIATE(T)                                                               \
  template T zoh_input_gain<T>(T, T);                                                       \
  template T zoh_input_gain_exact<T>(T, T);                                                 \
  template T zoh_input_gain_series<T>(T, T);                                                \
  template ZohStep<T> discretize_zoh<T>(T, T, T);                                           \
  template ZohDiag<T> discretize_zoh<T>(std::span<const T>, std::span<const T>, T);         \
  template void validate_scan<T>(const Tensor<T>&, const ScanParams<T>&);                   \
  template Tensor<T> selective_scan_ref<T>(const Tensor<T>&, const ScanParams<T>&);         \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const ScanParams<T>&, ScanStats*,  \
                                       ScanCache<T>*, const ScanOptions&);                  \
  template ScanGrads<T> selective_scan_grad<T>(const ScanCache<T>&, const Tensor<T>&);

SSMSEP_INSTANTIATE(float)
SSMSEP_INSTANTIATE(double)
#undef SSMSEP_INSTANTIATE

}  // namespace ssmsep::ssm
