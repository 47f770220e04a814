// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/bmamba.h"

#include <cmath>

#include "ssmsep/errors.h"

namespace ssmsep {

namespace {

constexpr double kNormEps = 1e-12;

template <typename T>
Var<T> param(Shape s, T fill = T(0)) {
  return Var<T>(Tensor<T>(std::move(s), fill));
}

template <typename T>
void fill_uniform(Var<T>& v, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& x : v.mutable_value().values()) x = T(u(rng));
}

// Uniform in +-1/sqrt(fan_in), fan_in = last dim times any trailing dims.
template <typename T>
void fan_in_uniform(Var<T>& v, std::size_t fan_in, std::mt19937_64& rng) {
  fill_uniform(v, 1.0 / std::sqrt(double(fan_in)), rng);
}

}  // namespace

void MambaDims::validate() const {
  if (!d_model || !d_inner || !d_state || !conv_width)
    throw ConfigError("mamba: all dimensions must be positive");
}

template <typename T>
MambaWeights<T>::MambaWeights(MambaDims d) : dims(d) {
  d.validate();
  const std::size_t D = d.d_model, E = d.d_inner, N = d.d_state, W = d.conv_width, R = d.rank();
  in_proj = param<T>({2 * E, D});
  conv_w = param<T>({E, W});
  conv_b = param<T>({E});
  x_proj = param<T>({R + 2 * N, E});
  dt_proj_w = param<T>({E, R});
  dt_proj_b = param<T>({E});
  a_log = param<T>({E, N});
  d_skip = param<T>({E});
  out_proj = param<T>({D, E});
  norm_gain = param<T>({D}, T(1));
}

template <typename T>
void MambaWeights<T>::visit(const std::string& p, const ParamVisitor<T>& f) {
  f(p + "in_proj", in_proj);
  f(p + "conv_w", conv_w);
  f(p + "conv_b", conv_b);
  f(p + "x_proj", x_proj);
  f(p + "dt_proj_w", dt_proj_w);
  f(p + "dt_proj_b", dt_proj_b);
  f(p + "a_log", a_log);
  f(p + "d_skip", d_skip);
  f(p + "out_proj", out_proj);
  f(p + "norm_gain", norm_gain);
}

template <typename T>
void MambaWeights<T>::init(std::mt19937_64& rng) {
  const std::size_t E = dims.d_inner, N = dims.d_state, R = dims.rank();
  fan_in_uniform(in_proj, dims.d_model, rng);
  fan_in_uniform(conv_w, dims.conv_width, rng);
  fan_in_uniform(conv_b, dims.conv_width, rng);
  fan_in_uniform(x_proj, E, rng);
  fan_in_uniform(dt_proj_w, R, rng);
  fan_in_uniform(out_proj, E, rng);
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (auto& b : dt_proj_b.mutable_value().values()) {
    const double dt = std::exp(u(rng));
    b = T(dt + std::log(-std::expm1(-dt)));  // softplus^-1
  }
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t n = 0; n < N; ++n) a_log.mutable_value()(e, n) = T(std::log(double(n + 1)));
  d_skip.mutable_value().fill(T(1));
  norm_gain.mutable_value().fill(T(1));
}

template <typename T>
BMambaWeights<T>::BMambaWeights(MambaDims d)
    : fwd(d), bwd(d), compress(param<T>({d.d_model, 2 * d.d_model})) {}

template <typename T>
void BMambaWeights<T>::visit(const std::string& p, const ParamVisitor<T>& f) {
  fwd.visit(p + "fwd.", f);
  bwd.visit(p + "bwd.", f);
  f(p + "compress", compress);
}

template <typename T>
void BMambaWeights<T>::init(std::mt19937_64& rng) {
  fwd.init(rng);
  bwd.init(rng);
  fan_in_uniform(compress, 2 * width(), rng);
}

template <typename T>
GruWeights<T>::GruWeights(std::size_t h)
    : width(h),
      w_ih(param<T>({3 * h, h})),
      w_hh(param<T>({3 * h, h})),
      b_ih(param<T>({3 * h})),
      b_hh(param<T>({3 * h})) {}

template <typename T>
void GruWeights<T>::visit(const std::string& p, const ParamVisitor<T>& f) {
  f(p + "w_ih", w_ih);
  f(p + "w_hh", w_hh);
  f(p + "b_ih", b_ih);
  f(p + "b_hh", b_hh);
}

template <typename T>
void GruWeights<T>::init(std::mt19937_64& rng) {
  for (auto* v : {&w_ih, &w_hh, &b_ih, &b_hh}) fan_in_uniform(*v, width, rng);
}

template <typename T>
BGruWeights<T>::BGruWeights(std::size_t h) : fwd(h), bwd(h), compress(param<T>({h, 2 * h})) {}

template <typename T>
void BGruWeights<T>::visit(const std::string& p, const ParamVisitor<T>& f) {
  fwd.visit(p + "fwd.", f);
  bwd.visit(p + "bwd.", f);
  f(p + "compress", compress);
}

template <typename T>
void BGruWeights<T>::init(std::mt19937_64& rng) {
  fwd.init(rng);
  bwd.init(rng);
  fan_in_uniform(compress, 2 * width(), rng);
}

namespace ag {

namespace {

template <typename T>
void check_input(const Var<T>& x, std::size_t width, const char* who) {
  if (x.shape().size() != 3 || x.shape()[2] != width)
    throw ContractError(std::string(who) + ": expected [S, L, " + std::to_string(width) + "], got " +
                        shape_str(x.shape()));
  if (x.shape()[1] == 0) throw ContractError(std::string(who) + ": empty sequence");
}

}  // namespace

template <typename T>
Var<T> mamba(const Var<T>& x, const MambaWeights<T>& w) {
  const auto& d = w.dims;
  check_input(x, d.d_model, "mamba");
  const std::size_t E = d.d_inner, N = d.d_state, R = d.rank();
  const Var<T> xz = linear(x, w.in_proj);
  const Var<T> xc = silu(causal_dwconv(slice_last(xz, 0, E), w.conv_w, w.conv_b));
  const Var<T> gate = silu(slice_last(xz, E, 2 * E));

  const Var<T> dbc = linear(xc, w.x_proj);
  const Var<T> delta = softplus(add_last(linear(slice_last(dbc, 0, R), w.dt_proj_w), w.dt_proj_b));
  const Var<T> b = slice_last(dbc, R, R + N);
  const Var<T> c = slice_last(dbc, R + N, R + 2 * N);
  const Var<T> y = add(selective_scan(xc, delta, neg_exp(w.a_log), b, c), mul_last(xc, w.d_skip));
  return rms_norm(linear(mul(y, gate), w.out_proj), w.norm_gain, T(kNormEps));
}

template <typename T>
Var<T> bmamba(const Var<T>& x, const BMambaWeights<T>& w, Var<T>* concat) {
  check_input(x, w.width(), "bmamba");
  const Var<T> hf = mamba(x, w.fwd);
  const Var<T> hb = reverse_seq(mamba(reverse_seq(x), w.bwd));
  const Var<T> h = concat_last<T>({hf, hb});
  if (concat) *concat = h;
  return linear(h, w.compress);
}

template <typename T>
Var<T> gru(const Var<T>& x, const GruWeights<T>& w) {
  check_input(x, w.width, "gru");
  const std::size_t H = w.width, S = x.shape()[0], L = x.shape()[1];
  const Var<T> gi = add_last(linear(x, w.w_ih), w.b_ih);  // [S, L, 3H]
  Var<T> h = constant(Tensor<T>({S, H}));
  std::vector<Var<T>> steps;
  steps.reserve(L);
  for (std::size_t t = 0; t < L; ++t) {
    const Var<T> it = select_step(gi, t);
    const Var<T> ht = add_last(linear(h, w.w_hh), w.b_hh);
    const Var<T> r = sigmoid(add(slice_last(it, 0, H), slice_last(ht, 0, H)));
    const Var<T> z = sigmoid(add(slice_last(it, H, 2 * H), slice_last(ht, H, 2 * H)));
    const Var<T> n = tanh(add(slice_last(it, 2 * H, 3 * H), mul(r, slice_last(ht, 2 * H, 3 * H))));
    h = add(mul(one_minus(z), n), mul(z, h));
    steps.push_back(h);
  }
  return stack_steps(steps);
}

template <typename T>
Var<T> bgru(const Var<T>& x, const BGruWeights<T>& w) {
  const Var<T> hf = gru(x, w.fwd);
  const Var<T> hb = reverse_seq(gru(reverse_seq(x), w.bwd));
  return linear(concat_last<T>({hf, hb}), w.compress);
}

}  // namespace ag

template <typename T>
Tensor<T> mamba_forward(const Tensor<T>& x, const MambaWeights<T>& w) {
  return ag::mamba(Var<T>(x), w).value();
}

template <typename T>
Tensor<T> bmamba_forward(const Tensor<T>& x, const BMambaWeights<T>& w) {
  return ag::bmamba(Var<T>(x), w).value();
}

template <typename T>
const Tensor<T>& BMambaGrads<T>::operator[](const std::string& name) const {
  for (const auto& [n, t] : dw)
    if (n == name) return t;
  throw ContractError("bmamba_grad: no parameter " + name);
}

template <typename T>
BMambaGrads<T> bmamba_grad(const Tensor<T>& x, const BMambaWeights<T>& w, const Tensor<T>& dy) {
  BMambaWeights<T> leaves = w;
  std::vector<std::pair<std::string, Var<T>>> order;
  leaves.visit("", [&](const std::string& name, Var<T>& v) {
    v = Var<T>(v.value(), true);
    order.emplace_back(name, v);
  });
  Var<T> xv(x, true);
  const Var<T> y = ag::bmamba(xv, leaves);
  if (dy.shape() != y.shape()) throw ContractError("bmamba_grad: dy shape mismatch");
  backward(y, dy);

  const auto grad_or_zero = [](const Var<T>& v) {
    return v.has_grad() ? v.grad() : Tensor<T>(v.shape());
  };
  BMambaGrads<T> g{grad_or_zero(xv), {}};
  for (auto& [name, v] : order) g.dw.emplace_back(name, grad_or_zero(v));
  return g;
}

#define SSMSEP_INSTANTIATE(T)                                                                    \
  template struct MambaWeights<T>;                                                               \
  template struct BMambaWeights<T>;                                                              \
  template struct GruWeights<T>;                                                                 \
  template struct BGruWeights<T>;                                                                \
  template struct BMambaGrads<T>;                                                                \
  template Var<T> ag::mamba<T>(const Var<T>&, const MambaWeights<T>&);                           \
  template Var<T> ag::bmamba<T>(const Var<T>&, const BMambaWeights<T>&, Var<T>*);                \
  template Var<T> ag::gru<T>(const Var<T>&, const GruWeights<T>&);                               \
  template Var<T> ag::bgru<T>(const Var<T>&, const BGruWeights<T>&);                             \
  template Tensor<T> mamba_forward<T>(const Tensor<T>&, const MambaWeights<T>&);                 \
  template Tensor<T> bmamba_forward<T>(const Tensor<T>&, const BMambaWeights<T>&);               \
  template BMambaGrads<T> bmamba_grad<T>(const Tensor<T>&, const BMambaWeights<T>&, const Tensor<T>&);

SSMSEP_INSTANTIATE(float)
SSMSEP_INSTANTIATE(double)
#undef SSMSEP_INSTANTIATE

}  // namespace ssmsep
