// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/separator.h"

#include <cmath>

#include "json.hpp"
#include "ssmsep/errors.h"

namespace ssmsep {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kStdEps = 1e-8;

template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("blocks", c.blocks);
  f("channels", c.channels);
  f("module_hidden", c.module_hidden);
  f("bmamba_hidden", c.bmamba_hidden);
  f("kernel", c.kernel);
  f("stride", c.stride);
  f("window", c.window);
  f("hop", c.hop);
  f("fft_size", c.fft_size);
  f("sample_rate", c.sample_rate);
  f("speakers", c.speakers);
  f("heads", c.heads);
  f("attn_qk_dim", c.attn_qk_dim);
  f("d_state", c.d_state);
  f("conv_width", c.conv_width);
  f("fd_uses_bmamba", c.fd_uses_bmamba);
  f("td_uses_bmamba", c.td_uses_bmamba);
  f("infer_chunk", c.infer_chunk);
}

template <typename T>
Var<T> param(Shape s, T fill = T(0)) {
  return Var<T>(Tensor<T>(std::move(s), fill));
}

template <typename T>
void fan_in_uniform(Var<T>& v, std::size_t fan_in, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (auto& x : v.mutable_value().values()) x = T(bound * u(rng));
}

// Placeholder shape for the unused recurrent core of a module.
MambaDims unused_dims() { return {1, 1, 1, 1, 1}; }

}  // namespace

MambaDims ModelConfig::mamba_dims() const {
  MambaDims d;
  d.d_model = bmamba_hidden;
  d.d_inner = module_hidden;
  d.d_state = d_state;
  d.conv_width = conv_width;
  return d;
}

void ModelConfig::validate() const {
  const auto fail = [](const std::string& why) { throw ConfigError("model config: " + why); };
  if (channels == 0 || module_hidden == 0 || bmamba_hidden == 0) fail("widths must be positive");
  if (speakers == 0) fail("speakers must be >= 1");
  if (stride == 0 || kernel < stride) fail("need kernel >= stride >= 1");
  if (heads == 0 || channels % heads != 0) fail("channels must be divisible by heads");
  if (d_state == 0 || conv_width == 0) fail("mamba state size and conv width must be positive");
  if (sample_rate <= 0) fail("sample_rate must be positive");
  Stft<float> check(stft());
  if (bins() < kernel) fail("frequency bins (" + std::to_string(bins()) + ") fewer than kernel");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  visit_fields(*this, [&](const char* k, const auto& v) { j[k] = v; });
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  ModelConfig c;
  std::size_t used = 0;
  visit_fields(c, [&](const char* k, auto& v) {
    if (!j.contains(k)) return;
    ++used;
    try {
      j.at(k).get_to(v);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("model config: bad value for ") + k);
    }
  });
  if (used != j.size()) {
    for (const auto& [k, v] : j.items()) {
      bool known = false;
      visit_fields(c, [&](const char* name, auto&) { known |= k == name; });
      if (!known) throw ConfigError("model config: unknown key " + k);
    }
  }
  return c;
}

template <typename T>
DualPathWeights<T>::DualPathWeights(const ModelConfig& c, bool use)
    : kernel(c.kernel),
      stride(c.stride),
      use_bmamba(use),
      norm_gain(param<T>({c.kernel * c.channels}, T(1))),
      norm_bias(param<T>({c.kernel * c.channels})),
      in_proj(param<T>({c.bmamba_hidden, c.kernel * c.channels})),
      mamba(use ? c.mamba_dims() : unused_dims()),
      gru(use ? 0 : c.bmamba_hidden),
      out_proj(param<T>({c.kernel * c.channels, c.bmamba_hidden})) {}

template <typename T>
void DualPathWeights<T>::visit(const std::string& p, const ParamVisitor<T>& f) {
  f(p + "norm_gain", norm_gain);
  f(p + "norm_bias", norm_bias);
  f(p + "in_proj", in_proj);
  if (use_bmamba)
    mamba.visit(p + "bmamba.", f);
  else
    gru.visit(p + "bgru.", f);
  f(p + "out_proj", out_proj);
}

template <typename T>
void DualPathWeights<T>::init(std::mt19937_64& rng) {
  fan_in_uniform(in_proj, in_proj.shape()[1], rng);
  if (use_bmamba)
    mamba.init(rng);
  else
    gru.init(rng);
  fan_in_uniform(out_proj, out_proj.shape()[1], rng);
}

template <typename T>
TfaWeights<T>::TfaWeights(const ModelConfig& c) : heads(c.heads) {
  const std::size_t C = c.channels, qk = c.heads * c.qk_dim(), v = c.heads * c.v_dim();
  q_proj = param<T>({qk, C});
  k_proj = param<T>({qk, C});
  v_proj = param<T>({v, C});
  q_gain = param<T>({qk}, T(1));
  k_gain = param<T>({qk}, T(1));
  v_gain = param<T>({v}, T(1));
  q_bias = param<T>({qk});
  k_bias = param<T>({qk});
  v_bias = param<T>({v});
  out_proj = param<T>({C, v});
}

template <typename T>
void TfaWeights<T>::visit(const std::string& p, const ParamVisitor<T>& f) {
  f(p + "q_proj", q_proj);
  f(p + "k_proj", k_proj);
  f(p + "v_proj", v_proj);
  f(p + "q_gain", q_gain);
  f(p + "q_bias", q_bias);
  f(p + "k_gain", k_gain);
  f(p + "k_bias", k_bias);
  f(p + "v_gain", v_gain);
  f(p + "v_bias", v_bias);
  f(p + "out_proj", out_proj);
}

template <typename T>
void TfaWeights<T>::init(std::mt19937_64& rng) {
  for (auto* v : {&q_proj, &k_proj, &v_proj}) fan_in_uniform(*v, v->shape()[1], rng);
  fan_in_uniform(out_proj, out_proj.shape()[1], rng);
}

template <typename T>
SeparatorWeights<T>::SeparatorWeights(const ModelConfig& c)
    : config(c), stem(param<T>({c.channels, 2, 3, 3})), head(param<T>({2 * c.speakers, c.channels, 3, 3})) {
  c.validate();
  blocks.reserve(c.blocks);
  for (std::size_t b = 0; b < c.blocks; ++b)
    blocks.push_back({DualPathWeights<T>(c, c.fd_uses_bmamba), DualPathWeights<T>(c, c.td_uses_bmamba),
                      TfaWeights<T>(c)});
}

template <typename T>
void SeparatorWeights<T>::visit(const ParamVisitor<T>& f) {
  f("stem", stem);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    blocks[b].fd.visit(p + "fd.", f);
    blocks[b].td.visit(p + "td.", f);
    blocks[b].tfa.visit(p + "tfa.", f);
  }
  f("head", head);
}

template <typename T>
void SeparatorWeights<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  fan_in_uniform(stem, 2 * 9, rng);
  for (auto& b : blocks) {
    b.fd.init(rng);
    b.td.init(rng);
    b.tfa.init(rng);
  }
  fan_in_uniform(head, config.channels * 9, rng);
}

template <typename T>
std::vector<Var<T>> SeparatorWeights<T>::parameters() {
  std::vector<Var<T>> out;
  visit([&](const std::string&, Var<T>& v) { out.push_back(v); });
  return out;
}

template <typename T>
void SeparatorWeights<T>::set_requires_grad(bool on) {
  visit([&](const std::string&, Var<T>& v) { v.set_requires_grad(on); });
}

namespace ag {

namespace {

// x [S, L, C] -> x + fold(out_proj(core(in_proj(norm(unfold(x)))))).
template <typename T>
Var<T> dual_path(const Var<T>& x, const DualPathWeights<T>& w, std::size_t chunk, const char* axis) {
  const std::size_t S = x.shape()[0], L = x.shape()[1];
  if (L < w.kernel)
    throw ConfigError(std::string(axis) + " length " + std::to_string(L) + " is shorter than the unfold kernel " +
                      std::to_string(w.kernel));
  const auto run = [&](const Var<T>& xs) {
    Var<T> u = layer_norm(unfold_seq(xs, w.kernel, w.stride), w.norm_gain, w.norm_bias, T(kLayerNormEps));
    Var<T> h = linear(u, w.in_proj);
    h = w.use_bmamba ? bmamba(h, w.mamba) : bgru(h, w.gru);
    return fold_seq(linear(h, w.out_proj), w.kernel, w.stride, L);
  };
  if (chunk == 0 || S <= chunk) return add(x, run(x));
  std::vector<Var<T>> parts;
  for (std::size_t lo = 0; lo < S; lo += chunk) parts.push_back(run(slice0(x, lo, std::min(S, lo + chunk))));
  return add(x, concat0(parts));
}

// [T, F, H*D] <-> [H, T, F*D]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const std::size_t Tn = x.shape()[0], F = x.shape()[1], D = x.shape()[2] / heads;
  return reshape(permute(reshape(x, {Tn, F, heads, D}), {2, 0, 1, 3}), {heads, Tn, F * D});
}

template <typename T>
Var<T> merge_heads(const Var<T>& x, std::size_t F) {
  const std::size_t H = x.shape()[0], Tn = x.shape()[1], D = x.shape()[2] / F;
  return reshape(permute(reshape(x, {H, Tn, F, D}), {1, 2, 0, 3}), {Tn, F, H * D});
}

template <typename T>
void check_grid(const Var<T>& z, std::size_t C, const char* who) {
  if (z.shape().size() != 3 || z.shape()[2] != C)
    throw ContractError(std::string(who) + ": expected [T, F, " + std::to_string(C) + "], got " + shape_str(z.shape()));
}

}  // namespace

template <typename T>
Var<T> fd_module(const Var<T>& z, const DualPathWeights<T>& w, std::size_t chunk) {
  check_grid(z, w.norm_gain.shape()[0] / w.kernel, "fd_module");
  return dual_path(z, w, chunk, "frequency");
}

template <typename T>
Var<T> td_module(const Var<T>& z, const DualPathWeights<T>& w, std::size_t chunk) {
  check_grid(z, w.norm_gain.shape()[0] / w.kernel, "td_module");
  return permute(dual_path(permute(z, {1, 0, 2}), w, chunk, "time"), {1, 0, 2});
}

template <typename T>
Var<T> tfa_module(const Var<T>& z, const TfaWeights<T>& w, Tensor<T>* attention) {
  check_grid(z, w.q_proj.shape()[1], "tfa_module");
  const std::size_t F = z.shape()[1], H = w.heads;
  const Var<T> q = frame_norm(linear(z, w.q_proj), H, w.q_gain, w.q_bias, T(kLayerNormEps));
  const Var<T> k = frame_norm(linear(z, w.k_proj), H, w.k_gain, w.k_bias, T(kLayerNormEps));
  const Var<T> v = frame_norm(linear(z, w.v_proj), H, w.v_gain, w.v_bias, T(kLayerNormEps));
  const Var<T> qh = split_heads(q, H), kh = split_heads(k, H), vh = split_heads(v, H);
  const T scale_by = T(1) / std::sqrt(T(qh.shape()[2]));
  const Var<T> a = softmax_last(scale(bmm_nt(qh, kh), scale_by));  // [H, T, T]
  if (attention) *attention = a.value();
  return add(z, linear(merge_heads(bmm(a, vh), F), w.out_proj));
}

}  // namespace ag

template <typename T>
Separator<T>::Separator(SeparatorWeights<T> weights)
    : weights_(std::move(weights)), stft_(weights_.config.stft()) {}

template <typename T>
Var<T> Separator<T>::forward_spec(const Var<T>& spec) const {
  const auto& c = weights_.config;
  if (spec.shape().size() != 3 || spec.shape()[0] != 2 || spec.shape()[1] != c.bins())
    throw ContractError("separator: expected spec [2, " + std::to_string(c.bins()) + ", T], got " +
                        shape_str(spec.shape()));
  bool grad = false;
  const_cast<SeparatorWeights<T>&>(weights_).visit(
      [&](const std::string&, Var<T>& v) { grad |= v.requires_grad(); });
  const std::size_t chunk = grad ? 0 : c.infer_chunk;

  Var<T> z = ag::permute(ag::conv2d(spec, weights_.stem), {2, 1, 0});  // [T, F, C]
  for (std::size_t b = 0; b < weights_.blocks.size(); ++b) {
    const auto& w = weights_.blocks[b];
    try {
      z = ag::tfa_module(ag::td_module(ag::fd_module(z, w.fd, chunk), w.td, chunk), w.tfa);
    } catch (const NumericError& e) {
      if (e.stage() >= 0) throw;
      throw NumericError("separator: block " + std::to_string(b) + ": " + e.what(), int(b));
    }
    if (!z.value().all_finite())
      throw NumericError("separator: non-finite activations in block " + std::to_string(b), int(b));
  }
  const std::size_t F = spec.shape()[1], Tn = spec.shape()[2];
  Var<T> y = ag::conv2d(ag::permute(z, {2, 1, 0}), weights_.head);
  if (!y.value().all_finite())
    throw NumericError("separator: non-finite output projection", int(weights_.blocks.size()));
  return ag::reshape(y, {c.speakers, 2, F, Tn});
}

template <typename T>
Var<T> Separator<T>::forward(const Tensor<T>& mix) const {
  if (mix.rank() != 1) throw ContractError("separator: mixture must be 1-D");
  const std::size_t L = mix.size();
  if (L < weights_.config.window)
    throw ContractError("separator: mixture shorter than one stft window");
  double mean = 0, var = 0;
  for (T v : mix.values()) mean += double(v);
  mean /= double(L);
  for (T v : mix.values()) var += (double(v) - mean) * (double(v) - mean);
  const double sd = std::sqrt(var / double(L));

  std::vector<T> x(mix.values().begin(), mix.values().end());
  for (auto& v : x) v = T(double(v) / (sd + kStdEps));
  const Var<T> spec(stft_.analyze(x));
  return ag::scale(ag::istft(stft_, forward_spec(spec), L), T(sd));
}

template <typename T>
std::vector<AudioBuffer> Separator<T>::separate(const AudioBuffer& mix) const {
  mix.validate();
  Tensor<T> x({mix.size()});
  for (std::size_t i = 0; i < mix.size(); ++i) x[i] = T(mix.samples[i]);
  const Tensor<T> y = forward(x).value();
  std::vector<AudioBuffer> out(weights_.config.speakers);
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j].sample_rate = mix.sample_rate;
    out[j].samples.resize(mix.size());
    for (std::size_t i = 0; i < mix.size(); ++i) out[j].samples[i] = float(y(j, i));
  }
  return out;
}

ModelComplexity count_params_macs(const ModelConfig& c) {
  ModelComplexity r;
  SeparatorWeights<float> w(c);
  w.visit([&](const std::string& name, Var<float>& v) {
    r.params += v.value().size();
    (name.starts_with("blocks.") ? r.block_params : r.io_params) += v.value().size();
  });

  // Analytic multiply-accumulates for 1 s of audio; elementwise work other
  // than the scan recurrence is not counted.
  const double F = double(c.bins());
  const double Tn = double(1 + std::size_t(c.sample_rate) / c.hop);
  const double C = double(c.channels), K = double(c.kernel), Hb = double(c.bmamba_hidden);
  const auto md = c.mamba_dims();
  const double E = double(md.d_inner), N = double(md.d_state), R = double(md.rank());
  const double mamba_step = 2 * E * Hb + E * double(md.conv_width) + (R + 2 * N) * E + E * R + 3 * E * N + E + Hb * E;
  const double bmamba_step = 2 * mamba_step + 2 * Hb * Hb;
  const double gru_step = 2 * (6 * Hb * Hb) + 2 * Hb * Hb;
  const auto windows = [&](double len) { return double(ag::UnfoldGeometry::make(std::size_t(len), c.kernel, c.stride).windows); };
  const auto dual = [&](double seqs, double len, bool mamba) {
    return seqs * windows(len) * (2 * K * C * Hb + (mamba ? bmamba_step : gru_step));
  };
  const double dk = double(c.qk_dim()), dv = double(c.v_dim()), H = double(c.heads);
  const double tfa = Tn * F * C * H * (2 * dk + dv) + H * Tn * Tn * F * (dk + dv) + Tn * F * H * dv * C;

  double macs = 9 * 2 * C * F * Tn + 9 * C * 2 * double(c.speakers) * F * Tn;
  if (Tn >= K)
    macs += double(c.blocks) * (dual(Tn, F, c.fd_uses_bmamba) + dual(F, Tn, c.td_uses_bmamba) + tfa);
  r.macs_per_second = macs;
  return r;
}

#define SSMSEP_INSTANTIATE(T)                                                                     \
  template struct DualPathWeights<T>;                                                             \
  template struct TfaWeights<T>;                                                                  \
  template struct SeparatorWeights<T>;                                                            \
  template class Separator<T>;                                                                    \
  template Var<T> ag::fd_module<T>(const Var<T>&, const DualPathWeights<T>&, std::size_t);        \
  template Var<T> ag::td_module<T>(const Var<T>&, const DualPathWeights<T>&, std::size_t);        \
  template Var<T> ag::tfa_module<T>(const Var<T>&, const TfaWeights<T>&, Tensor<T>*);

SSMSEP_INSTANTIATE(float)
SSMSEP_INSTANTIATE(double)
#undef SSMSEP_INSTANTIATE

}  // namespace ssmsep
