// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/checks.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include "ssmsep/bmamba.h"
#include "ssmsep/errors.h"
#include "ssmsep/mixgen.h"
#include "ssmsep/objective.h"
#include "ssmsep/separator.h"
#include "ssmsep/spectral.h"
#include "ssmsep/ssm_kernel.h"

namespace ssmsep {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

CheckResult finish(std::string name, double value, double threshold, Clock::time_point t0,
                   std::string detail = {}) {
  CheckResult r;
  r.name = std::move(name);
  r.value = value;
  r.threshold = threshold;
  r.pass = std::isfinite(value) && value <= threshold;
  r.seconds = since(t0);
  r.detail = std::move(detail);
  return r;
}

Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, Precision p) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  // Values are pre-rounded so both precisions evaluate the same point.
  for (auto& v : t.values()) v = p == Precision::kF32 ? double(float(u(rng))) : u(rng);
  return t;
}

double norm_rel_err(std::span<const double> a, std::span<const double> b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

template <typename T>
std::vector<double> widen(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> central_diff(Tensor<double>& param, const std::function<double()>& loss, double h = 1e-6) {
  std::vector<double> g(param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double keep = param[i];
    param[i] = keep + h;
    const double up = loss();
    param[i] = keep - h;
    const double down = loss();
    param[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

struct ScanInstance {
  Tensor<double> x;
  ssm::ScanParams<double> p;
};

ScanInstance random_scan(std::mt19937_64& rng, std::size_t s, std::size_t l, std::size_t e, std::size_t n,
                         Precision prec) {
  ScanInstance in;
  in.x = uniform({s, l, e}, rng, -1, 1, prec);
  in.p.delta = uniform({s, l, e}, rng, 0.01, 1.0, prec);
  in.p.a = uniform({e, n}, rng, -2.0, -0.05, prec);
  in.p.b = uniform({s, l, n}, rng, -1, 1, prec);
  in.p.c = uniform({s, l, n}, rng, -1, 1, prec);
  return in;
}

template <typename T>
ssm::ScanParams<T> cast_params(const ssm::ScanParams<double>& p) {
  return {p.delta.cast<T>(), p.a.cast<T>(), p.b.cast<T>(), p.c.cast<T>()};
}

// The production scan, optionally with outputs delayed by one step.
template <typename T>
Tensor<T> scan_under_test(const Tensor<T>& x, const ssm::ScanParams<T>& p, bool off_by_one) {
  auto y = ssm::selective_scan(x, p);
  if (!off_by_one) return y;
  const std::size_t s_count = y.dim(0), l = y.dim(1), e = y.dim(2);
  Tensor<T> lagged(y.shape());
  for (std::size_t s = 0; s < s_count; ++s)
    for (std::size_t t = 1; t < l; ++t)
      for (std::size_t k = 0; k < e; ++k) lagged(s, t, k) = y(s, t - 1, k);
  return lagged;
}

template <typename T>
double scan_oracle_worst(const CheckOptions& opts) {
  std::mt19937_64 rng(opts.seed ^ 0x5ca7);
  std::uniform_int_distribution<std::size_t> nd(1, 4), td(1, 64), ed(1, 3), sd(1, 2);
  double worst = 0;
  for (std::size_t i = 0; i < opts.scan_instances; ++i) {
    const auto in = random_scan(rng, sd(rng), td(rng), ed(rng), nd(rng), opts.precision);
    const auto x = in.x.cast<T>();
    const auto p = cast_params<T>(in.p);
    const auto ref = ssm::selective_scan_ref(x, p);
    const auto got = scan_under_test(x, p, opts.scan_off_by_one);
    double scale = 0, diff = 0;
    for (std::size_t k = 0; k < ref.size(); ++k) {
      scale = std::max(scale, double(std::abs(ref[k])));
      diff = std::max(diff, double(std::abs(ref[k] - got[k])));
    }
    worst = std::max(worst, scale > 0 ? diff / scale : diff);
  }
  return worst;
}

template <typename T>
double scan_grad_worst(const CheckOptions& opts) {
  std::mt19937_64 rng(opts.seed ^ 0x96ad);
  std::uniform_int_distribution<std::size_t> nd(1, 3), td(1, 16);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    auto in = random_scan(rng, 2, td(rng), 2, nd(rng), opts.precision);
    const auto w = uniform(in.x.shape(), rng, -1, 1, opts.precision);
    ssm::ScanCache<T> cache;
    ssm::selective_scan(in.x.cast<T>(), cast_params<T>(in.p), nullptr, &cache);
    const auto g = ssm::selective_scan_grad(cache, w.cast<T>());
    auto loss = [&] { return dot(ssm::selective_scan_ref(in.x, in.p), w); };
    worst = std::max(worst, norm_rel_err(widen(g.dx), central_diff(in.x, loss)));
    worst = std::max(worst, norm_rel_err(widen(g.dparams.delta), central_diff(in.p.delta, loss)));
    worst = std::max(worst, norm_rel_err(widen(g.dparams.a), central_diff(in.p.a, loss)));
    worst = std::max(worst, norm_rel_err(widen(g.dparams.b), central_diff(in.p.b, loss)));
    worst = std::max(worst, norm_rel_err(widen(g.dparams.c), central_diff(in.p.c, loss)));
  }
  return worst;
}

// Copies every parameter of `src` into the identically shaped `dst`.
template <typename Dst, typename Src, typename VisitDst, typename VisitSrc>
void copy_params(VisitDst&& visit_dst, VisitSrc&& visit_src) {
  std::vector<const Tensor<Src>*> values;
  visit_src([&](const std::string&, Var<Src>& v) { values.push_back(&v.value()); });
  std::size_t i = 0;
  visit_dst([&](const std::string&, Var<Dst>& v) { v.mutable_value() = values.at(i++)->template cast<Dst>(); });
}

MambaDims check_dims() {
  MambaDims d;
  d.d_model = 4;
  d.d_inner = 8;
  d.d_state = 4;
  d.conv_width = 3;
  d.dt_rank = 2;
  return d;
}

template <typename T>
double bmamba_grad_worst(const CheckOptions& opts) {
  std::mt19937_64 rng(opts.seed ^ 0xb3a3);
  BMambaWeights<double> w(check_dims());
  w.init(rng);
  if (opts.precision == Precision::kF32)
    w.visit("", [](const std::string&, Var<double>& v) {
      for (auto& x : v.mutable_value().values()) x = double(float(x));
    });
  auto x = uniform({2, 12, 4}, rng, -1, 1, opts.precision);
  const auto dy = uniform({2, 12, 4}, rng, -1, 1, opts.precision);

  BMambaWeights<T> wt(check_dims());
  copy_params<T, double>([&](auto&& f) { wt.visit("", f); }, [&](auto&& f) { w.visit("", f); });
  const auto g = bmamba_grad(x.cast<T>(), wt, dy.cast<T>());

  auto loss = [&] { return dot(bmamba_forward(x, w), dy); };
  // Some tensors (a_log, dt_proj) carry gradients near 1e-4, where round-off
  // at h = 1e-6 would dominate the difference quotient.
  constexpr double h = 1e-5;
  double worst = norm_rel_err(widen(g.dx), central_diff(x, loss, h));
  w.visit("", [&](const std::string& name, Var<double>& v) {
    worst = std::max(worst, norm_rel_err(widen(g[name]), central_diff(v.mutable_value(), loss, h)));
  });
  return worst;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.blocks = 1;
  c.channels = 8;
  c.module_hidden = 8;
  c.bmamba_hidden = 8;
  c.kernel = 8;
  c.window = 128;
  c.hop = 32;
  c.fft_size = 128;
  c.sample_rate = 8000;
  c.heads = 2;
  c.d_state = 4;
  return c;
}

// Returns infinity when some parameter receives no gradient or a non-finite one.
template <typename T>
double model_grad_worst(const CheckOptions& opts, std::size_t& checked) {
  auto cfg = tiny_model();
  cfg.fd_uses_bmamba = opts.fd_uses_bmamba;
  cfg.td_uses_bmamba = opts.td_uses_bmamba;
  std::mt19937_64 rng(opts.seed ^ 0x30de);
  const auto mix = uniform({400}, rng, -0.5, 0.5, opts.precision);
  const auto refs = uniform({2, 400}, rng, -0.5, 0.5, opts.precision);

  SeparatorWeights<double> wd(cfg);
  wd.init(opts.seed + 17);
  if (opts.precision == Precision::kF32)
    wd.visit([](const std::string&, Var<double>& v) {
      for (auto& x : v.mutable_value().values()) x = double(float(x));
    });
  SeparatorWeights<T> wt(cfg);
  copy_params<T, double>([&](auto&& f) { wt.visit(f); }, [&](auto&& f) { wd.visit(f); });
  wt.set_requires_grad(true);
  Separator<T> model_t(wt);
  backward(ag::pit_neg_snr(model_t.forward(mix.cast<T>()), refs.cast<T>()));

  std::vector<std::pair<Var<T>, std::size_t>> all;
  bool reached = true;
  wt.visit([&](const std::string&, Var<T>& v) {
    reached = reached && v.has_grad() && v.grad().all_finite();
    for (std::size_t i = 0; i < v.value().size(); ++i) all.emplace_back(v, i);
  });
  if (!reached) return std::numeric_limits<double>::infinity();
  std::vector<std::pair<Var<double>, std::size_t>> all_d;
  wd.visit([&](const std::string&, Var<double>& v) {
    for (std::size_t i = 0; i < v.value().size(); ++i) all_d.emplace_back(v, i);
  });
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  checked = std::min<std::size_t>(order.size(), 60);

  Separator<double> model_d(wd);
  auto loss = [&] { return ag::pit_neg_snr(model_d.forward(mix), refs).value()[0]; };
  std::vector<double> analytic, numeric;
  for (std::size_t k = 0; k < checked; ++k) {
    const auto& [vt, i] = all[order[k]];
    analytic.push_back(vt.has_grad() ? double(vt.grad()[i]) : 0.0);
    auto& val = all_d[order[k]].first.mutable_value()[i];
    const double keep = val, h = 1e-6;
    val = keep + h;
    const double up = loss();
    val = keep - h;
    const double down = loss();
    val = keep;
    numeric.push_back((up - down) / (2 * h));
  }
  return norm_rel_err(analytic, numeric);
}

template <typename T>
double stft_worst(const CheckOptions& opts) {
  Stft<T> plan(StftConfig{512, 128, 512, WindowType::kHann});
  std::mt19937_64 rng(opts.seed ^ 0x57f7);
  std::uniform_int_distribution<std::size_t> len(16000, 64000);
  std::normal_distribution<double> g;
  double worst = 0;
  for (std::size_t i = 0; i < opts.stft_signals; ++i) {
    std::vector<T> x(len(rng));
    for (auto& v : x) v = T(g(rng));
    const auto y = plan.synthesize(plan.analyze(x), x.size());
    worst = std::max(worst, rel_l2<T>(y, x));
  }
  return worst;
}

AudioBuffer speechy(double seconds, int rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  AudioBuffer a;
  a.sample_rate = rate;
  a.samples.resize(std::size_t(seconds * rate));
  double lp = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    lp = 0.95 * lp + 0.05 * g(rng);
    const double env = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * 4.0 * double(i) / rate);
    a.samples[i] = float(0.5 * lp * env);
  }
  return a;
}

}  // namespace

CheckResult check_scan_oracle(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  const double worst = opts.precision == Precision::kF32 ? scan_oracle_worst<float>(opts) : scan_oracle_worst<double>(opts);
  return finish("scan_oracle", worst, 1e-6, t0, std::to_string(opts.scan_instances) + " instances");
}

CheckResult check_zoh_closed_form(const CheckOptions&) {
  const auto t0 = Clock::now();
  const auto step = ssm::discretize_zoh(-1.0, 1.0, std::log(2.0));
  double worst = std::max(std::abs(step.a_bar - 0.5), std::abs(step.b_bar - 0.5));
  double branch = 0;
  for (double a : {-1.0, -3.0, -0.5, 2.0}) {
    const double delta = ssm::kSeriesThreshold / std::abs(a);
    const double exact = ssm::zoh_input_gain_exact(a, delta);
    branch = std::max(branch, std::abs(exact - ssm::zoh_input_gain_series(a, delta)) / std::abs(exact));
  }
  // Both conditions fold into one number: each is scaled to its own limit.
  const double value = std::max(worst / 1e-12, branch / 1e-8);
  char buf[96];
  std::snprintf(buf, sizeof buf, "closed form err %.2e, branch gap %.2e", worst, branch);
  return finish("zoh_closed_form", value, 1.0, t0, buf);
}

CheckResult check_scan_gradient(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  const bool f32 = opts.precision == Precision::kF32;
  const double worst = f32 ? scan_grad_worst<float>(opts) : scan_grad_worst<double>(opts);
  return finish("scan_gradient", worst, f32 ? 1e-3 : 1e-4, t0);
}

CheckResult check_bmamba_gradient(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  const bool f32 = opts.precision == Precision::kF32;
  const double worst = f32 ? bmamba_grad_worst<float>(opts) : bmamba_grad_worst<double>(opts);
  return finish("bmamba_gradient", worst, f32 ? 1e-3 : 1e-4, t0);
}

CheckResult check_model_gradient(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  const bool f32 = opts.precision == Precision::kF32;
  std::size_t checked = 0;
  const double worst = f32 ? model_grad_worst<float>(opts, checked) : model_grad_worst<double>(opts, checked);
  std::string core = std::string("fd ") + (opts.fd_uses_bmamba ? "bmamba" : "gru") + ", td " +
                     (opts.td_uses_bmamba ? "bmamba" : "gru");
  return finish("model_gradient", worst, f32 ? 1e-2 : 1e-3, t0,
                std::to_string(checked) + " sampled weights, B=1 C=8, " + core);
}

CheckResult check_stft_roundtrip(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  const double worst = opts.precision == Precision::kF32 ? stft_worst<float>(opts) : stft_worst<double>(opts);
  return finish("stft_roundtrip", worst, 1e-6, t0, std::to_string(opts.stft_signals) + " signals, hann 512/128");
}

CheckResult check_pit_bruteforce(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(opts.seed ^ 0x9170);
  std::normal_distribution<double> g;
  const std::size_t perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  std::size_t mismatches = 0;
  for (std::size_t trial = 0; trial < opts.pit_instances; ++trial) {
    std::vector<std::vector<double>> ests(3, std::vector<double>(64)), refs(3, std::vector<double>(64));
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 64; ++i) {
        refs[j][i] = g(rng);
        ests[j][i] = g(rng) + (trial % 4 == j ? 0.7 * refs[j][i] : 0.0);
      }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : perms) {
      double sum = 0;
      for (std::size_t j = 0; j < 3; ++j) sum += neg_snr_loss(ests[j], refs[p[j]]);
      best = std::min(best, sum / 3);
    }
    mismatches += pit(ests, refs).loss != best;
  }
  return finish("pit_bruteforce", double(mismatches), 0.0, t0,
                std::to_string(opts.pit_instances) + " instances, J=3, exact equality");
}

CheckResult check_lufs_closed_loop(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(opts.seed ^ 0x1f5);
  std::uniform_real_distribution<double> target(-30, -10);
  double worst = 0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const double t = target(rng);
    const auto r = set_loudness(speechy(2.0 + 0.2 * double(i), 16000, opts.seed + i), t);
    worst = std::max(worst, std::abs(measure_lufs(r.audio) - t));
  }
  return finish("lufs_closed_loop", worst, 0.1, t0, "LU, 10 signals");
}

CheckResult check_mixgen_audit(const CheckOptions& opts) {
  const auto t0 = Clock::now();
  std::map<std::string, AudioBuffer> files;
  files["a1"] = speechy(1.5, 16000, opts.seed + 1);
  files["a2"] = speechy(1.0, 16000, opts.seed + 2);
  files["b1"] = speechy(2.0, 16000, opts.seed + 3);
  files["fx"] = speechy(0.8, 16000, opts.seed + 4);
  AudioBuffer ir;
  ir.samples.assign(300, 0.0f);
  std::mt19937_64 rng(opts.seed ^ 0x3170);
  std::normal_distribution<double> g;
  ir.samples[0] = 1.0f;
  for (std::size_t i = 1; i < ir.size(); ++i) ir.samples[i] = float(0.3 * g(rng) * std::exp(-double(i) / 60.0));
  files["room"] = ir;
  const AudioLoader load = [&](const std::string& p) { return files.at(p); };

  double worst = 0;
  bool deterministic = true;
  for (std::uint64_t k = 0; k < 3; ++k) {
    SceneSpec s;
    s.duration_s = 4.0;
    s.seed = opts.seed + k;
    s.speech = {{"a1", "A", -1, 0, "room"}, {"a2", "A", -1, 0, "room"}, {"b1", "B", -1, 0, "room"}};
    s.effects = {{"fx", "", -1, 0, ""}};
    const auto item = synthesize_scene(s, load);
    double err = 0, peak = 0;
    for (std::size_t i = 0; i < item.mixture.size(); ++i) {
      double sum = 0;
      for (const auto& st : item.stems) sum += st.samples[i];
      err = std::max(err, std::abs(sum - item.mixture.samples[i]));
      peak = std::max(peak, std::abs(double(item.mixture.samples[i])));
    }
    worst = std::max(worst, err / std::max(peak, 1e-30));
    const auto again = synthesize_scene(s, load);
    deterministic &= std::memcmp(again.mixture.samples.data(), item.mixture.samples.data(),
                                 item.mixture.size() * sizeof(float)) == 0;
  }
  return finish("mixgen_audit", deterministic ? worst : std::numeric_limits<double>::infinity(), 1e-6, t0,
                deterministic ? "additivity residual, reruns identical" : "reruns differ");
}

std::vector<CheckResult> run_all_checks(const CheckOptions& opts) {
  return {check_scan_oracle(opts),     check_zoh_closed_form(opts),  check_scan_gradient(opts),
          check_bmamba_gradient(opts), check_model_gradient(opts),   check_stft_roundtrip(opts),
          check_pit_bruteforce(opts),  check_lufs_closed_loop(opts), check_mixgen_audit(opts)};
}

std::string format_checks(const std::vector<CheckResult>& results) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-18s %-6s %12s %12s %8s  %s\n", "check", "status", "value", "threshold",
                "seconds", "detail");
  out += line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-18s %-6s %12.3e %12.3e %8.2f  %s\n", r.name.c_str(),
                  r.pass ? "PASS" : "FAIL", r.value, r.threshold, r.seconds, r.detail.c_str());
    out += line;
  }
  return out;
}

}  // namespace ssmsep
