// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/train.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "ssmsep/errors.h"
#include "ssmsep/fft.h"

namespace ssmsep {

namespace {

void check_dataset(const std::vector<Example>& items, std::size_t speakers, const char* what) {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& ex = items[i];
    if (ex.refs.size() != speakers)
      throw ContractError(std::string(what) + " item " + std::to_string(i) + " has " +
                          std::to_string(ex.refs.size()) + " references, model expects " +
                          std::to_string(speakers));
    for (const auto& r : ex.refs)
      if (r.size() != ex.mix.size())
        throw ContractError(std::string(what) + " item " + std::to_string(i) + ": reference length differs");
  }
}

template <typename T>
Tensor<T> to_tensor(std::span<const double> x) {
  Tensor<T> t({x.size()});
  std::transform(x.begin(), x.end(), t.values().begin(), [](double v) { return T(v); });
  return t;
}

template <typename T>
Tensor<T> refs_tensor(const std::vector<std::vector<double>>& refs, std::size_t lo, std::size_t len) {
  Tensor<T> t({refs.size(), len});
  for (std::size_t j = 0; j < refs.size(); ++j)
    for (std::size_t i = 0; i < len; ++i) t(j, i) = T(refs[j][lo + i]);
  return t;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Unit-RMS Gaussian noise with energy only in bins [lo_hz, hi_hz].
std::vector<double> band_noise(std::size_t n, int rate, double lo_hz, double hi_hz, std::mt19937_64& rng) {
  const std::size_t m = next_pow2(n);
  Fft<double> fft(m);
  std::normal_distribution<double> g;
  std::vector<std::complex<double>> spec(m / 2 + 1);
  const double bin_hz = double(rate) / double(m);
  for (std::size_t k = 1; k < m / 2; ++k) {
    const double f = double(k) * bin_hz;
    if (f >= lo_hz && f <= hi_hz) spec[k] = {g(rng), g(rng)};
  }
  std::vector<double> full(m);
  fft.irfft(spec, full);
  full.resize(n);
  const double rms = std::sqrt(std::inner_product(full.begin(), full.end(), full.begin(), 0.0) / double(n));
  for (auto& v : full) v /= rms > 0 ? rms : 1.0;
  return full;
}

// Random on/off segments of 0.1-0.4 s joined by 10 ms raised-cosine ramps.
std::vector<double> gate_envelope(std::size_t n, int rate, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> seg(0.1, 0.4);
  std::bernoulli_distribution on(0.7);
  std::vector<double> level(n);
  for (std::size_t i = 0; i < n;) {
    const auto len = std::size_t(seg(rng) * rate);
    const double v = on(rng) ? 1.0 : 0.05;
    for (std::size_t k = 0; k < len && i < n; ++k, ++i) level[i] = v;
  }
  const auto ramp = std::max<std::size_t>(1, std::size_t(0.01 * rate));
  std::vector<double> out(n);
  double acc = 0;
  // Moving average over `ramp` samples smooths each step into a linear ramp.
  for (std::size_t i = 0; i < n; ++i) {
    acc += level[i];
    if (i >= ramp) acc -= level[i - ramp];
    out[i] = acc / double(std::min(i + 1, ramp));
  }
  return out;
}

}  // namespace

std::vector<Example> make_band_noise_dataset(std::size_t items, double seconds, int sample_rate,
                                             std::uint64_t seed) {
  if (seconds <= 0 || sample_rate <= 0) throw ConfigError("toy dataset needs positive duration and rate");
  const auto n = std::size_t(std::lround(seconds * sample_rate));
  const double nyq = 0.5 * sample_rate;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Example> out;
  out.reserve(items);
  for (std::size_t it = 0; it < items; ++it) {
    Example ex;
    ex.mix.assign(n, 0.0);
    for (int s = 0; s < 2; ++s) {
      // Source 0 lives in (0.02, 0.45) nyq, source 1 in (0.55, 0.95) nyq.
      const double region_lo = s == 0 ? 0.02 * nyq : 0.55 * nyq;
      const double region_hi = s == 0 ? 0.45 * nyq : 0.95 * nyq;
      const double width = (region_hi - region_lo) * (0.3 + 0.7 * unit(rng));
      const double lo = region_lo + (region_hi - region_lo - width) * unit(rng);
      auto x = band_noise(n, sample_rate, lo, lo + width, rng);
      const auto env = gate_envelope(n, sample_rate, rng);
      const double gain = 0.1 * std::pow(10.0, (unit(rng) - 0.5) * 10.0 / 20.0);  // +-5 dB
      for (std::size_t i = 0; i < n; ++i) {
        x[i] *= gain * env[i];
        ex.mix[i] += x[i];
      }
      ex.refs.push_back(std::move(x));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

template <typename T>
EvalResult evaluate(const Separator<T>& model, const std::vector<Example>& items) {
  if (items.empty()) throw ContractError("evaluate: empty dataset");
  check_dataset(items, model.config().speakers, "evaluation");
  EvalResult r;
  for (const auto& ex : items) {
    const auto est = model.forward(to_tensor<T>(ex.mix)).value();
    const std::size_t j_count = est.dim(0), len = est.dim(1);
    std::vector<std::vector<double>> ests(j_count, std::vector<double>(len));
    for (std::size_t j = 0; j < j_count; ++j)
      for (std::size_t i = 0; i < len; ++i) ests[j][i] = double(est(j, i));
    const auto p = pit(ests, ex.refs);
    double gain = 0;
    for (std::size_t j = 0; j < j_count; ++j) gain += si_snri(ests[j], ex.refs[p.permutation[j]], ex.mix);
    r.loss += p.loss;
    r.sisnri += gain / double(j_count);
  }
  r.loss /= double(items.size());
  r.sisnri /= double(items.size());
  return r;
}

template <typename T>
TrainResult train_toy(Separator<T>& model, const std::vector<Example>& train, const std::vector<Example>& val,
                      const TrainConfig& config, const EpochCallback& on_epoch) {
  if (train.empty()) throw ContractError("train_toy: empty training set");
  if (config.batch == 0) throw ConfigError("train_toy: batch must be positive");
  check_dataset(train, model.config().speakers, "training");
  check_dataset(val, model.config().speakers, "validation");
  const auto& val_set = val.empty() ? train : val;

  const auto start = std::chrono::steady_clock::now();
  auto& weights = model.weights();
  weights.set_requires_grad(true);
  Adam<T> opt(weights.parameters(), config.adam);
  PlateauScheduler plateau(config.halve_patience, config.stop_patience);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.stop_reason = "epochs";
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch) {
      const std::size_t end = std::min(order.size(), b + config.batch);
      const T inv = T(1) / T(end - b);
      opt.zero_grad();
      for (std::size_t k = b; k < end; ++k) {
        const auto& ex = train[order[k]];
        std::size_t lo = 0, len = ex.mix.size();
        if (config.crop_samples && config.crop_samples < len) {
          lo = std::uniform_int_distribution<std::size_t>(0, len - config.crop_samples)(rng);
          len = config.crop_samples;
        }
        const auto est = model.forward(to_tensor<T>(std::span(ex.mix).subspan(lo, len)));
        const auto loss = ag::pit_neg_snr(est, refs_tensor<T>(ex.refs, lo, len));
        const double lv = double(loss.value()[0]);
        if (!std::isfinite(lv)) throw NumericError("training loss is not finite");
        loss_sum += lv;
        backward(ag::scale(loss, inv));
      }
      opt.step();
    }

    // Evaluation runs without the graph so inference chunking applies.
    weights.set_requires_grad(false);
    const auto ev = evaluate(model, val_set);
    weights.set_requires_grad(true);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / double(train.size());
    m.val_loss = ev.loss;
    m.val_sisnri = ev.sisnri;
    m.lr = opt.lr();
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);

    if (ev.sisnri >= config.target_sisnri) {
      result.stop_reason = "target";
      break;
    }
    const auto action = plateau.observe(ev.loss);
    if (action == PlateauScheduler::Action::kStop) {
      result.stop_reason = "plateau";
      break;
    }
    if (action == PlateauScheduler::Action::kHalve) opt.set_lr(opt.lr() * plateau.factor());
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (config.time_limit_s > 0 && elapsed >= config.time_limit_s && epoch < config.epochs) {
      result.stop_reason = "time";
      break;
    }
  }
  weights.set_requires_grad(false);
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_sisnri,lr\n";
  out.precision(10);
  for (const auto& m : history)
    out << m.epoch << ',' << m.train_loss << ',' << m.val_loss << ',' << m.val_sisnri << ',' << m.lr << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

template EvalResult evaluate<float>(const Separator<float>&, const std::vector<Example>&);
template EvalResult evaluate<double>(const Separator<double>&, const std::vector<Example>&);
template TrainResult train_toy<float>(Separator<float>&, const std::vector<Example>&, const std::vector<Example>&,
                                      const TrainConfig&, const EpochCallback&);
template TrainResult train_toy<double>(Separator<double>&, const std::vector<Example>&,
                                       const std::vector<Example>&, const TrainConfig&, const EpochCallback&);

}  // namespace ssmsep
