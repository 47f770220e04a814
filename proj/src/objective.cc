// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/objective.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "ssmsep/errors.h"

namespace ssmsep {

namespace {

constexpr double kExactResidual = 1e-24;
constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(std::span<const double> est, std::span<const double> ref, const char* who) {
  if (est.size() != ref.size())
    throw ContractError(std::string(who) + ": length mismatch " + std::to_string(est.size()) + " vs " +
                        std::to_string(ref.size()));
}

double energy(std::span<const double> x) {
  double s = 0;
  for (double v : x) s += v * v;
  return s;
}

std::vector<double> centered(std::span<const double> x) {
  const double mean = x.empty() ? 0.0 : std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
  std::vector<double> out(x.begin(), x.end());
  for (auto& v : out) v -= mean;
  return out;
}

double ratio_db(double target, double residual) {
  if (target == 0) return -kInf;
  if (residual <= kExactResidual * target) return kInf;
  return 10.0 * std::log10(target / residual);
}

// 10 log10 of |proj|^2 / |est - proj|^2, proj = <est, ref>/|ref|^2 ref.
double projected_db(std::span<const double> est, std::span<const double> ref, const char* who) {
  const double rr = energy(ref);
  if (rr == 0) throw DomainError(std::string(who) + ": reference is silent");
  double er = 0;
  for (std::size_t i = 0; i < est.size(); ++i) er += est[i] * ref[i];
  const double alpha = er / rr;
  double target = 0, residual = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double s = alpha * ref[i];
    target += s * s;
    residual += (est[i] - s) * (est[i] - s);
  }
  return ratio_db(target, residual);
}

struct SnrTerms {
  double p = 0, q = 0;  // |r|^2, |r - e|^2
  double ratio() const { return p / (q + kLossEps); }
  double db() const { return 10.0 * std::log10(ratio() + kLossEps); }
  bool clamped() const { return std::abs(db()) > kSnrClamp; }
  double loss() const { return -std::clamp(db(), -kSnrClamp, kSnrClamp); }
};

template <typename T>
SnrTerms snr_terms(const T* e, const T* r, std::size_t n) {
  SnrTerms t;
  for (std::size_t i = 0; i < n; ++i) {
    t.p += double(r[i]) * double(r[i]);
    const double d = double(r[i]) - double(e[i]);
    t.q += d * d;
  }
  return t;
}

}  // namespace

double snr(std::span<const double> est, std::span<const double> ref) {
  check_pair(est, ref, "snr");
  const double p = energy(ref);
  if (p == 0) throw DomainError("snr: reference is silent");
  double q = 0;
  for (std::size_t i = 0; i < est.size(); ++i) q += (ref[i] - est[i]) * (ref[i] - est[i]);
  return q == 0 ? kInf : 10.0 * std::log10(p / q);
}

double si_snr(std::span<const double> est, std::span<const double> ref) {
  check_pair(est, ref, "si_snr");
  const auto e = centered(est), r = centered(ref);
  return projected_db(e, r, "si_snr");
}

double si_snri(std::span<const double> est, std::span<const double> ref, std::span<const double> mix) {
  return si_snr(est, ref) - si_snr(mix, ref);
}

double sdr(std::span<const double> est, std::span<const double> ref) {
  check_pair(est, ref, "sdr");
  return projected_db(est, ref, "sdr");
}

double sdri(std::span<const double> est, std::span<const double> ref, std::span<const double> mix) {
  return sdr(est, ref) - sdr(mix, ref);
}

double neg_snr_loss(std::span<const double> est, std::span<const double> ref) {
  check_pair(est, ref, "neg_snr_loss");
  return snr_terms(est.data(), ref.data(), est.size()).loss();
}

PitResult pit(const std::vector<std::vector<double>>& ests, const std::vector<std::vector<double>>& refs,
              const PitCriterion& criterion) {
  const std::size_t J = ests.size();
  if (J != refs.size())
    throw ContractError("pit: " + std::to_string(J) + " estimates vs " + std::to_string(refs.size()) + " references");
  if (J == 0 || J > 4) throw ContractError("pit: supports 1 to 4 sources");
  std::vector<double> cost(J * J);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t k = 0; k < J; ++k) cost[j * J + k] = criterion(ests[j], refs[k]);

  std::vector<std::size_t> perm(J);
  std::iota(perm.begin(), perm.end(), 0);
  PitResult best{kInf, perm};
  do {
    double sum = 0;
    for (std::size_t j = 0; j < J; ++j) sum += cost[j * J + perm[j]];
    const double loss = sum / double(J);
    if (loss < best.loss) best = {loss, perm};  // strict: first minimum is lexicographically smallest
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

namespace ag {

template <typename T>
Var<T> pit_neg_snr(const Var<T>& est, const Tensor<T>& refs, std::vector<std::size_t>* permutation) {
  if (est.shape().size() != 2 || est.shape() != refs.shape())
    throw ContractError("pit_neg_snr: est " + shape_str(est.shape()) + " vs refs " + shape_str(refs.shape()));
  const std::size_t J = est.shape()[0], L = est.shape()[1];
  if (J == 0 || J > 4) throw ContractError("pit_neg_snr: supports 1 to 4 sources");
  std::vector<SnrTerms> terms(J * J);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t k = 0; k < J; ++k)
      terms[j * J + k] = snr_terms(est.value().data() + j * L, refs.data() + k * L, L);

  std::vector<std::size_t> perm(J), best_perm;
  std::iota(perm.begin(), perm.end(), 0);
  double best = kInf;
  do {
    double sum = 0;
    for (std::size_t j = 0; j < J; ++j) sum += terms[j * J + perm[j]].loss();
    if (sum / double(J) < best) {
      best = sum / double(J);
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (permutation) *permutation = best_perm;

  return make_op<T>(Tensor<T>({1}, T(best)), {est}, [terms, best_perm, refs, J, L](Node<T>& self) {
    auto& parent = *self.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    const double up = double(self.grad[0]);
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t k = best_perm[j];
      const SnrTerms& t = terms[j * J + k];
      if (t.clamped()) continue;
      // d(-s/J)/de_i with s = 10 log10(P/(Q+eps) + eps), dQ/de_i = -2 (r_i - e_i).
      const double q1 = t.q + kLossEps;
      const double coef = -up / double(J) * (10.0 / std::numbers::ln10) * t.p / ((t.ratio() + kLossEps) * q1 * q1) * 2.0;
      const T* e = parent.value.data() + j * L;
      const T* r = refs.data() + k * L;
      for (std::size_t i = 0; i < L; ++i) g[j * L + i] += T(coef * (double(r[i]) - double(e[i])));
    }
  });
}

template Var<float> pit_neg_snr<float>(const Var<float>&, const Tensor<float>&, std::vector<std::size_t>*);
template Var<double> pit_neg_snr<double>(const Var<double>&, const Tensor<double>&, std::vector<std::size_t>*);

}  // namespace ag

template <typename T>
double adam_step(std::span<Tensor<T>* const> params, std::span<Tensor<T>> grads, OptimizerState<T>& st,
                 const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params/grads count mismatch");
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match params");
  double sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() || st.m[i].shape() != params[i]->shape())
      throw ContractError("adam_step: shape mismatch at parameter " + std::to_string(i));
    for (T g : grads[i].values()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient at parameter " + std::to_string(i));
      sq += double(g) * double(g);
    }
  }
  const double norm = std::sqrt(sq);
  const double clip = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  if (clip != 1.0)
    for (auto& g : grads)
      for (auto& v : g.values()) v = T(double(v) * clip);

  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    auto& p = *params[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = double(g[k]);
      const double mk = cfg.beta1 * double(m[k]) + (1 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * double(v[k]) + (1 - cfg.beta2) * gk * gk;
      m[k] = T(mk);
      v[k] = T(vk);
      p[k] = T(double(p[k]) - st.lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps));
    }
  }
  return norm;
}

template <typename T>
Adam<T>::Adam(std::vector<Var<T>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  state_.lr = config.lr;
}

template <typename T>
double Adam<T>::step() {
  std::vector<Tensor<T>*> ps;
  std::vector<Tensor<T>> gs;
  ps.reserve(params_.size());
  gs.reserve(params_.size());
  for (auto& p : params_) {
    ps.push_back(&p.mutable_value());
    gs.push_back(p.has_grad() ? p.grad() : Tensor<T>(p.shape()));
  }
  return adam_step<T>(ps, gs, state_, config_);
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template double adam_step<float>(std::span<Tensor<float>* const>, std::span<Tensor<float>>,
                                 OptimizerState<float>&, const AdamConfig&);
template double adam_step<double>(std::span<Tensor<double>* const>, std::span<Tensor<double>>,
                                  OptimizerState<double>&, const AdamConfig&);
template class Adam<float>;
template class Adam<double>;

PlateauScheduler::PlateauScheduler(std::size_t halve_patience, std::size_t stop_patience, double factor)
    : halve_patience_(halve_patience), stop_patience_(stop_patience), factor_(factor), best_(kInf) {}

PlateauScheduler::Action PlateauScheduler::observe(double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    since_best_ = 0;
    since_halve_ = 0;
    return Action::kNone;
  }
  ++since_best_;
  ++since_halve_;
  if (stop_patience_ && since_best_ >= stop_patience_) return Action::kStop;
  if (halve_patience_ && since_halve_ >= halve_patience_) {
    since_halve_ = 0;
    return Action::kHalve;
  }
  return Action::kNone;
}

}  // namespace ssmsep
