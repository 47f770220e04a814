// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>

#include "ssmsep/errors.h"
#include "ssmsep/objective.h"
#include "test_util.h"

using namespace ssmsep;

namespace {

using Vec = std::vector<double>;
constexpr double kInf = std::numeric_limits<double>::infinity();

Vec randn(std::size_t n, std::mt19937_64& rng, double mean = 0.0) {
  std::normal_distribution<double> g(mean, 1.0);
  Vec v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Literal transcription of the scale-invariant SNR definition.
double si_snr_oracle(const Vec& est, const Vec& ref) {
  long double me = 0, mr = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    me += est[i];
    mr += ref[i];
  }
  me /= est.size();
  mr /= ref.size();
  long double dot = 0, rr = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    dot += (est[i] - me) * (ref[i] - mr);
    rr += (ref[i] - mr) * (ref[i] - mr);
  }
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const long double s_target = dot / rr * (ref[i] - mr);
    const long double e_noise = (est[i] - me) - s_target;
    num += s_target * s_target;
    den += e_noise * e_noise;
  }
  return double(10 * std::log10(num / den));
}

double sdr_oracle(const Vec& est, const Vec& ref) {
  long double dot = 0, rr = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    dot += est[i] * ref[i];
    rr += ref[i] * ref[i];
  }
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const long double t = dot / rr * ref[i];
    num += t * t;
    den += (est[i] - t) * (est[i] - t);
  }
  return double(10 * std::log10(num / den));
}

}  // namespace

TEST_CASE("snr definition") {
  std::mt19937_64 rng(1);
  const auto ref = randn(1000, rng);
  CHECK(snr(ref, ref) == kInf);
  CHECK(neg_snr_loss(ref, ref) == -30.0);
  CHECK(snr(Vec(1000, 0.0), ref) == doctest::Approx(0.0).epsilon(1e-12));

  auto n = randn(1000, rng);
  double pr = 0, pn = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    pr += ref[i] * ref[i];
    pn += n[i] * n[i];
  }
  Vec est(1000);
  for (std::size_t i = 0; i < 1000; ++i) est[i] = ref[i] + n[i] * std::sqrt(pr / 100 / pn);
  CHECK(snr(est, ref) == doctest::Approx(20.0).epsilon(1e-10));
  CHECK(neg_snr_loss(est, ref) == doctest::Approx(-20.0).epsilon(1e-6));

  CHECK_THROWS_AS(snr(ref, Vec(1000, 0.0)), DomainError);
  CHECK_THROWS_AS(snr(Vec(3), Vec(4, 1.0)), ContractError);
  // Very wrong estimates clamp at +30 loss.
  Vec far(ref);
  for (auto& v : far) v *= -1e3;
  CHECK(neg_snr_loss(far, ref) == 30.0);
}

TEST_CASE("si_snr and sdr against literal oracles") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ref = randn(500, rng, 0.3);
    const auto est = randn(500, rng, -0.2);
    CHECK(std::abs(si_snr(est, ref) - si_snr_oracle(est, ref)) < 1e-10);
    CHECK(std::abs(sdr(est, ref) - sdr_oracle(est, ref)) < 1e-10);
  }
  CHECK_THROWS_AS(si_snr(Vec(10, 1.0), Vec(10, 2.0)), DomainError);  // constant ref is silent after centering
  CHECK_THROWS_AS(sdr(Vec(10, 1.0), Vec(10, 0.0)), DomainError);
}

TEST_CASE("scaled references are perfect; the mixture scores zero improvement") {
  std::mt19937_64 rng(3);
  const auto ref = randn(800, rng);
  const auto mix = randn(800, rng);
  for (double a : {0.37, -2.5, 3.0, 1e-3}) {
    Vec est(ref);
    for (auto& v : est) v *= a;
    CHECK(si_snr(est, ref) == kInf);
    CHECK(sdr(est, ref) == kInf);
  }
  CHECK(si_snri(mix, ref, mix) == 0.0);
  CHECK(sdri(mix, ref, mix) == 0.0);
}

TEST_CASE("si_snr is scale invariant") {
  std::mt19937_64 rng(4);
  const auto ref = randn(700, rng);
  const auto est = randn(700, rng);
  const double base = si_snr(est, ref);
  for (double a : {2.0, 0.5, 1024.0}) {
    Vec s(est);
    for (auto& v : s) v *= a;
    CHECK(si_snr(s, ref) == base);  // powers of two scale exactly
  }
  for (double a : {0.3, 7.1, 1e4}) {
    Vec s(est);
    for (auto& v : s) v *= a;
    CHECK(std::abs(si_snr(s, ref) - base) < 1e-10);
  }
}

TEST_CASE("pit selects the best pairing") {
  std::mt19937_64 rng(5);
  const auto r0 = randn(300, rng), r1 = randn(300, rng);
  const auto res = pit({r1, r0}, {r0, r1});
  CHECK(res.permutation == std::vector<std::size_t>{1, 0});
  CHECK(res.loss == -30.0);

  // Permuting the references permutes the assignment, not the loss.
  const auto e0 = randn(300, rng), e1 = randn(300, rng), e2 = randn(300, rng);
  const auto q0 = randn(300, rng), q1 = randn(300, rng), q2 = randn(300, rng);
  const auto a = pit({e0, e1, e2}, {q0, q1, q2});
  const auto b = pit({e0, e1, e2}, {q2, q0, q1});  // position p holds q[(p + 2) % 3]
  CHECK(a.loss == b.loss);
  for (std::size_t j = 0; j < 3; ++j) CHECK((b.permutation[j] + 2) % 3 == a.permutation[j]);

  CHECK_THROWS_AS(pit({e0, e1}, {q0}), ContractError);
  // Ties resolve to the lexicographically smallest permutation.
  CHECK(pit({e0, e0}, {e0, e0}).permutation == std::vector<std::size_t>{0, 1});
}

TEST_CASE("pit equals a brute-force loop for J = 3") {
  std::mt19937_64 rng(6);
  const std::size_t perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Vec> ests, refs;
    for (int j = 0; j < 3; ++j) {
      refs.push_back(randn(64, rng));
      ests.push_back(randn(64, rng));
      for (std::size_t i = 0; i < 64; ++i) ests.back()[i] += 0.5 * refs.back()[i] * (trial % 3 == j);
    }
    double best = kInf;
    for (const auto& p : perms) {
      double sum = 0;
      for (std::size_t j = 0; j < 3; ++j) sum += neg_snr_loss(ests[j], refs[p[j]]);
      best = std::min(best, sum / 3);
    }
    CHECK(pit(ests, refs).loss == best);
  }
}

TEST_CASE("differentiable pit loss") {
  std::mt19937_64 rng(7);
  auto est = ssmsep::testing::random_tensor<double>({3, 40}, rng);
  const auto refs = ssmsep::testing::random_tensor<double>({3, 40}, rng);
  for (std::size_t i = 0; i < 40; ++i) est(1, i) += 2.0 * refs(0, i);
  Var<double> leaf(est, true);
  std::vector<std::size_t> perm;
  const auto loss = ag::pit_neg_snr(leaf, refs, &perm);
  CHECK(perm[1] == 0);

  std::vector<Vec> ev(3), rv(3);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 40; ++i) {
      ev[j].push_back(est(j, i));
      rv[j].push_back(refs(j, i));
    }
  const auto ref_result = pit(ev, rv);
  CHECK(loss.value()[0] == doctest::Approx(ref_result.loss).epsilon(1e-12));
  CHECK(perm == ref_result.permutation);

  backward(loss);
  auto f = [&] { return ag::pit_neg_snr(ag::constant(est), refs).value()[0]; };
  const auto fd = ssmsep::testing::numeric_grad(est, f);
  CHECK(ssmsep::testing::grad_rel_err(leaf.grad().span(), fd.span()) < 1e-6);

  // A clamped (perfect) pair contributes no gradient.
  Var<double> exact(refs, true);
  backward(ag::pit_neg_snr(exact, refs));
  for (double g : exact.grad().values()) CHECK(g == 0.0);
}

TEST_CASE("adam step") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  // f(w) = w^2 at w = 1: the first bias-corrected step moves by ~lr.
  Tensor<double> w({1}, 1.0);
  std::vector<Tensor<double>*> ps{&w};
  std::vector<Tensor<double>> gs{Tensor<double>({1}, 2.0)};
  OptimizerState<double> st;
  st.lr = cfg.lr;
  adam_step<double>(ps, gs, st, cfg);
  CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(st.step == 1);

  // Zero gradients leave parameters unchanged.
  Tensor<double> z({4}, 3.0);
  std::vector<Tensor<double>*> pz{&z};
  std::vector<Tensor<double>> gz{Tensor<double>({4})};
  OptimizerState<double> sz;
  for (int i = 0; i < 3; ++i) adam_step<double>(pz, gz, sz, cfg);
  for (double v : z.values()) CHECK(v == 3.0);

  // Norm-50 gradient is clipped to norm 5 before the update.
  Tensor<double> p({2}, 0.0);
  std::vector<Tensor<double>*> pp{&p};
  std::vector<Tensor<double>> gp{Tensor<double>({2})};
  gp[0][0] = 30;
  gp[0][1] = 40;
  OptimizerState<double> sp;
  CHECK(adam_step<double>(pp, gp, sp, cfg) == doctest::Approx(50.0));
  CHECK(std::hypot(gp[0][0], gp[0][1]) == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(gp[0][0] == doctest::Approx(3.0).epsilon(1e-14));

  // Non-finite gradients are rejected before any update.
  Tensor<double> q({2}, 1.0);
  std::vector<Tensor<double>*> pq{&q};
  std::vector<Tensor<double>> gq{Tensor<double>({2})};
  gq[0][1] = std::nan("");
  OptimizerState<double> sq;
  CHECK_THROWS_AS(adam_step<double>(pq, gq, sq, cfg), NumericError);
  CHECK(q[0] == 1.0);
  CHECK(q[1] == 1.0);
}

TEST_CASE("adam over autograd leaves minimizes a quadratic") {
  Var<double> w(Tensor<double>({3}, 2.0), true);
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam<double> opt({w}, cfg);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    backward(ag::sum(ag::mul(w, w)));
    opt.step();
  }
  for (double v : w.value().values()) CHECK(std::abs(v) < 0.05);
}

TEST_CASE("plateau scheduler") {
  PlateauScheduler s(3, 5);
  using A = PlateauScheduler::Action;
  CHECK(s.observe(1.0) == A::kNone);
  CHECK(s.observe(1.0) == A::kNone);
  CHECK(s.observe(1.1) == A::kNone);
  CHECK(s.since_best() == 2);
  CHECK(s.observe(0.9) == A::kNone);  // improvement resets the counters
  CHECK(s.since_best() == 0);
  CHECK(s.observe(1.0) == A::kNone);
  CHECK(s.observe(1.0) == A::kNone);
  CHECK(s.observe(1.0) == A::kHalve);  // third epoch without improvement
  CHECK(s.observe(1.0) == A::kNone);
  CHECK(s.observe(1.0) == A::kStop);  // fifth epoch without improvement
  CHECK(s.best() == 0.9);
}
