// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "ssmsep/ssm_kernel.h"
#include "test_util.h"

using namespace ssmsep;
using namespace ssmsep::ssm;
using ssmsep::testing::random_tensor;

namespace {

template <typename T>
struct Instance {
  Tensor<T> x;
  ScanParams<T> p;
};

// Random scan instance with delta in (0.01, 1) and a in (-2, -0.05).
template <typename T>
Instance<T> random_instance(std::mt19937_64& rng, std::size_t S, std::size_t L, std::size_t E,
                            std::size_t N) {
  Instance<T> in;
  in.x = random_tensor<T>({S, L, E}, rng);
  in.p.delta = random_tensor<T>({S, L, E}, rng, 0.01, 1.0);
  in.p.a = random_tensor<T>({E, N}, rng, -2.0, -0.05);
  in.p.b = random_tensor<T>({S, L, N}, rng);
  in.p.c = random_tensor<T>({S, L, N}, rng);
  return in;
}

// Scalar SSM recurrence written directly from the continuous-time
// definition, independent of the kernel's helpers.
double hand_zoh_gain(double a, double delta) { return (std::exp(delta * a) - 1.0) / a; }

}  // namespace

TEST_CASE("zoh closed form: A=-1, B=1, delta=ln 2") {
  const double ln2 = std::log(2.0);
  const auto step = discretize_zoh(-1.0, 1.0, ln2);
  CHECK(std::abs(step.a_bar - 0.5) < 1e-12);
  // (1 / (-ln 2)) * (0.5 - 1) * ln 2 * 1 = 0.5
  CHECK(std::abs(step.b_bar - 0.5) < 1e-12);
}

TEST_CASE("zoh limits") {
  SUBCASE("A -> 0 gives identity and delta * B") {
    const auto step = discretize_zoh(0.0, 3.0, 0.25);
    CHECK(step.a_bar == 1.0);
    CHECK(step.b_bar == doctest::Approx(0.75).epsilon(1e-15));
  }
  SUBCASE("delta -> 0+ gives identity and zero input gain") {
    const auto step = discretize_zoh(-5.0, 2.0, 1e-14);
    CHECK(step.a_bar == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(step.b_bar) < 1e-12);
  }
  SUBCASE("non-positive delta is a domain error") {
    CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, 0.0), DomainError);
    CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, -0.1), DomainError);
  }
}

TEST_CASE("series and exact gain agree at the switchover") {
  for (double a : {-1.0, -3.0, -0.5, 2.0}) {
    const double delta = kSeriesThreshold / std::abs(a);
    const double exact = zoh_input_gain_exact(a, delta);
    const double series = zoh_input_gain_series(a, delta);
    CHECK(std::abs(exact - series) / std::abs(exact) < 1e-8);
    CHECK(std::abs(exact - hand_zoh_gain(a, delta)) / std::abs(exact) < 1e-8);
  }
}

TEST_CASE("dense discretization matches the diagonal path") {
  const std::vector<double> a{-1.0, -0.3, -2.5};
  const std::vector<double> b{0.7, -1.2, 0.4};
  const double delta = 0.37;
  Tensor<double> ad({3, 3});
  for (std::size_t i = 0; i < 3; ++i) ad(i, i) = a[i];
  const auto dense = discretize_zoh_dense(ad, Tensor<double>({3}, b), delta);
  const auto diag = discretize_zoh<double>(a, b, delta);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(dense.a_bar(i, i) == doctest::Approx(diag.a_bar[i]).epsilon(1e-12));
    CHECK(dense.b_bar[i] == doctest::Approx(diag.b_bar[i]).epsilon(1e-12));
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) CHECK(std::abs(dense.a_bar(i, j)) < 1e-14);
  }
}

TEST_CASE("reference scan: hand-evaluated examples") {
  SUBCASE("two-step recurrence with a_bar = b_bar = 0.5") {
    Tensor<double> x({1, 2, 1}, {1.0, 1.0});
    ScanParams<double> p{Tensor<double>({1, 2, 1}, std::log(2.0)), Tensor<double>({1, 1}, -1.0),
                         Tensor<double>({1, 2, 1}, 1.0), Tensor<double>({1, 2, 1}, 1.0)};
    const auto y = selective_scan_ref(x, p);
    CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("single step is C^T (B_bar x)") {
    std::mt19937_64 rng(3);
    auto in = random_instance<double>(rng, 1, 1, 2, 3);
    const auto y = selective_scan_ref(in.x, in.p);
    for (std::size_t e = 0; e < 2; ++e) {
      double want = 0;
      for (std::size_t n = 0; n < 3; ++n)
        want += in.p.c(0, 0, n) * hand_zoh_gain(in.p.a(e, n), in.p.delta(0, 0, e)) *
                in.p.b(0, 0, n) * in.x(0, 0, e);
      CHECK(y(0, 0, e) == doctest::Approx(want).epsilon(1e-12));
    }
  }
  SUBCASE("zero input gives zero output") {
    std::mt19937_64 rng(4);
    auto in = random_instance<float>(rng, 2, 9, 3, 4);
    in.x.fill(0.0f);
    const auto ref = selective_scan_ref(in.x, in.p);
    const auto fast = selective_scan(in.x, in.p);
    for (float v : ref.values()) CHECK(v == 0.0f);
    for (float v : fast.values()) CHECK(v == 0.0f);
  }
}

TEST_CASE("shape mismatches are contract errors") {
  std::mt19937_64 rng(5);
  auto in = random_instance<double>(rng, 1, 4, 2, 3);
  auto bad = in.p;
  bad.b = Tensor<double>({1, 5, 3});
  CHECK_THROWS_AS(selective_scan_ref(in.x, bad), ContractError);
  CHECK_THROWS_AS(selective_scan(in.x, bad), ContractError);
  bad = in.p;
  bad.a = Tensor<double>({3, 3});
  CHECK_THROWS_AS(selective_scan(in.x, bad), ContractError);
  bad = in.p;
  bad.delta[0] = 0.0;
  CHECK_THROWS_AS(selective_scan(in.x, bad), DomainError);
}

TEST_CASE("production scan equals the reference on random instances") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> nd(1, 4), td(1, 64), ed(1, 3), sd(1, 2);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto in = random_instance<float>(rng, sd(rng), td(rng), ed(rng), nd(rng));
    const auto ref = selective_scan_ref(in.x, in.p);
    const auto fast = selective_scan(in.x, in.p);
    double scale = 0, diff = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      scale = std::max(scale, double(std::abs(ref[i])));
      diff = std::max(diff, double(std::abs(ref[i] - fast[i])));
    }
    worst = std::max(worst, scale > 0 ? diff / scale : diff);
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("operation count is linear in sequence length") {
  std::mt19937_64 rng(12);
  auto a = random_instance<float>(rng, 2, 16, 3, 4);
  auto b = random_instance<float>(rng, 2, 32, 3, 4);
  ScanStats sa, sb;
  selective_scan(a.x, a.p, &sa);
  selective_scan(b.x, b.p, &sb);
  CHECK(sa.flops > 0);
  CHECK(sb.flops == 2 * sa.flops);
}

TEST_CASE("causality: perturbing x at t leaves earlier outputs untouched") {
  std::mt19937_64 rng(13);
  auto in = random_instance<double>(rng, 1, 20, 2, 3);
  const auto base = selective_scan(in.x, in.p);
  for (std::size_t t = 0; t < 20; t += 3) {
    auto x2 = in.x;
    x2(0, t, 1) += 0.5;
    const auto y = selective_scan(x2, in.p);
    for (std::size_t u = 0; u < t; ++u)
      for (std::size_t e = 0; e < 2; ++e) CHECK(y(0, u, e) == base(0, u, e));
    CHECK(y(0, t, 1) != base(0, t, 1));
  }
}

TEST_CASE("stability: hidden state stays bounded for long inputs") {
  std::mt19937_64 rng(14);
  auto in = random_instance<float>(rng, 1, 20000, 2, 4);
  const auto y = selective_scan(in.x, in.p);
  // |h| <= max|g b x| / (1 - max a_bar) element-wise, and |y| <= sum_n |c| |h|.
  double bound = 0;
  for (std::size_t e = 0; e < 2; ++e) {
    double max_a = 0, max_in = 0;
    for (std::size_t t = 0; t < 20000; ++t)
      for (std::size_t n = 0; n < 4; ++n) {
        const double d = in.p.delta(0, t, e), a = in.p.a(e, n);
        max_a = std::max(max_a, std::exp(d * a));
        max_in = std::max(max_in, std::abs(hand_zoh_gain(a, d) * in.p.b(0, t, n) * in.x(0, t, e)));
      }
    bound = std::max(bound, 4.0 * max_in / (1.0 - max_a));
  }
  for (float v : y.values()) {
    REQUIRE(std::isfinite(v));
    CHECK(std::abs(v) <= bound * 1.0001);
  }
}

namespace {

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("scan gradients match central differences") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> nd(1, 3), td(1, 16);
  for (int trial = 0; trial < 25; ++trial) {
    auto in = random_instance<double>(rng, 2, td(rng), 2, nd(rng));
    const auto w = random_tensor<double>(in.x.shape(), rng);
    ScanCache<double> cache;
    selective_scan(in.x, in.p, nullptr, &cache);
    const auto g = selective_scan_grad(cache, w);
    auto loss = [&] { return dot(selective_scan_ref(in.x, in.p), w); };
    using ssmsep::testing::grad_rel_err;
    using ssmsep::testing::numeric_grad;
    CHECK(grad_rel_err(g.dx.span(), numeric_grad(in.x, loss).span()) < 1e-4);
    CHECK(grad_rel_err(g.dparams.delta.span(), numeric_grad(in.p.delta, loss).span()) < 1e-4);
    CHECK(grad_rel_err(g.dparams.a.span(), numeric_grad(in.p.a, loss).span()) < 1e-4);
    CHECK(grad_rel_err(g.dparams.b.span(), numeric_grad(in.p.b, loss).span()) < 1e-4);
    CHECK(grad_rel_err(g.dparams.c.span(), numeric_grad(in.p.c, loss).span()) < 1e-4);
  }
}

TEST_CASE("gradient through the series branch near a = 0") {
  std::mt19937_64 rng(22);
  auto in = random_instance<double>(rng, 1, 8, 2, 2);
  in.p.a = Tensor<double>({2, 2}, {-1e-6, -3e-3, -0.02, -1.0});
  const auto w = random_tensor<double>(in.x.shape(), rng);
  ScanCache<double> cache;
  selective_scan(in.x, in.p, nullptr, &cache);
  const auto g = selective_scan_grad(cache, w);
  auto loss = [&] { return dot(selective_scan_ref(in.x, in.p), w); };
  CHECK(ssmsep::testing::grad_rel_err(g.dparams.a.span(),
                                      ssmsep::testing::numeric_grad(in.p.a, loss, 1e-8).span()) <
        1e-4);
  CHECK(ssmsep::testing::grad_rel_err(g.dparams.delta.span(),
                                      ssmsep::testing::numeric_grad(in.p.delta, loss).span()) <
        1e-4);
}

TEST_CASE("chunked recomputation gives the same gradients as the full cache") {
  std::mt19937_64 rng(23);
  auto in = random_instance<double>(rng, 2, 37, 3, 4);
  const auto dy = random_tensor<double>(in.x.shape(), rng);
  ScanCache<double> full, chunked;
  selective_scan(in.x, in.p, nullptr, &full);
  selective_scan(in.x, in.p, nullptr, &chunked, ScanOptions{8, 5});
  CHECK(full.full);
  CHECK_FALSE(chunked.full);
  const auto ga = selective_scan_grad(full, dy);
  const auto gb = selective_scan_grad(chunked, dy);
  CHECK(max_rel_diff(ga.dx.span(), gb.dx.span(), 1e-12) < 1e-12);
  CHECK(max_rel_diff(ga.dparams.a.span(), gb.dparams.a.span(), 1e-12) < 1e-12);
  CHECK(max_rel_diff(ga.dparams.delta.span(), gb.dparams.delta.span(), 1e-12) < 1e-12);
}

TEST_CASE("gradient edge cases") {
  std::mt19937_64 rng(24);
  auto in = random_instance<double>(rng, 1, 10, 2, 3);
  ScanCache<double> cache;
  SUBCASE("empty cache is a contract error") {
    CHECK_THROWS_AS(selective_scan_grad(cache, in.x), ContractError);
  }
  selective_scan(in.x, in.p, nullptr, &cache);
  SUBCASE("zero upstream gradient gives zero gradients") {
    const auto g = selective_scan_grad(cache, Tensor<double>(in.x.shape()));
    for (const auto* t : {&g.dx, &g.dparams.delta, &g.dparams.a, &g.dparams.b, &g.dparams.c})
      for (double v : t->values()) CHECK(v == 0.0);
  }
  SUBCASE("dy(t) only reaches x(t') for t' <= t") {
    for (std::size_t t = 0; t < 10; t += 3) {
      Tensor<double> dy(in.x.shape());
      dy(0, t, 0) = 1.0;
      const auto g = selective_scan_grad(cache, dy);
      for (std::size_t u = t + 1; u < 10; ++u) CHECK(g.dx(0, u, 0) == 0.0);
      CHECK(g.dx(0, t, 0) != 0.0);
    }
  }
}
