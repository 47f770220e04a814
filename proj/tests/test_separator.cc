// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <numeric>

#include "model_fixtures.h"
#include "ssmsep/errors.h"
#include "ssmsep/separator.h"

using namespace ssmsep;
using namespace ssmsep::testing;

namespace {

using V = Var<double>;

SeparatorWeights<double> tiny_weights(std::uint64_t seed, ModelConfig c = tiny_config()) {
  SeparatorWeights<double> w(c);
  w.init(seed);
  return w;
}

Tensor<double> grid(std::size_t T, std::size_t F, std::size_t C, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor<double>({T, F, C}, rng);
}

V inner_product_loss(const V& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(y, ag::constant(random_tensor<double>(y.shape(), rng))));
}

}  // namespace

TEST_CASE("model config validation and json round trip") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.blocks = 3;
  c.fd_uses_bmamba = false;
  c.attn_qk_dim = 5;
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  CHECK(ModelConfig::from_json("{\"channels\": 64}").channels == 64);
  CHECK_THROWS_AS(ModelConfig::from_json("{\"chanels\": 64}"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json("{\"channels\": \"x\"}"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json("[1]"), ConfigError);

  ModelConfig bad;
  bad.heads = 3;  // 128 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.kernel = 2;
  bad.stride = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.hop = 600;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.speakers = 0;
  CHECK_THROWS_AS(SeparatorWeights<float>{bad}, ConfigError);
}

TEST_CASE("modules preserve the grid shape") {
  const auto w = tiny_weights(1);
  const auto z = grid(10, 65, 8, 2);
  const auto& b = w.blocks[0];
  CHECK(ag::fd_module(V(z), b.fd).shape() == z.shape());
  CHECK(ag::td_module(V(z), b.td).shape() == z.shape());
  CHECK(ag::tfa_module(V(z), b.tfa).shape() == z.shape());
  CHECK_THROWS_AS(ag::td_module(V(grid(5, 65, 8, 3)), b.td), ConfigError);  // T < K
  CHECK_THROWS_AS(ag::fd_module(V(grid(10, 7, 8, 3)), b.fd), ConfigError);  // F < K
  CHECK_THROWS_AS(ag::fd_module(V(grid(10, 65, 4, 3)), b.fd), ContractError);
}

TEST_CASE("zeroed inner paths make every module the identity") {
  auto w = tiny_weights(3);
  auto& b = w.blocks[0];
  b.fd.out_proj.mutable_value().fill(0);
  b.td.out_proj.mutable_value().fill(0);
  b.tfa.out_proj.mutable_value().fill(0);
  const auto z = grid(12, 65, 8, 4);
  CHECK(ag::fd_module(V(z), b.fd).value() == z);
  CHECK(ag::td_module(V(z), b.td).value() == z);
  CHECK(ag::tfa_module(V(z), b.tfa).value() == z);
}

TEST_CASE("unfold then fold on a 1 x F grid matches the dense overlap count") {
  for (auto [F, K, S] : {std::tuple{65ul, 8ul, 1ul}, {33ul, 8ul, 4ul}, {20ul, 5ul, 2ul}}) {
    const auto g = ag::UnfoldGeometry::make(F, K, S);
    // Dense count: how many windows of the padded framing cover position f.
    std::vector<double> cover(F, 0.0);
    for (std::size_t win = 0; win < g.windows; ++win)
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t pos = std::ptrdiff_t(win * S + k) - std::ptrdiff_t(g.pad_left);
        if (pos >= 0 && pos < std::ptrdiff_t(F)) cover[std::size_t(pos)] += 1;
      }
    Tensor<double> ones({1, F, 1}, 1.0);
    const auto y = ag::fold_seq(ag::unfold_seq(V(ones), K, S), K, S, F).value();
    for (std::size_t f = 0; f < F; ++f) CHECK(y[f] == cover[f]);
    if (S == 1)
      for (std::size_t f = 0; f < F; ++f) CHECK(cover[f] == double(K));
  }
}

TEST_CASE("attention rows are distributions; one frame reduces to projection") {
  const auto w = tiny_weights(5);
  const auto& tfa = w.blocks[0].tfa;
  Tensor<double> att;
  ag::tfa_module(V(grid(9, 65, 8, 6)), tfa, &att);
  CHECK(att.shape() == Shape{2, 9, 9});
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += att(h, i, j);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }

  const auto z1 = grid(1, 65, 8, 7);
  const auto y1 = ag::tfa_module(V(z1), tfa, &att).value();
  for (double a : att.values()) CHECK(a == 1.0);
  // y = z + W_o merge(frame_norm(W_v z)).
  const V v = ag::frame_norm(ag::linear(V(z1), tfa.v_proj), 2, tfa.v_gain, tfa.v_bias, 1e-5);
  const auto want = ag::add(V(z1), ag::linear(v, tfa.out_proj)).value();
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("attention is permutation equivariant over frames") {
  const auto w = tiny_weights(8);
  const std::size_t T = 7, F = 65, C = 8;
  const auto z = grid(T, F, C, 9);
  std::vector<std::size_t> perm(T);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(10));
  Tensor<double> zp(z.shape());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < F * C; ++i) zp[t * F * C + i] = z[perm[t] * F * C + i];
  const auto y = ag::tfa_module(V(z), w.blocks[0].tfa).value();
  const auto yp = ag::tfa_module(V(zp), w.blocks[0].tfa).value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < F * C; ++i)
      CHECK(yp[t * F * C + i] == doctest::Approx(y[perm[t] * F * C + i]).epsilon(1e-10));
}

TEST_CASE("separate returns J full-length buffers; zero in, zero out") {
  SeparatorWeights<float> w(tiny_config());
  w.init(11);
  const Separator<float> model(w);
  AudioBuffer mix{std::vector<float>(2000, 0.0f), 8000};
  auto out = model.separate(mix);
  REQUIRE(out.size() == 2);
  for (const auto& o : out) {
    CHECK(o.size() == 2000);
    CHECK(o.sample_rate == 8000);
    for (float v : o.samples) CHECK(v == 0.0f);
  }
  mix.samples.resize(100);
  CHECK_THROWS_AS(model.separate(mix), ContractError);
}

TEST_CASE("random weights give finite outputs over 100 seeds") {
  const auto x = random_audio(8000, 12);
  AudioBuffer mix{std::vector<float>(x.values().begin(), x.values().end()), 8000};
  std::size_t finite = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SeparatorWeights<float> w(tiny_config());
    w.init(seed);
    bool ok = true;
    for (const auto& o : Separator<float>(w).separate(mix))
      for (float v : o.samples) ok &= std::isfinite(v);
    finite += ok;
  }
  CHECK(finite == 100);
}

TEST_CASE("non-finite activations report the block index") {
  auto c = tiny_config();
  c.blocks = 2;
  SeparatorWeights<double> w(c);
  w.init(13);
  w.blocks[1].tfa.q_gain.mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    Separator<double>(w).forward(random_audio(2000, 14));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.stage() == 1);
  }
  w.blocks[1].tfa.q_gain.mutable_value()[0] = 1.0;
}

TEST_CASE("parameter accounting") {
  const auto published = count_params_macs(ModelConfig{});
  CHECK(std::abs(double(published.params) / 6.14e6 - 1.0) < 0.15);
  CHECK(published.params == published.block_params + published.io_params);

  ModelConfig c;
  c.blocks = 0;
  const auto empty = count_params_macs(c);
  CHECK(empty.block_params == 0);
  CHECK(empty.params == 128 * 2 * 9 + 4 * 128 * 9);

  c.blocks = 2;
  const auto two = count_params_macs(c);
  c.blocks = 4;
  const auto four = count_params_macs(c);
  CHECK(four.block_params == 2 * two.block_params);
  CHECK(four.io_params == two.io_params);
  CHECK(four.macs_per_second > two.macs_per_second);
}

TEST_CASE("end-to-end gradients on a tiny model") {
  const auto mix = random_audio(2000, 15);  // 0.25 s at 8 kHz
  const auto r = sampled_grad_check(tiny_config(), mix, [](const V& y) { return inner_product_loss(y, 16); },
                                    0.01, 17);
  CHECK(r.all_params_reached);
  CHECK(r.checked >= 20);
  CHECK(r.rel_err < 1e-3);
}

TEST_CASE("all four ablation wirings construct, run and differentiate") {
  const auto mix = random_audio(1500, 18);
  for (bool fd : {true, false})
    for (bool td : {true, false}) {
      auto c = tiny_config();
      c.fd_uses_bmamba = fd;
      c.td_uses_bmamba = td;
      INFO("fd_uses_bmamba=", fd, " td_uses_bmamba=", td);
      SeparatorWeights<double> w(c);
      w.init(19);
      CHECK(Separator<double>(w).forward(mix).shape() == Shape{2, 1500});
      const auto r = sampled_grad_check(c, mix, [](const V& y) { return inner_product_loss(y, 20); }, 0.005, 21);
      CHECK(r.all_params_reached);
      CHECK(r.rel_err < 1e-3);
    }
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "ssmsep_test_ckpt";
  std::filesystem::create_directories(dir);
  auto c = tiny_config();
  c.td_uses_bmamba = false;
  SeparatorWeights<float> w(c);
  w.init(22);
  save_checkpoint(dir / "m.spmb", w);
  CHECK(read_checkpoint_config(dir / "m.spmb") == c);
  auto back = load_checkpoint<float>(dir / "m.spmb");
  std::vector<Tensor<float>> a, b;
  w.visit([&](const std::string&, Var<float>& v) { a.push_back(v.value()); });
  back.visit([&](const std::string&, Var<float>& v) { b.push_back(v.value()); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // f64 file loads into f32 and back.
  SeparatorWeights<double> wd(c);
  wd.init(22);
  save_checkpoint(dir / "d.spmb", wd);
  auto as_f32 = load_checkpoint<float>(dir / "d.spmb");
  CHECK(as_f32.stem.value()[0] == float(wd.stem.value()[0]));

  const auto bytes = [&](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const auto write = [&](const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p, std::ios::binary) << s;
  };
  auto raw = bytes(dir / "m.spmb");
  write(dir / "trunc.spmb", raw.substr(0, raw.size() / 2));
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "trunc.spmb"), IoError);
  auto bad = raw;
  bad[0] = 'X';
  write(dir / "magic.spmb", bad);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "magic.spmb"), IoError);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "absent.spmb"), IoError);
  std::filesystem::remove_all(dir);
}
