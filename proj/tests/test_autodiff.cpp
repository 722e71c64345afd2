// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "m3rec/autodiff.hpp"
#include "m3rec/gaussian.hpp"
#include "m3rec/nn.hpp"
#include "test_util.hpp"

using namespace m3rec;
using Catch::Approx;

TEST_CASE("forward: single linear identity layer") {
  Rng rng(1);
  Mlp net({2, 2}, Activation::kTanh, rng);
  // weights = identity, bias = 0
  net.set_params(std::vector<double>{1, 0, 0, 1, 0, 0});
  const auto y = net.forward(std::vector<double>{1.0, 2.0});
  REQUIRE(y[0] == Approx(1.0));
  REQUIRE(y[1] == Approx(2.0));
}

TEST_CASE("forward: all-zero parameters give zero output") {
  Rng rng(2);
  Mlp net({3, 4, 2}, Activation::kRelu, rng);
  net.set_params(std::vector<double>(net.param_count(), 0.0));
  const auto y = net.forward(std::vector<double>{0.3, -1.0, 2.5});
  for (double v : y) REQUIRE(v == 0.0);
}

TEST_CASE("forward: matches an independent hand-rolled pass") {
  Rng rng(3);
  Mlp net({3, 4, 2}, Activation::kTanh, rng);
  const std::vector<double> x{0.5, -0.2, 1.1};

  // independent re-computation straight off the flat parameter vector
  auto p = net.params();
  std::vector<double> h(4, 0.0);
  for (int j = 0; j < 4; ++j) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += p[j * 3 + i] * x[i];
    h[j] = std::tanh(s + p[12 + j]);
  }
  std::vector<double> out(2, 0.0);
  for (int j = 0; j < 2; ++j) {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) s += p[16 + j * 4 + i] * h[i];
    out[j] = s + p[24 + j];
  }

  const auto y = net.forward(x);
  REQUIRE(y[0] == Approx(out[0]).epsilon(1e-12));
  REQUIRE(y[1] == Approx(out[1]).epsilon(1e-12));
}

TEST_CASE("forward: dimension mismatch rejected") {
  Rng rng(4);
  Mlp net({3, 2}, Activation::kTanh, rng);
  REQUIRE_THROWS_AS(net.forward(std::vector<double>{1.0, 2.0}), ValidationError);
}

TEST_CASE("grad: loss = p^2 at p=3 gives 6") {
  ad::Tape tape;
  auto p = tape.leaf(3.0);
  auto loss = ad::square(p);
  tape.backward(loss);
  REQUIRE(tape.adjoint(p) == Approx(6.0));
}

TEST_CASE("grad: loss independent of parameters gives exact zero") {
  ad::Tape tape;
  Rng rng(5);
  Mlp net({2, 3}, Activation::kTanh, rng);
  AttachedMlp att(tape, net);
  auto a = tape.leaf(2.0);
  auto loss = ad::square(a) + 1.0;
  tape.backward(loss);
  for (double g : att.grads()) REQUIRE(g == 0.0);
}

TEST_CASE("grad: taped forward equals plain forward") {
  Rng rng(6);
  Mlp net({5, 8, 3}, Activation::kRelu, rng);
  const auto x = rng.normal_vec(5);
  const auto plain = net.forward(x);
  ad::Tape tape;
  AttachedMlp att(tape, net);
  const auto taped = att.forward(ad::constants(x));
  for (std::size_t i = 0; i < plain.size(); ++i) {
    REQUIRE(taped[i].v == Approx(plain[i]).epsilon(1e-14));
  }
}

TEST_CASE("grad: random net matches central finite differences") {
  Rng rng(7);
  for (auto sizes : std::vector<std::vector<int>>{{2, 3, 1}, {4, 8, 8, 2}}) {
    Mlp net(sizes, Activation::kTanh, rng);
    const auto x = rng.normal_vec(static_cast<std::size_t>(sizes.front()));
    const auto w = rng.normal_vec(static_cast<std::size_t>(sizes.back()));

    auto loss_value = [&]() {
      const auto y = net.forward(x);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i] + 0.1 * y[i] * y[i];
      return s;
    };

    ad::Tape tape;
    AttachedMlp att(tape, net);
    const auto y = att.forward(ad::constants(x));
    ad::Var loss = ad::constant(0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      loss = loss + w[i] * y[i] + 0.1 * ad::square(y[i]);
    }
    tape.backward(loss);
    const auto g = att.grads();
    const auto fd = testutil::finite_diff(net, loss_value);
    REQUIRE(testutil::grads_close(g, fd));
  }
}

TEST_CASE("grad: non-finite loss identifies offending op") {
  ad::Tape tape;
  auto p = tape.leaf(-1.0);
  auto loss = ad::log(p);  // log of a negative number
  REQUIRE_THROWS_AS(tape.backward(loss), NumericalError);
  try {
    tape.backward(loss);
  } catch (const NumericalError& e) {
    REQUIRE(std::string(e.what()).find("log") != std::string::npos);
  }
}

TEST_CASE("nary ops: dot, sum, lincomb, logsumexp match plain math") {
  ad::Tape tape;
  Rng rng(8);
  std::vector<ad::Var> a, b;
  std::vector<double> av, bv;
  for (int i = 0; i < 7; ++i) {
    av.push_back(rng.normal());
    bv.push_back(rng.normal());
    a.push_back(tape.leaf(av.back()));
    b.push_back(i % 2 == 0 ? tape.leaf(bv.back()) : ad::constant(bv.back()));
  }
  REQUIRE(ad::dot(a, b).v == Approx(dot(av, bv)).epsilon(1e-14));
  REQUIRE(ad::sum(std::span<const ad::Var>(a)).v ==
          Approx(std::accumulate(av.begin(), av.end(), 0.0)).epsilon(1e-14));
  REQUIRE(ad::lincomb(a, bv).v == Approx(dot(av, bv)).epsilon(1e-14));
  REQUIRE(ad::logsumexp(std::span<const ad::Var>(a)).v ==
          Approx(logsumexp(av)).epsilon(1e-14));

  // gradient of logsumexp is the softmax
  auto l = ad::logsumexp(std::span<const ad::Var>(a));
  tape.backward(l);
  const auto sm = softmax(av);
  for (int i = 0; i < 7; ++i) REQUIRE(tape.adjoint(a[i]) == Approx(sm[i]).epsilon(1e-12));
}

TEST_CASE("logsumexp: invariant to constant logit shift") {
  Rng rng(9);
  const auto xs = rng.normal_vec(12);
  auto shifted = xs;
  for (auto& v : shifted) v += 123.456;
  REQUIRE(std::fabs(logsumexp(shifted) - 123.456 - logsumexp(xs)) < 1e-12);
}

TEST_CASE("reparameterized sample: clamped floor keeps sample near mean") {
  GaussianPosterior q(std::vector<double>{0.7, -0.3},
                      std::vector<double>{-1e9, -1e9});
  REQUIRE(q.log_std[0] == kLogStdMin);
  Rng rng(10);
  const auto z = q.sample(rng);
  REQUIRE(std::fabs(z[0] - 0.7) < 1e-1);
  REQUIRE(std::fabs(z[1] + 0.3) < 1e-1);
}

TEST_CASE("reparameterized sample: monte carlo moments") {
  GaussianPosterior q = GaussianPosterior::standard(1);
  Rng rng(11);
  std::vector<double> xs(100000);
  for (auto& x : xs) x = q.sample(rng)[0];
  const auto ms = mean_std(xs);
  REQUIRE(std::fabs(ms.mean) < 0.02);
  REQUIRE(std::fabs(ms.std - 1.0) < 0.02);
}

TEST_CASE("reparameterized sample: deterministic under fixed seed") {
  GaussianPosterior q(std::vector<double>{0.1, 0.2}, std::vector<double>{0.0, -1.0});
  Rng a(12), b(12);
  const auto za = q.sample(a);
  const auto zb = q.sample(b);
  REQUIRE(za == zb);  // bitwise
}

TEST_CASE("reparameterized sample: d(sample)/d(mean) is identity under frozen noise") {
  ad::Tape tape;
  Rng rng(13);
  const auto eps = rng.normal_vec(3);
  TapedGaussian g;
  for (int i = 0; i < 3; ++i) {
    g.mean.push_back(tape.leaf(0.3 * i));
    g.log_std.push_back(tape.leaf(-0.5 + 0.2 * i));
  }
  const auto z = g.sample_with_noise(eps);
  for (int k = 0; k < 3; ++k) {
    tape.backward(z[k]);
    for (int i = 0; i < 3; ++i) {
      REQUIRE(tape.adjoint(g.mean[i]) == (i == k ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("kl: q = p gives exact zero") {
  GaussianPosterior q(std::vector<double>{0.4, -1.2}, std::vector<double>{0.3, -0.7});
  REQUIRE(kl_diag_gaussians(q, q) == 0.0);
}

TEST_CASE("kl: N(1,1) vs N(0,1) in one dim is 0.5") {
  GaussianPosterior q(std::vector<double>{1.0}, std::vector<double>{0.0});
  GaussianPosterior p(std::vector<double>{0.0}, std::vector<double>{0.0});
  REQUIRE(kl_diag_gaussians(q, p) == Approx(0.5).epsilon(1e-12));
}

TEST_CASE("kl: dimension mismatch rejected") {
  GaussianPosterior q = GaussianPosterior::standard(2);
  GaussianPosterior p = GaussianPosterior::standard(3);
  REQUIRE_THROWS_AS(kl_diag_gaussians(q, p), ValidationError);
}

TEST_CASE("kl: matches monte carlo estimate of E_q[log q - log p]") {
  Rng rng(14);
  GaussianPosterior q(std::vector<double>{0.5, -0.2, 0.1},
                      std::vector<double>{-0.3, 0.2, 0.0});
  GaussianPosterior p(std::vector<double>{-0.4, 0.3, 0.6},
                      std::vector<double>{0.1, -0.2, 0.4});
  const double exact = kl_diag_gaussians(q, p);
  double mc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto z = q.sample(rng);
    mc += log_density(q, z) - log_density(p, z);
  }
  mc /= n;
  REQUIRE(std::fabs(mc - exact) / exact < 0.01);
}

TEST_CASE("kl: nonnegative over 1000 random pairs, zero iff equal") {
  Rng rng(15);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.uniform_index(4);
    GaussianPosterior q(rng.normal_vec(d), rng.normal_vec(d));
    GaussianPosterior p(rng.normal_vec(d), rng.normal_vec(d));
    REQUIRE(kl_diag_gaussians(q, p) >= 0.0);
    REQUIRE(kl_diag_gaussians(q, q) == 0.0);
  }
}

TEST_CASE("taped kl matches closed form and differentiates") {
  ad::Tape tape;
  TapedGaussian q, p;
  q.mean = {tape.leaf(0.5), tape.leaf(-0.2)};
  q.log_std = {tape.leaf(-0.3), tape.leaf(0.2)};
  p.mean = {tape.leaf(-0.4), tape.leaf(0.3)};
  p.log_std = {tape.leaf(0.1), tape.leaf(-0.2)};
  const auto kl = kl_diag_gaussians(q, p);
  REQUIRE(kl.v == Approx(kl_diag_gaussians(q.values(), p.values())).epsilon(1e-12));
  tape.backward(kl);
  // d/d mu_q of KL = (mu_q - mu_p) / var_p
  const double expected = (0.5 - (-0.4)) / std::exp(2.0 * 0.1);
  REQUIRE(tape.adjoint(q.mean[0]) == Approx(expected).epsilon(1e-10));
}

TEST_CASE("optimizer: zero gradient leaves parameters unchanged") {
  Rng rng(16);
  Mlp net({2, 2}, Activation::kTanh, rng);
  const std::vector<double> before(net.params().begin(), net.params().end());
  net.optimizer_step(std::vector<double>(net.param_count(), 0.0), 1e-3);
  for (std::size_t i = 0; i < before.size(); ++i) {
    REQUIRE(net.param(i) == before[i]);
  }
}

TEST_CASE("optimizer: first step moves each parameter by about lr") {
  Rng rng(17);
  Mlp net({2, 2}, Activation::kTanh, rng);
  const std::vector<double> before(net.params().begin(), net.params().end());
  std::vector<double> g(net.param_count());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (i % 2 == 0 ? 1.0 : -1.0) * (0.5 + i);
  const double lr = 1e-3;
  net.optimizer_step(g, lr);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double delta = net.param(i) - before[i];
    REQUIRE(delta == Approx(-lr * (g[i] > 0 ? 1.0 : -1.0)).margin(1e-9));
  }
}

TEST_CASE("optimizer: non-finite gradient refused, state unchanged") {
  Rng rng(18);
  Mlp net({2, 2}, Activation::kTanh, rng);
  const std::vector<double> before(net.params().begin(), net.params().end());
  std::vector<double> g(net.param_count(), 1.0);
  g[2] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(net.optimizer_step(g, 1e-3), NumericalError);
  for (std::size_t i = 0; i < before.size(); ++i) {
    REQUIRE(net.param(i) == before[i]);
  }
  REQUIRE(net.optimizer_state().step == 0);
}

TEST_CASE("optimizer: descends a quadratic bowl monotonically after warmup") {
  Rng rng(19);
  Mlp net({1, 1}, Activation::kTanh, rng);  // two params: w, b
  auto loss_of = [&]() {
    const double w = net.param(0), b = net.param(1);
    return (w - 5.0) * (w - 5.0) + (b + 4.0) * (b + 4.0);
  };
  double prev = loss_of();
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    const double w = net.param(0), b = net.param(1);
    const std::vector<double> g{2.0 * (w - 5.0), 2.0 * (b + 4.0)};
    net.optimizer_step(g, 1e-2);
    losses.push_back(loss_of());
  }
  for (std::size_t i = 20; i < losses.size(); ++i) {
    REQUIRE(losses[i] <= losses[i - 1] + 1e-12);
  }
  REQUIRE(losses.back() < prev);
}

TEST_CASE("gaussian head splitting clamps log-std") {
  std::vector<double> head{1.0, 2.0, -7.0, 3.5};
  const auto g = GaussianPosterior::from_head(head);
  REQUIRE(g.mean == std::vector<double>{1.0, 2.0});
  REQUIRE(g.log_std[0] == kLogStdMin);
  REQUIRE(g.log_std[1] == kLogStdMax);
}

TEST_CASE("rng: derived streams are reproducible and distinct") {
  auto a1 = Rng::derive(42, 7);
  auto a2 = Rng::derive(42, 7);
  auto b = Rng::derive(42, 8);
  REQUIRE(a1.next_u64() == a2.next_u64());
  REQUIRE(Rng::derive(42, 7).next_u64() != b.next_u64());
}
