// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "latent_depth/losses.hpp"

using namespace latent_depth;
using namespace latent_depth::loss;

TEST_CASE("target depth loss") {
  CHECK(target_depth_loss(std::vector<double>(12, 1.0), 12.0) == 0.0);
  // 1.0 + 0.5 + 10 * 0.875 = 10.25
  std::vector<double> u(12, 0.875);
  u[0] = 1.0;
  u[1] = 0.5;
  CHECK(target_depth_loss(u, 12.0) == doctest::Approx(1.75).epsilon(1e-14));
  std::vector<double> v(29, 0.5);
  CHECK(target_depth_loss(v, 12.0) == doctest::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("KL annealing") {
  LossConfig c;
  c.beta = 1.0;
  c.anneal = AnnealSchedule::linear(1000);
  CHECK(kl_anneal(0, c) == 0.0);
  CHECK(kl_anneal(500, c) == 0.5);
  CHECK(kl_anneal(5000, c) == 1.0);
  c.beta = 10.0;
  c.anneal = AnnealSchedule::none();
  CHECK(kl_anneal(0, c) == 10.0);
  CHECK(kl_anneal(123456, c) == 10.0);

  // piecewise linear and continuous
  c.beta = 2.0;
  c.anneal = AnnealSchedule::linear(40);
  for (std::size_t s = 1; s < 80; ++s) {
    const double step = kl_anneal(s, c) - kl_anneal(s - 1, c);
    CHECK(step == doctest::Approx(s <= 40 ? 0.05 : 0.0));
  }
}

TEST_CASE("total loss") {
  LossConfig c;
  c.beta = 0.0;
  c.lambda = 0.0;
  const std::vector<double> u{0.5, 0.25};
  CHECK(total_loss(2.0, 0.3, u, c, 0).total == 2.0);

  c.beta = 1.0;
  c.lambda = 0.1;
  c.target_depth = 2.5;  // |0.75 - 2.5| = 1.75
  auto b = total_loss(2.0, 0.3, u, c, 7);
  CHECK(b.depth_loss == doctest::Approx(1.75));
  CHECK(b.total == doctest::Approx(2.475).epsilon(1e-14));
  CHECK(b.total == b.nll + b.beta_effective * b.kl + c.lambda * b.depth_loss);

  CHECK(total_loss(2.0, 0.0, u, c, 7).total == 2.0 + c.lambda * b.depth_loss);

  double previous = -1.0;
  for (double kl : {0.0, 0.1, 0.5, 2.0, 9.0}) {
    const double t = total_loss(1.0, kl, u, c, 0).total;
    CHECK(t >= previous);
    previous = t;
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(1.0, nan, u, c, 0);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(std::string(e.what()).find("kl") != std::string::npos);
  }
  CHECK_THROWS_AS(total_loss(std::numeric_limits<double>::infinity(), 0.0, u, c, 0), NonFiniteLoss);
}

TEST_CASE("config validation") {
  LossConfig c;
  CHECK_NOTHROW(c.validate());
  c.beta = -1.0;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = LossConfig{};
  c.anneal = AnnealSchedule::linear(0);
  CHECK_THROWS_AS(c.validate(), ContractViolation);
}

TEST_CASE("depth loss gradient pushes total selection toward K") {
  // 3-layer toy: L_K on pi = softmax(alpha)[:,1]; finite-difference sign check
  const Tensor alpha({3, 2}, {0.0, 0.3, 0.0, -0.2, 0.0, 1.0});
  for (double K : {0.5, 2.8}) {
    ad::Graph g;
    auto a = g.leaf(alpha);
    auto loss = target_depth_loss(g, gate::selection_probabilities(g, a), K);
    auto analytic = g.backward(loss).of(a);
    double sum_pi = 0.0;
    for (std::size_t l = 0; l < 3; ++l) sum_pi += gate::selection_probability({alpha[2 * l], alpha[2 * l + 1]});
    CHECK(g.value(loss).item() == doctest::Approx(std::fabs(sum_pi - K)));
    auto numeric = ad::finite_difference_gradient(
        [&](const Tensor& x) {
          double s = 0.0;
          for (std::size_t l = 0; l < 3; ++l) s += gate::selection_probability({x[2 * l], x[2 * l + 1]});
          return std::fabs(s - K);
        },
        alpha);
    for (std::size_t l = 0; l < 3; ++l) {
      const double d_select = analytic[2 * l + 1];
      CHECK(std::fabs(d_select - numeric[2 * l + 1]) <= 1e-6);
      // descent raises pi when sum is below K, lowers it when above
      CHECK((sum_pi - K) * d_select > 0.0);
    }
  }

  ad::Graph g;
  auto u = g.leaf(Tensor({2}, {0.5, 0.5}));
  auto grads = g.backward(target_depth_loss(g, u, 1.0));
  CHECK(grads.of(u) == Tensor({2}, 0.0));
}
