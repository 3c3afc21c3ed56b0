// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <vector>

#include "latent_depth/latent_gate.hpp"

using namespace latent_depth;
using namespace latent_depth::gate;

TEST_CASE("selection probability") {
  CHECK(selection_probability({0.0, 0.0}) == 0.5);
  CHECK(std::fabs(selection_probability({0.0, 20.0}) - 1.0) <= 1e-8);
  // logistic(0.4), evaluated independently
  CHECK(selection_probability({0.0, 0.4}) == doctest::Approx(0.598687660112452).epsilon(1e-13));
}

TEST_CASE("soft samples") {
  CHECK(sample_soft({0.0, 0.0}, 0.37, 0.37, 1.0) == 0.5);
  CHECK(sample_soft({0.0, 0.0}, -1.2, -1.2, 0.05) == 0.5);
  CHECK(sample_soft({0.0, 0.0}, -0.1, 0.3, 1.0) == doctest::Approx(0.598687660112452).epsilon(1e-13));
  CHECK(std::fabs(sample_soft({0.0, 0.0}, -0.1, 0.3, 0.01) - 1.0) <= 1e-4);
  CHECK_THROWS_AS(sample_soft({0.0, 0.0}, 0.0, 0.0, 0.0), ContractViolation);

  Rng a(3), b(3);
  const GumbelConfig cfg{0.7, SampleMode::Soft};
  for (int i = 0; i < 20; ++i) {
    const double za = sample_soft({0.1, -0.4}, cfg, a);
    CHECK(za == sample_soft({0.1, -0.4}, cfg, b));
    CHECK(za > 0.0);
    CHECK(za < 1.0);
  }
  CHECK_THROWS_AS(sample_soft({0.0, 0.0}, GumbelConfig{1.0, SampleMode::Hard}, a), ContractViolation);
}

TEST_CASE("hard samples") {
  CHECK(sample_hard({0.0, 0.4}) == 1);
  CHECK(sample_hard({0.4, 0.0}) == 0);
  CHECK(sample_hard({0.0, 0.0}) == 1);
}

TEST_CASE("soft samples converge monotonically to the hard sample as temperature falls") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const LogitPair a{rng.normal(), rng.normal()};
    const double e0 = rng.gumbel();
    const double e1 = rng.gumbel();
    const double target = (a.select + e1) >= (a.skip + e0) ? 1.0 : 0.0;
    double previous = std::fabs(sample_soft(a, e0, e1, 4.0) - target);
    for (double tau : {2.0, 1.0, 0.5, 0.25, 0.1, 0.05}) {
      const double dist = std::fabs(sample_soft(a, e0, e1, tau) - target);
      CHECK(dist <= previous);
      previous = dist;
    }
  }
}

TEST_CASE("Gumbel-max draws follow the selection probability") {
  const LogitPair a{-0.3, 0.5};
  const double pi = selection_probability(a);
  Rng rng(2024);
  const int n = 100000;
  int selected = 0;
  for (int i = 0; i < n; ++i) {
    const double e0 = rng.gumbel();
    const double e1 = rng.gumbel();
    selected += sample_hard({a.skip + e0, a.select + e1});
  }
  const double mean = double(selected) / n;
  const double se = std::sqrt(pi * (1.0 - pi) / n);
  CHECK(std::fabs(mean - pi) <= 3.0 * se);
}

TEST_CASE("KL to the prior") {
  CHECK(kl_to_prior(0.5, PriorSpec::uniform()) == 0.0);
  CHECK(kl_to_prior(0.3, PriorSpec::beta(3.0, 7.0)) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(kl_to_prior(0.42, PriorSpec::aggregated(), 0.42) == 0.0);
  CHECK(kl_to_prior(0.9, PriorSpec::uniform()) == doctest::Approx(0.3680642071684971).epsilon(1e-12));
  CHECK(kl_to_prior(0.9, PriorSpec::beta(1.0, 1.0)) == kl_to_prior(0.9, PriorSpec::uniform()));
  CHECK_THROWS_AS(kl_to_prior(0.9, PriorSpec::aggregated()), ContractViolation);
  CHECK_THROWS_AS(PriorSpec::beta(0.0, 1.0), ContractViolation);
  // boundary probabilities are clamped and stay finite
  CHECK(std::isfinite(kl_to_prior(1.0, PriorSpec::uniform())));
  CHECK(kl_to_prior(0.0, PriorSpec::aggregated(), 0.0) == 0.0);

  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const double pi = rng.uniform();
    const double p = rng.uniform();
    CHECK(kl_to_prior(pi, PriorSpec::aggregated(), p) >= 0.0);
  }
}

TEST_CASE("aggregate posterior, utilization, effective depth") {
  auto logit_of = [](double p) { return LogitPair{0.0, std::log(p / (1.0 - p))}; };

  PosteriorTable two(2, 1);
  two.at(0, 0) = logit_of(0.2);
  two.at(1, 0) = logit_of(0.8);
  CHECK(aggregate_posterior(two, 0) == doctest::Approx(0.5).epsilon(1e-12));

  PosteriorTable one(1, 3);
  one.at(0, 1) = logit_of(0.7);
  CHECK(aggregate_posterior(one, 1) == one.probability(0, 1));
  CHECK(kl_to_prior(one.probability(0, 1), PriorSpec::aggregated(), aggregate_posterior(one, 1)) == 0.0);

  PosteriorTable four(4, 1);
  const double ps[] = {0.1, 0.2, 0.3, 0.4};
  for (std::size_t n = 0; n < 4; ++n) four.at(n, 0) = logit_of(ps[n]);
  CHECK(aggregate_posterior(four, 0) == doctest::Approx(0.25).epsilon(1e-12));

  // identical per-task tables: every per-task KL to the aggregate vanishes
  PosteriorTable same(3, 4);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t l = 0; l < 4; ++l) same.at(n, l) = {0.1 * double(l), -0.2 * double(l)};
  }
  const auto agg = aggregate_posterior(same);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t l = 0; l < 4; ++l) CHECK(kl_to_prior(same.probability(n, l), PriorSpec::aggregated(), agg[l]) == 0.0);
  }

  std::vector<GateSample> ones(3, GateSample{{1.0, 1.0}, 0, 0, SampleMode::Hard});
  CHECK(utilization(ones, 0) == 1.0);
  std::vector<GateSample> soft{{{0.4}, 0, 0, SampleMode::Soft}, {{0.6}, 1, 0, SampleMode::Soft}};
  CHECK(utilization(soft, 0) == doctest::Approx(0.5));
  std::vector<GateSample> hard;
  for (double z : {1.0, 0.0, 1.0, 1.0}) hard.push_back({{z}, 0, 0, SampleMode::Hard});
  CHECK(utilization(hard, 0) == 0.75);
  CHECK_THROWS_AS(utilization(std::vector<GateSample>{}, 0), ContractViolation);

  PosteriorTable deep(1, 24);
  CHECK(effective_depth(deep, 0) == 12.0);
  for (std::size_t l = 0; l < 24; ++l) deep.at(0, l) = {0.0, 40.0};
  CHECK(effective_depth(deep, 0) == doctest::Approx(24.0).epsilon(1e-12));
  PosteriorTable small(1, 2);
  small.at(0, 0) = logit_of(0.25);
  CHECK(effective_depth(small, 0) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("prune") {
  auto logit_of = [](double p) { return LogitPair{0.0, std::log(p / (1.0 - p))}; };
  PosteriorTable t(1, 3);
  t.at(0, 0) = {0.0, 0.4};
  CHECK(prune(t, 0, 0.5)[0]);
  t.at(0, 0) = logit_of(0.99);
  t.at(0, 1) = logit_of(0.01);
  t.at(0, 2) = logit_of(0.7);
  CHECK(prune(t, 0, 0.5) == std::vector<bool>{true, false, true});
  CHECK(prune(t, 0, 0.0) == std::vector<bool>{true, true, true});
  CHECK_THROWS_AS(prune(t, 0, 1.5), ContractViolation);

  // default threshold reproduces the hard sample
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    PosteriorTable r(1, 1);
    r.at(0, 0) = {rng.normal(), rng.normal()};
    CHECK(prune(r, 0)[0] == (sample_hard(r.at(0, 0)) == 1));
  }
}

TEST_CASE("differentiable gates agree with the scalar path and with finite differences") {
  const std::size_t layers = 3;
  Tensor logits({layers, 2}, {0.1, -0.2, 0.5, 0.3, -1.0, 0.7});
  Tensor noise({layers, 2}, {0.2, -0.4, 1.1, 0.05, -0.3, 0.6});
  const double tau = 0.8;

  ad::Graph g;
  auto a = g.leaf(logits);
  auto z = soft_gates(g, a, noise, tau);
  auto pi = selection_probabilities(g, a);
  for (std::size_t l = 0; l < layers; ++l) {
    const LogitPair pair{logits[2 * l], logits[2 * l + 1]};
    CHECK(g.value(z)[l] == sample_soft(pair, noise[2 * l], noise[2 * l + 1], tau));
    CHECK(g.value(pi)[l] == selection_probability(pair));
  }

  Tensor weights({layers}, {0.3, -1.1, 0.8});
  auto loss = g.sum(g.mul(z, g.constant(weights)));
  auto analytic = g.backward(loss).of(a);
  auto numeric = ad::finite_difference_gradient(
      [&](const Tensor& x) {
        double s = 0.0;
        for (std::size_t l = 0; l < layers; ++l) {
          s += weights[l] * sample_soft({x[2 * l], x[2 * l + 1]}, noise[2 * l], noise[2 * l + 1], tau);
        }
        return s;
      },
      logits);
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    CHECK(std::fabs(analytic[i] - numeric[i]) <= 1e-4 * std::max(std::fabs(analytic[i]), 1e-3));
  }

  PosteriorTable table(2, layers);
  table.set_task_logits(1, logits);
  CHECK(table.task_logits(1) == logits);
  CHECK(table.task_logits(0) == Tensor({layers, 2}, 0.0));
  const std::size_t kept[] = {2, 0};
  auto sub = table.with_layers(kept);
  CHECK(sub.num_layers() == 2);
  CHECK(sub.at(1, 0) == table.at(1, 2));
}

TEST_CASE("prior probabilities") {
  CHECK(prior_probabilities(PriorSpec::uniform(), 2) == Tensor({2}, 0.5));
  CHECK(prior_probabilities(PriorSpec::beta(3, 1), 1)[0] == 0.75);
  const double agg[] = {0.2, 0.9};
  CHECK(prior_probabilities(PriorSpec::aggregated(), 2, agg) == Tensor({2}, {0.2, 0.9}));
  CHECK_THROWS_AS(prior_probabilities(PriorSpec::aggregated(), 3, agg), ContractViolation);
}
