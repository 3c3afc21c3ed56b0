// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "latent_depth/autodiff.hpp"
#include "latent_depth/random.hpp"

using latent_depth::ContractViolation;
using latent_depth::Rng;
using latent_depth::Shape;
using latent_depth::Tensor;
using namespace latent_depth::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Scalarizes a primitive's output with fixed random weights.
double weighted_output(const Builder& build, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t));
  auto out = build(g, vars);
  const auto& v = g.value(out);
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * weights[i];
  return s;
}

// Compares analytic gradients of every input against central differences.
void check_primitive(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t seed,
                     const std::vector<bool>& differentiable = {}) {
  Rng rng(seed);
  Graph probe;
  std::vector<Var> probe_vars;
  for (const auto& t : inputs) probe_vars.push_back(probe.leaf(t));
  const Tensor weights = random_tensor(probe.value(build(probe, probe_vars)).shape(), rng);

  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t));
  auto out = build(g, vars);
  auto loss = g.sum(g.mul(out, g.constant(weights)));
  auto grads = g.backward(loss);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!differentiable.empty() && !differentiable[k]) continue;
    auto f = [&](const Tensor& x) {
      auto moved = inputs;
      moved[k] = x;
      return weighted_output(build, moved, weights);
    };
    const Tensor numeric = finite_difference_gradient(f, inputs[k], 1e-5);
    const Tensor analytic = grads.of(vars[k]);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic[i];
      const double n = numeric[i];
      const double abs_err = std::fabs(a - n);
      const double rel_err = abs_err / std::max(std::fabs(a), std::fabs(n));
      const bool ok = (std::fabs(a) <= 1e-7 && std::fabs(n) <= 1e-7) || rel_err <= 1e-4;
      INFO("input " << k << " coord " << i << " analytic " << a << " numeric " << n);
      CHECK(ok);
    }
  }
}

}  // namespace

TEST_CASE("forward examples") {
  Graph g;
  auto s = g.softmax(g.constant(Tensor({3}, 0.0)));
  for (double v : g.value(s).values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto x = g.constant(Tensor({4}, 2.5));
  auto ln = g.layer_norm(x, g.constant(Tensor({4}, 1.0)), g.constant(Tensor({4}, 0.0)));
  for (double v : g.value(ln).values()) CHECK(std::fabs(v) <= 1e-12);

  auto m = g.matmul(g.constant(Tensor({2, 3}, 1.0)), g.constant(Tensor({3, 2}, 1.0)));
  CHECK(g.value(m).shape() == Shape{2, 2});
  for (double v : g.value(m).values()) CHECK(v == 3.0);
}

TEST_CASE("shape mismatches name the primitive and shapes") {
  Graph g;
  auto a = g.leaf(Tensor({2, 3}));
  auto b = g.leaf(Tensor({2, 3}));
  try {
    g.matmul(a, b);
    FAIL("expected a contract violation");
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add(a, g.leaf(Tensor({3, 2}))), ContractViolation);
  CHECK_THROWS_AS(g.embedding(g.leaf(Tensor({4, 2})), {5}, {1}), ContractViolation);
  CHECK_THROWS_AS(g.cross_entropy(g.leaf(Tensor({2, 4})), {0, 0}, 0), ContractViolation);
  CHECK_THROWS_AS(g.apply(Primitive::Scale, std::vector<Var>{a}), ContractViolation);
}

TEST_CASE("backward examples") {
  Graph g;
  auto x = g.leaf(Tensor::scalar(3.0));
  auto w = g.leaf(Tensor({2}, 1.5));
  auto loss = g.mul(x, x);
  auto grads = g.backward(loss);
  CHECK(grads.of(x).item() == 6.0);
  CHECK(grads.of(w) == Tensor({2}, 0.0));
  CHECK_FALSE(grads.reached(w));

  CHECK_THROWS_AS(g.backward(w), ContractViolation);
}

TEST_CASE("cross-entropy gradient at uniform logits") {
  Graph g;
  auto logits = g.leaf(Tensor({1, 4}, 0.0));
  auto loss = g.cross_entropy(logits, {0}, -1);
  auto analytic = g.backward(loss).of(logits);
  const Tensor expected({1, 4}, {-0.75, 0.25, 0.25, 0.25});
  auto numeric = finite_difference_gradient(
      [](const Tensor& x) {
        Graph h;
        return h.value(h.cross_entropy(h.leaf(x), {0}, -1)).item();
      },
      Tensor({1, 4}, 0.0));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(analytic[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    CHECK(numeric[i] == doctest::Approx(expected[i]).epsilon(1e-8));
  }
  CHECK(g.value(loss).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  // mean over non-pad tokens: padding rows neither count nor receive gradient
  Graph h;
  auto two = h.leaf(Tensor({2, 4}, 0.0));
  auto padded = h.cross_entropy(two, {0, 7}, 7);
  CHECK(h.value(padded).item() == doctest::Approx(std::log(4.0)));
  auto gp = h.backward(padded).of(two);
  for (std::size_t i = 4; i < 8; ++i) CHECK(gp[i] == 0.0);
}

TEST_CASE("finite difference examples") {
  auto sq = finite_difference_gradient([](const Tensor& x) { return x[0] * x[0]; }, Tensor::scalar(3.0), 1e-5);
  CHECK(std::fabs(sq[0] - 6.0) <= 1e-8);
  auto flat = finite_difference_gradient([](const Tensor&) { return 4.0; }, Tensor({3}, 1.0));
  CHECK(flat == Tensor({3}, 0.0));
  CHECK_THROWS_AS(finite_difference_gradient([](const Tensor&) { return 0.0; }, Tensor({1}), 0.0), ContractViolation);
}

TEST_CASE("every primitive matches central differences") {
  Rng rng(11);
  auto r = [&](Shape s, double scale = 1.0) { return random_tensor(std::move(s), rng, scale); };

  SUBCASE("matmul") { check_primitive([](Graph& g, auto& v) { return g.matmul(v[0], v[1]); }, {r({3, 4}), r({4, 2})}, 1); }
  SUBCASE("linear") {
    check_primitive([](Graph& g, auto& v) { return g.linear(v[0], v[1], v[2]); }, {r({2, 3, 4}), r({4, 5}), r({5})}, 2);
  }
  SUBCASE("add sub mul") {
    check_primitive([](Graph& g, auto& v) { return g.mul(g.sub(v[0], v[1]), g.add(v[0], v[1])); }, {r({5}), r({5})}, 3);
  }
  SUBCASE("scale and constants") {
    check_primitive([](Graph& g, auto& v) { return g.add_constant(g.scale(v[0], -1.7), 0.3); }, {r({4})}, 4);
  }
  SUBCASE("mul_scalar and gated_residual") {
    check_primitive([](Graph& g, auto& v) { return g.gated_residual(v[0], g.mul_scalar(v[1], v[2]), v[2]); },
                    {r({2, 3}), r({2, 3}), r({1})}, 5);
  }
  SUBCASE("relu") {
    Tensor x({6}, {-1.2, -0.3, 0.2, 0.9, 1.5, -2.0});
    check_primitive([](Graph& g, auto& v) { return g.relu(v[0]); }, {x}, 6);
  }
  SUBCASE("log and abs") {
    Tensor x({4}, {0.3, 1.2, 2.5, 0.9});
    Tensor y({4}, {-0.3, 1.2, -2.5, 0.9});
    check_primitive([](Graph& g, auto& v) { return g.add(g.log(v[0]), g.abs(v[1])); }, {x, y}, 7);
  }
  SUBCASE("softmax") { check_primitive([](Graph& g, auto& v) { return g.softmax(v[0]); }, {r({3, 5})}, 8); }
  SUBCASE("masked softmax") {
    auto mask = std::make_shared<AttentionMask>();
    mask->batch = 2;
    mask->queries = 3;
    mask->keys = 3;
    mask->allow = {1, 0, 0, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0};
    check_primitive([mask](Graph& g, auto& v) { return g.masked_softmax(v[0], mask); }, {r({2, 2, 3, 3})}, 9);
  }
  SUBCASE("layer norm") {
    check_primitive([](Graph& g, auto& v) { return g.layer_norm(v[0], v[1], v[2]); }, {r({3, 6}), r({6}), r({6})}, 10);
  }
  SUBCASE("embedding") {
    check_primitive([](Graph& g, auto& v) { return g.embedding(v[0], {2, 0, 2, 3}, {2, 2}); }, {r({4, 3})}, 11);
  }
  SUBCASE("cross entropy") {
    check_primitive([](Graph& g, auto& v) { return g.cross_entropy(v[0], {1, 0, 4}, 0); }, {r({3, 5})}, 12);
  }
  SUBCASE("concat, reshape, select, sum") {
    check_primitive(
        [](Graph& g, auto& v) {
          const Var parts[] = {v[0], v[1]};
          auto c = g.reshape(g.concat(parts), {3, 5});
          const Var tail[] = {g.select(c, 2), g.sum(c)};
          return g.concat(tail);
        },
        {r({3, 2}), r({3, 3})}, 13);
  }
  SUBCASE("bernoulli kl") {
    Tensor pi({3}, {0.2, 0.5, 0.93});
    Tensor prior({3}, {0.5, 0.3, 0.6});
    check_primitive([prior](Graph& g, auto& v) { return g.bernoulli_kl(v[0], prior); }, {pi}, 14);
  }
  SUBCASE("attention products") {
    check_primitive([](Graph& g, auto& v) { return g.attention_scores(v[0], v[1], 2); }, {r({2, 3, 4}), r({2, 5, 4})}, 15);
    check_primitive([](Graph& g, auto& v) { return g.attention_context(g.softmax(v[0]), v[1]); },
                    {r({2, 2, 3, 5}), r({2, 5, 4})}, 16);
  }
  SUBCASE("dropout") {
    check_primitive([](Graph& g, auto& v) { return g.dropout(v[0], {1, 0, 1, 1}, 0.25); }, {r({4})}, 17);
  }
}

TEST_CASE("identical inputs give bitwise identical records and gradients") {
  auto run = [] {
    Rng rng(5);
    Graph g;
    auto x = g.leaf(random_tensor({4, 6}, rng));
    auto w = g.leaf(random_tensor({6, 3}, rng));
    auto b = g.leaf(random_tensor({3}, rng));
    auto loss = g.cross_entropy(g.linear(g.relu(x), w, b), {0, 2, 1, 1}, -1);
    auto grads = g.backward(loss);
    return std::tuple{g.value(loss), grads.of(x), grads.of(w), grads.of(b)};
  };
  CHECK(run() == run());
}

TEST_CASE("gradient of a sum of losses is the sum of gradients") {
  Rng rng(8);
  const Tensor x0 = random_tensor({3, 4}, rng);
  const Tensor w0 = random_tensor({4, 4}, rng);
  auto build = [&](Graph& g, Var x, Var w, int which) {
    auto h = g.matmul(x, w);
    auto l1 = g.cross_entropy(h, {0, 1, 2}, -1);
    auto l2 = g.sum(g.mul(h, h));
    if (which == 1) return l1;
    if (which == 2) return l2;
    return g.add(l1, l2);
  };
  Tensor parts[3];
  for (int which = 0; which < 3; ++which) {
    Graph g;
    auto x = g.leaf(x0);
    auto w = g.leaf(w0);
    parts[which] = g.backward(build(g, x, w, which)).of(w);
  }
  for (std::size_t i = 0; i < parts[0].size(); ++i) CHECK(std::fabs(parts[0][i] - parts[1][i] - parts[2][i]) <= 1e-12);
}

TEST_CASE("replay after changing a leaf matches a fresh record") {
  Rng rng(21);
  Graph g;
  auto x = g.leaf(random_tensor({2, 3}, rng));
  auto w = g.leaf(random_tensor({3, 3}, rng));
  auto y = g.softmax(g.matmul(x, w));
  const Tensor w2 = random_tensor({3, 3}, rng);
  g.set_leaf(w, w2);
  g.replay();

  Graph fresh;
  auto fy = fresh.softmax(fresh.matmul(fresh.leaf(g.value(x)), fresh.leaf(w2)));
  CHECK(g.value(y) == fresh.value(fy));
  CHECK_THROWS_AS(g.set_leaf(w, Tensor({2, 2})), ContractViolation);
  CHECK_THROWS_AS(g.set_leaf(y, Tensor({2, 3})), ContractViolation);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 0}), ContractViolation);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ContractViolation);
  Tensor t({2, 3}, 1.0);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}
