// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <vector>

#include "latent_depth/latent_gate.hpp"
#include "latent_depth/transformer.hpp"

using namespace latent_depth;
using namespace latent_depth::model;

namespace {

StackConfig toy_config(std::size_t enc, std::size_t dec, NormMode norm = NormMode::PreNorm) {
  StackConfig c;
  c.encoder_layers = enc;
  c.decoder_layers = dec;
  c.model_dim = 16;
  c.ffn_dim = 24;
  c.heads = 2;
  c.vocab_size = 12;
  c.norm = norm;
  return c;
}

Batch toy_batch() {
  return make_batch({{5, 6, 7, 8}, {9, 4}, {10, 11, 3}}, {{8, 7, 6}, {4, 9, 5, 5}, {3}});
}

struct Run {
  Tensor logits;
  std::vector<Tensor> enc_states;
  std::vector<Tensor> dec_states;
  double loss = 0.0;
};

Run run(const ModelParameters& p, const Batch& b, const std::vector<double>& ze, const std::vector<double>& zd) {
  ad::Graph g;
  auto bound = bind(g, p, false);
  auto fwd = forward_seq2seq(g, p, bound, b, constant_gates(g, ze), constant_gates(g, zd));
  Run r;
  r.logits = g.value(fwd.logits);
  for (auto v : fwd.encoder.states) r.enc_states.push_back(g.value(v));
  for (auto v : fwd.decoder.states) r.dec_states.push_back(g.value(v));
  r.loss = g.value(sequence_nll(g, fwd.logits, b.target_out)).item();
  return r;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = toy_config(2, 2);
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = toy_config(2, 2);
  c.decoder_gating = Gating::layer_drop(1.0);
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = toy_config(0, 2);
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  CHECK(parse_norm_mode("none") == NormMode::NoNorm);
  CHECK(parse_gating_kind("latent") == Gating::Kind::Latent);
  CHECK_THROWS_AS(parse_gating_kind("random"), ContractViolation);
}

TEST_CASE("parameter layout and initialization") {
  auto p = ModelParameters::initialize(toy_config(2, 3), 5);
  CHECK(p.encoder.size() == 2);
  CHECK(p.decoder.size() == 3);
  CHECK(p.tensors[p.index_of("decoder.2.cross_attn.wq")].shape() == Shape{16, 16});
  CHECK(p.tensors[p.index_of("encoder.final_norm.gamma")] == Tensor({16}, 1.0));
  CHECK(p.tensors[p.index_of("decoder.0.ffn.b1")] == Tensor({24}, 0.0));
  for (const auto& t : p.tensors) CHECK(t.all_finite());
  CHECK(ModelParameters::initialize(toy_config(2, 3), 5).tensors == p.tensors);

  auto nn = ModelParameters::initialize(toy_config(2, 3, NormMode::NoNorm), 5);
  CHECK(!nn.encoder_final_norm);
  CHECK_THROWS_AS(nn.index_of("encoder.0.self_norm.gamma"), ContractViolation);
  CHECK(nn.scalar_count() < p.scalar_count());
}

TEST_CASE("batches") {
  auto b = make_batch({{5, 6}, {7}}, {{8}, {9, 10, 11}});
  CHECK(b.source == std::vector<int>{5, 6, 7, 0});
  CHECK(b.target_len == 4);
  CHECK(b.target_in == std::vector<int>{1, 8, 0, 0, 1, 9, 10, 11});
  CHECK(b.target_out == std::vector<int>{8, 2, 0, 0, 9, 10, 11, 2});
  CHECK(b.target_tokens() == 6);
  CHECK_THROWS_AS(make_batch({}, {}), ContractViolation);
}

TEST_CASE("zero gate is an exact identity layer") {
  const auto b = toy_batch();
  for (NormMode mode : {NormMode::PreNorm, NormMode::NoNorm}) {
    const auto pm = ModelParameters::initialize(toy_config(3, 3, mode), 11);
    auto r = run(pm, b, {1, 0, 1}, {0, 1, 1});
    CHECK(r.enc_states[2] == r.enc_states[1]);
    CHECK(r.dec_states[1] == r.dec_states[0]);

    // bitwise equal to the model with those layers removed
    auto removed = pm.with_layers({0, 2}, {1, 2});
    auto r2 = run(removed, b, {1, 1}, {1, 1});
    CHECK(r2.logits == r.logits);
    CHECK(r2.loss == r.loss);
  }
}

TEST_CASE("static depth equals latent gates forced to one") {
  const auto p = ModelParameters::initialize(toy_config(2, 2), 3);
  const auto b = toy_batch();
  auto fixed = run(p, b, fixed_gate_values(Gating::static_depth(), 2, true, nullptr),
                   fixed_gate_values(Gating::static_depth(), 2, true, nullptr));

  ad::Graph g;
  auto bound = bind(g, p, true);
  Tensor saturated({2, 2}, {-1e9, 1e9, -1e9, 1e9});
  auto enc = split_gates(g, gate::soft_gates(g, g.leaf(saturated), Tensor({2, 2}, 0.0), 1.0), 2);
  auto dec = split_gates(g, gate::soft_gates(g, g.leaf(saturated), Tensor({2, 2}, 0.0), 1.0), 2);
  auto fwd = forward_seq2seq(g, p, bound, b, enc, dec);
  CHECK(g.value(enc[0]).item() == 1.0);
  CHECK(g.value(fwd.logits) == fixed.logits);

  // layerdrop at evaluation is static depth
  Rng rng(1);
  CHECK(fixed_gate_values(Gating::layer_drop(0.5), 4, false, &rng) == std::vector<double>(4, 1.0));
  auto train = fixed_gate_values(Gating::layer_drop(0.5), 400, true, &rng);
  double kept = 0;
  for (double z : train) {
    CHECK((z == 0.0 || z == 1.0));
    kept += z;
  }
  CHECK(kept > 150);
  CHECK(kept < 250);
  CHECK_THROWS_AS(fixed_gate_values(Gating::latent(), 2, true, &rng), ContractViolation);
}

TEST_CASE("gated residual of a linear branch on a 2-dim toy") {
  ad::Graph g;
  auto x = g.leaf(Tensor({1, 2}, {1.0, 2.0}));
  auto w = g.leaf(Tensor({2, 2}, {0.5, -1.0, 2.0, 0.25}));
  auto b = g.leaf(Tensor({2}, {0.1, -0.2}));
  auto f = g.linear(x, w, b);
  auto y = g.gated_residual(x, f, g.constant(Tensor::scalar(0.5)));
  // F(x) = x W + b = (1*0.5 + 2*2 + 0.1, 1*-1 + 2*0.25 - 0.2) = (4.6, -0.7)
  CHECK(g.value(y)[0] == doctest::Approx(1.0 + 0.5 * 4.6).epsilon(1e-15));
  CHECK(g.value(y)[1] == doctest::Approx(2.0 + 0.5 * -0.7).epsilon(1e-15));
}

TEST_CASE("fixed soft gates replay deterministically") {
  const auto p = ModelParameters::initialize(toy_config(2, 2), 21);
  const auto b = toy_batch();
  auto a = run(p, b, {0.3, 0.7}, {0.3, 0.7});
  auto c = run(p, b, {0.3, 0.7}, {0.3, 0.7});
  CHECK(a.logits == c.logits);
  auto d = run(p, b, {0.3, 0.7}, {0.3, 0.71});
  CHECK(!(a.logits == d.logits));
}

TEST_CASE("all gates zero leaves only embedding and output path") {
  const auto b = toy_batch();
  auto p = ModelParameters::initialize(toy_config(2, 2, NormMode::NoNorm), 8);
  auto r = run(p, b, {0, 0}, {0, 0});
  auto q = p;
  for (const auto& layer : q.decoder) {
    for (auto i : layer.all) q.tensors[i].fill(0.37);
  }
  for (const auto& layer : q.encoder) {
    for (auto i : layer.all) q.tensors[i].fill(-2.0);
  }
  CHECK(run(q, b, {0, 0}, {0, 0}).logits == r.logits);
  CHECK(run(p.with_layers({}, {}), b, {}, {}).logits == r.logits);

  auto bad = make_batch({{5, 40}}, {{6}});
  CHECK_THROWS_AS(run(p, bad, {1, 1}, {1, 1}), ContractViolation);
  CHECK_THROWS_AS(run(p, b, {1}, {1, 1}), ContractViolation);
}

TEST_CASE("sequence NLL examples") {
  ad::Graph g;
  Tensor uniform({3, 8}, 0.0);
  auto l = sequence_nll(g, g.constant(uniform), {3, 0, 7});
  CHECK(g.value(l).item() == doctest::Approx(std::log(8.0)).epsilon(1e-14));

  Tensor peaked({2, 4}, -1e4);
  peaked[1] = 0.0;
  peaked[4 + 3] = 0.0;
  CHECK(g.value(sequence_nll(g, g.constant(peaked), {1, 3})).item() == 0.0);

  // logits rows (1, 2, 0) target 1 and (0.5, -0.5, 0) target 2
  Tensor worked({2, 3}, {1.0, 2.0, 0.0, 0.5, -0.5, 0.0});
  const double nll0 = std::log(std::exp(1.0) + std::exp(2.0) + 1.0) - 2.0;
  const double nll1 = std::log(std::exp(0.5) + std::exp(-0.5) + 1.0);
  CHECK(g.value(sequence_nll(g, g.constant(worked), {1, 2})).item() ==
        doctest::Approx(0.5 * (nll0 + nll1)).epsilon(1e-14));
  // independently evaluated row losses
  CHECK(nll0 + nll1 == doctest::Approx(0.40760596444438013 + 1.1802696706417346).epsilon(1e-13));
  CHECK_THROWS_AS(sequence_nll(g, g.constant(worked), {0, 0}), ContractViolation);
}

TEST_CASE("layer gradient norms and the identity-path invariant") {
  const auto b = toy_batch();
  auto p = ModelParameters::initialize(toy_config(3, 6, NormMode::NoNorm), 2);

  auto zero = layer_gradient_norms(p, b, {0, 0, 0}, std::vector<double>(6, 0.0));
  for (double n : zero.decoder_params) CHECK(n == 0.0);
  for (double n : zero.encoder_params) CHECK(n == 0.0);
  for (double n : zero.decoder_states) CHECK(n == zero.decoder_states.back());

  for (std::size_t l = 0; l <= 6; ++l) {
    std::vector<double> z(6, 1.0);
    for (std::size_t m = l; m < 6; ++m) z[m] = 0.0;
    ad::Graph g;
    auto bound = bind(g, p, true);
    auto fwd = forward_seq2seq(g, p, bound, b, constant_gates(g, {1, 1, 1}), constant_gates(g, z));
    auto grads = g.backward(sequence_nll(g, fwd.logits, b.target_out));
    CHECK(max_abs_diff(grads.of(fwd.decoder.states[l]), grads.of(fwd.decoder.states.back())) <= 1e-12);
  }

  auto ones = layer_gradient_norms(p, b, {1, 1, 1}, std::vector<double>(6, 1.0));
  for (double n : ones.decoder_params) CHECK(n > 0.0);
}

TEST_CASE("activation gradients of a 2-layer linear toy follow the chain-rule expansion") {
  // x1 = x0 + z0 x0 A, x2 = x1 + z1 x1 B, L = <c, x2>
  const Tensor A({2, 2}, {0.3, -0.7, 1.1, 0.2});
  const Tensor B({2, 2}, {-0.4, 0.9, 0.5, 0.6});
  const double c[2] = {1.5, -2.0};
  const double z0 = 0.5, z1 = 0.5;

  ad::Graph g;
  auto x0 = g.leaf(Tensor({1, 2}, {0.8, -0.3}));
  auto zero_bias = g.constant(Tensor({2}, 0.0));
  auto x1 = g.gated_residual(x0, g.linear(x0, g.constant(A), zero_bias), g.constant(Tensor::scalar(z0)));
  auto x2 = g.gated_residual(x1, g.linear(x1, g.constant(B), zero_bias), g.constant(Tensor::scalar(z1)));
  auto loss = g.sum(g.mul(x2, g.constant(Tensor({1, 2}, {c[0], c[1]}))));
  auto grads = g.backward(loss);

  // dL/dx1 = c (I + z1 B^T)^T applied as row vector: g1_i = c_i + z1 sum_j B_ij c_j
  double g1[2], g0[2];
  for (int i = 0; i < 2; ++i) g1[i] = c[i] + z1 * (B[2 * i] * c[0] + B[2 * i + 1] * c[1]);
  for (int i = 0; i < 2; ++i) g0[i] = g1[i] + z0 * (A[2 * i] * g1[0] + A[2 * i + 1] * g1[1]);
  CHECK(grads.of(x2)[0] == c[0]);
  CHECK(grads.of(x1)[0] == doctest::Approx(g1[0]).epsilon(1e-14));
  CHECK(grads.of(x1)[1] == doctest::Approx(g1[1]).epsilon(1e-14));
  CHECK(grads.of(x0)[0] == doctest::Approx(g0[0]).epsilon(1e-14));
  CHECK(grads.of(x0)[1] == doctest::Approx(g0[1]).epsilon(1e-14));
  // expansion: dL/dx0 = dL/dx2 (1 + z0 J0 + z1 J1 + z0 z1 J0 J1)
  const double g0_expanded_0 = c[0] + z0 * (A[0] * c[0] + A[1] * c[1]) + z1 * (B[0] * c[0] + B[1] * c[1]) +
                               z0 * z1 * (A[0] * (B[0] * c[0] + B[1] * c[1]) + A[1] * (B[2] * c[0] + B[3] * c[1]));
  CHECK(grads.of(x0)[0] == doctest::Approx(g0_expanded_0).epsilon(1e-14));
}

TEST_CASE("loss derivative with respect to each gate matches finite differences") {
  const auto b = toy_batch();
  for (NormMode mode : {NormMode::PreNorm, NormMode::NoNorm}) {
    auto p = ModelParameters::initialize(toy_config(2, 2, mode), 9);
    const Tensor z0({4}, {0.3, 0.8, 0.55, 0.2});
    auto loss_at = [&](const Tensor& z) {
      return run(p, b, {z[0], z[1]}, {z[2], z[3]}).loss;
    };
    ad::Graph g;
    auto bound = bind(g, p, false);
    auto zleaf = g.leaf(z0);
    auto gates = split_gates(g, zleaf, 4);
    auto fwd = forward_seq2seq(g, p, bound, b, {gates[0], gates[1]}, {gates[2], gates[3]});
    auto analytic = g.backward(sequence_nll(g, fwd.logits, b.target_out)).of(zleaf);
    auto numeric = ad::finite_difference_gradient(loss_at, z0);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::fabs(analytic[i] - numeric[i]) <= 1e-4 * std::max(std::fabs(numeric[i]), 1e-3));
    }
  }
}
