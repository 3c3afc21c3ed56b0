// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/latent_gate.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <string>

namespace latent_depth::gate {

namespace {

constexpr double kClamp = 1e-6;

double clamp_probability(double p, bool& clamped) {
  const double c = std::clamp(p, kClamp, 1.0 - kClamp);
  clamped = clamped || c != p;
  return c;
}

// Two-way softmax evaluated exactly as the graph's softmax primitive does,
// so scalar and differentiable paths agree bitwise.
double second_of_softmax(double x0, double x1) {
  const double mx = std::max(x0, x1);
  const double e0 = std::exp(x0 - mx);
  const double e1 = std::exp(x1 - mx);
  const double total = e0 + e1;
  return e1 * (1.0 / total);
}

}  // namespace

PosteriorTable::PosteriorTable(std::size_t num_tasks, std::size_t num_layers, LogitPair init)
    : tasks_(num_tasks), layers_(num_layers), logits_(num_tasks * num_layers, init) {
  if (num_tasks == 0 || num_layers == 0) throw ContractViolation("posterior table needs at least one task and layer");
}

LogitPair& PosteriorTable::at(std::size_t task, std::size_t layer) {
  if (task >= tasks_ || layer >= layers_) {
    throw ContractViolation("posterior entry (" + std::to_string(task) + ", " + std::to_string(layer) +
                            ") out of range");
  }
  return logits_[task * layers_ + layer];
}

const LogitPair& PosteriorTable::at(std::size_t task, std::size_t layer) const {
  return const_cast<PosteriorTable*>(this)->at(task, layer);
}

double PosteriorTable::probability(std::size_t task, std::size_t layer) const {
  return selection_probability(at(task, layer));
}

std::vector<double> PosteriorTable::probabilities(std::size_t task) const {
  std::vector<double> out(layers_);
  for (std::size_t l = 0; l < layers_; ++l) out[l] = probability(task, l);
  return out;
}

Tensor PosteriorTable::task_logits(std::size_t task) const {
  Tensor t({layers_, 2});
  for (std::size_t l = 0; l < layers_; ++l) {
    t[2 * l] = at(task, l).skip;
    t[2 * l + 1] = at(task, l).select;
  }
  return t;
}

void PosteriorTable::set_task_logits(std::size_t task, const Tensor& logits) {
  if (logits.shape() != Shape{layers_, 2}) {
    throw ContractViolation("task logits must be [" + std::to_string(layers_) + "x2], got " +
                            shape_string(logits.shape()));
  }
  for (std::size_t l = 0; l < layers_; ++l) at(task, l) = {logits[2 * l], logits[2 * l + 1]};
}

PosteriorTable PosteriorTable::with_layers(std::span<const std::size_t> kept) const {
  PosteriorTable out;
  out.tasks_ = tasks_;
  out.layers_ = kept.size();
  out.logits_.reserve(tasks_ * kept.size());
  for (std::size_t n = 0; n < tasks_; ++n) {
    for (auto l : kept) out.logits_.push_back(at(n, l));
  }
  return out;
}

PriorSpec PriorSpec::beta(double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw ContractViolation("Beta prior parameters must be positive");
  return {Kind::Beta, a, b};
}

double PriorSpec::bernoulli_mean() const {
  switch (kind) {
    case Kind::Uniform: return 0.5;
    case Kind::Beta: return a / (a + b);
    case Kind::AggregatedPosterior: break;
  }
  throw ContractViolation("aggregated-posterior prior has no fixed Bernoulli mean");
}

double selection_probability(LogitPair logits) { return second_of_softmax(logits.skip, logits.select); }

double sample_soft(LogitPair logits, double noise_skip, double noise_select, double temperature) {
  if (!(temperature > 0.0)) throw ContractViolation("Gumbel-Softmax temperature must be positive");
  // matches scale(add(logits, noise), 1/temperature) in the graph builder
  const double inv = 1.0 / temperature;
  return second_of_softmax((logits.skip + noise_skip) * inv, (logits.select + noise_select) * inv);
}

double sample_soft(LogitPair logits, const GumbelConfig& cfg, Rng& noise) {
  if (cfg.mode != SampleMode::Soft) throw ContractViolation("sample_soft requires soft mode");
  const double e0 = noise.gumbel();
  const double e1 = noise.gumbel();
  return sample_soft(logits, e0, e1, cfg.temperature);
}

int sample_hard(LogitPair logits) { return logits.select >= logits.skip ? 1 : 0; }

double kl_to_prior(double pi, const PriorSpec& prior, std::optional<double> aggregate) {
  double p = 0.0;
  if (prior.kind == PriorSpec::Kind::AggregatedPosterior) {
    if (!aggregate) throw ContractViolation("aggregated-posterior prior requires the aggregate probability");
    p = *aggregate;
  } else {
    p = prior.bernoulli_mean();
  }
  bool clamped = false;
  const double q = clamp_probability(pi, clamped);
  p = clamp_probability(p, clamped);
  if (clamped) {
    static std::once_flag once;
    std::call_once(once, [] { std::clog << "[latent-depth] probability clamped to [1e-6, 1-1e-6] in KL term\n"; });
  }
  const double kl = q * std::log(q / p) + (1.0 - q) * std::log((1.0 - q) / (1.0 - p));
  return std::max(kl, 0.0);
}

double aggregate_posterior(const PosteriorTable& table, std::size_t layer) {
  double total = 0.0;
  for (std::size_t n = 0; n < table.num_tasks(); ++n) total += table.probability(n, layer);
  return total / double(table.num_tasks());
}

std::vector<double> aggregate_posterior(const PosteriorTable& table) {
  std::vector<double> out(table.num_layers());
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = aggregate_posterior(table, l);
  return out;
}

double utilization(std::span<const GateSample> samples, std::size_t layer) {
  if (samples.empty()) throw ContractViolation("utilization needs at least one sample");
  double total = 0.0;
  for (const auto& s : samples) total += s.values.at(layer);
  return total / double(samples.size());
}

double effective_depth(const PosteriorTable& table, std::size_t task) {
  double total = 0.0;
  for (std::size_t l = 0; l < table.num_layers(); ++l) total += table.probability(task, l);
  return total;
}

std::vector<bool> prune(const PosteriorTable& table, std::size_t task, double keep_threshold) {
  if (!(keep_threshold >= 0.0 && keep_threshold <= 1.0)) throw ContractViolation("keep threshold must lie in [0, 1]");
  std::vector<bool> keep(table.num_layers());
  for (std::size_t l = 0; l < keep.size(); ++l) keep[l] = table.probability(task, l) >= keep_threshold;
  return keep;
}

Tensor draw_gumbel_noise(std::size_t layers, Rng& noise) {
  Tensor t({layers, 2});
  for (auto& v : t.values()) v = noise.gumbel();
  return t;
}

ad::Var soft_gates(ad::Graph& g, ad::Var logits, const Tensor& noise, double temperature) {
  if (!(temperature > 0.0)) throw ContractViolation("Gumbel-Softmax temperature must be positive");
  auto perturbed = g.add(logits, g.constant(noise));
  auto scaled = g.scale(perturbed, 1.0 / temperature);
  return g.select(g.softmax(scaled), 1);
}

ad::Var selection_probabilities(ad::Graph& g, ad::Var logits) { return g.select(g.softmax(logits), 1); }

Tensor prior_probabilities(const PriorSpec& prior, std::size_t layers, std::span<const double> aggregate) {
  Tensor p({layers});
  if (prior.kind == PriorSpec::Kind::AggregatedPosterior) {
    if (aggregate.size() != layers) throw ContractViolation("aggregate posterior length does not match layer count");
    for (std::size_t l = 0; l < layers; ++l) p[l] = aggregate[l];
  } else {
    p.fill(prior.bernoulli_mean());
  }
  return p;
}

ad::Var kl_sum(ad::Graph& g, ad::Var probabilities, const Tensor& prior) {
  return g.sum(g.bernoulli_kl(probabilities, prior));
}

}  // namespace latent_depth::gate
