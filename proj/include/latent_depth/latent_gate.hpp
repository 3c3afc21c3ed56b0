// SPDX-License-Identifier: Apache-2.0
//
// Per-layer latent selection variables: logits, Gumbel-Softmax relaxation,
// hard selection, KL to the prior, aggregated posterior and utilization.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "latent_depth/autodiff.hpp"
#include "latent_depth/random.hpp"
#include "latent_depth/tensor.hpp"

namespace latent_depth::gate {

/// Logits (alpha(0), alpha(1)) for skipping / selecting one layer.
struct LogitPair {
  double skip = 0.0;
  double select = 0.0;
  friend bool operator==(const LogitPair&, const LogitPair&) = default;
};

/// Per-task, per-layer selection logits: the variational parameters.
class PosteriorTable {
 public:
  PosteriorTable() = default;
  PosteriorTable(std::size_t num_tasks, std::size_t num_layers, LogitPair init = {});

  std::size_t num_tasks() const noexcept { return tasks_; }
  std::size_t num_layers() const noexcept { return layers_; }

  LogitPair& at(std::size_t task, std::size_t layer);
  const LogitPair& at(std::size_t task, std::size_t layer) const;

  double probability(std::size_t task, std::size_t layer) const;
  std::vector<double> probabilities(std::size_t task) const;

  /// One task's logits as a [layers, 2] tensor, column 0 = skip.
  Tensor task_logits(std::size_t task) const;
  void set_task_logits(std::size_t task, const Tensor& logits);

  /// Keeps only the listed layers, in order.
  PosteriorTable with_layers(std::span<const std::size_t> kept) const;

  friend bool operator==(const PosteriorTable&, const PosteriorTable&) = default;

 private:
  std::size_t tasks_ = 0;
  std::size_t layers_ = 0;
  std::vector<LogitPair> logits_;
};

enum class SampleMode { Soft, Hard };

struct GumbelConfig {
  double temperature = 1.0;
  SampleMode mode = SampleMode::Soft;
};

struct PriorSpec {
  enum class Kind { Uniform, Beta, AggregatedPosterior };
  Kind kind = Kind::Uniform;
  double a = 1.0;
  double b = 1.0;

  static PriorSpec uniform() { return {}; }
  static PriorSpec beta(double a, double b);
  static PriorSpec aggregated() { return {Kind::AggregatedPosterior, 1.0, 1.0}; }

  /// Bernoulli parameter the prior reduces to; for the aggregated posterior
  /// the caller supplies it.
  double bernoulli_mean() const;
};

struct GateSample {
  std::vector<double> values;
  std::size_t task = 0;
  std::uint64_t draw_id = 0;
  SampleMode mode = SampleMode::Soft;
};

struct UtilizationRecord {
  std::vector<double> utilization;
  double effective_depth = 0.0;
  std::size_t step = 0;
};

/// exp(alpha(1)) / (exp(alpha(0)) + exp(alpha(1))).
double selection_probability(LogitPair logits);

/// Gumbel-Softmax relaxation with explicit noise (epsilon(0), epsilon(1)).
double sample_soft(LogitPair logits, double noise_skip, double noise_select, double temperature);
/// Same, with noise drawn from `noise`.
double sample_soft(LogitPair logits, const GumbelConfig& cfg, Rng& noise);

/// 1 iff alpha(1) >= alpha(0); ties select.
int sample_hard(LogitPair logits);

/// Bernoulli KL(pi || p) against the prior's Bernoulli parameter; probabilities
/// are clamped to [1e-6, 1 - 1e-6].
double kl_to_prior(double pi, const PriorSpec& prior, std::optional<double> aggregate = std::nullopt);

/// Mean selection probability of `layer` across tasks.
double aggregate_posterior(const PosteriorTable& table, std::size_t layer);
std::vector<double> aggregate_posterior(const PosteriorTable& table);

/// Mean gate value of `layer` across the supplied per-task samples.
double utilization(std::span<const GateSample> samples, std::size_t layer);

/// Sum over layers of selection probabilities for one task.
double effective_depth(const PosteriorTable& table, std::size_t task);

/// Keep mask: layer kept iff probability >= threshold.
std::vector<bool> prune(const PosteriorTable& table, std::size_t task, double keep_threshold = 0.5);

/// Draws a [layers, 2] matrix of standard Gumbel noise.
Tensor draw_gumbel_noise(std::size_t layers, Rng& noise);

// Differentiable builders over a [layers, 2] logits node.

/// Soft gates z[layers] = softmax((logits + noise) / temperature)[:, 1].
ad::Var soft_gates(ad::Graph& g, ad::Var logits, const Tensor& noise, double temperature);
/// Selection probabilities pi[layers] = softmax(logits)[:, 1].
ad::Var selection_probabilities(ad::Graph& g, ad::Var logits);
/// Per-layer Bernoulli parameters of the prior for one task.
Tensor prior_probabilities(const PriorSpec& prior, std::size_t layers, std::span<const double> aggregate = {});
/// Sum over layers of KL(pi_l || p_l).
ad::Var kl_sum(ad::Graph& g, ad::Var probabilities, const Tensor& prior);

}  // namespace latent_depth::gate
