// SPDX-License-Identifier: Apache-2.0
//
// Two-level first-order training. Every inner iteration draws one batch per
// task, samples gates once per task and stack, and takes one Adam step on
// the model weights using the task-averaged objective. After I inner
// iterations the posterior logits take one Adam step with the gradient of
// the last inner iteration, and the aggregated posterior is refreshed.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "latent_depth/latent_gate.hpp"
#include "latent_depth/losses.hpp"
#include "latent_depth/tasks.hpp"
#include "latent_depth/transformer.hpp"

namespace latent_depth::train {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

enum class EvalGates { Soft, Hard };

std::string to_string(EvalGates g);
EvalGates parse_eval_gates(const std::string& text);

struct TrainConfig {
  model::StackConfig model;
  loss::LossConfig loss;
  std::size_t steps = 1;        // outer steps T
  std::size_t inner_loop = 1;   // inner iterations I per outer step
  double learning_rate = 1e-3;  // peak of the schedule
  std::size_t warmup = 400;
  double posterior_lr_scale = 1.0;  // multiplies the schedule for posterior logits
  AdamConfig adam;
  double clip_norm = 1.0;
  std::size_t batch_size = 16;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  std::size_t validate_every = 200;    // outer steps; 0 disables periodic validation
  std::size_t checkpoint_every = 0;    // outer steps; 0 keeps only the final checkpoint
  std::size_t history_every = 1;       // inner iterations between utilization records
  std::size_t max_consecutive_skips = 5;
  EvalGates eval_gates = EvalGates::Soft;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const model::StackConfig& cfg);
model::StackConfig stack_config_from_json(const nlohmann::json& j);

/// Inverse square root decay after a linear warmup; `update` counts from 0.
double learning_rate(std::size_t update, const TrainConfig& cfg);

struct MetricsRow {
  std::size_t step = 0;
  std::size_t task = 0;
  loss::LossBreakdown loss;
};

struct ValidationRow {
  std::size_t step = 0;
  std::size_t task = 0;
  double nll = 0.0;
  double accuracy = 0.0;
  double effective_depth = 0.0;
};

struct HistoryRecord {
  std::size_t step = 0;
  std::size_t task = 0;
  std::size_t layer = 0;
  double pi = 0.0;
  double z = 0.0;
  double u = 0.0;
};

struct Diverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Adam moments for a list of tensors.
struct AdamState {
  std::size_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void init(const std::vector<Tensor>& params);
  void update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr, const AdamConfig& cfg);
};

double global_norm(const std::vector<Tensor>& grads);

/// Everything that evolves during training.
struct TrainState {
  model::ModelParameters params;
  gate::PosteriorTable encoder_posterior;
  gate::PosteriorTable decoder_posterior;
  std::vector<double> encoder_aggregate;
  std::vector<double> decoder_aggregate;
  AdamState theta_adam;
  AdamState phi_adam;  // tensors: encoder tasks then decoder tasks, each [layers, 2]

  std::size_t outer_steps = 0;
  std::size_t inner_iterations = 0;
  std::size_t theta_updates = 0;
  std::size_t phi_updates = 0;
  std::size_t skipped = 0;
  std::size_t consecutive_skips = 0;
  std::size_t clip_events = 0;

  std::vector<tasks::BatchStream::State> streams;
  std::vector<std::string> noise_rngs;
  std::vector<std::string> layerdrop_rngs;
  std::vector<std::string> dropout_rngs;

  std::vector<MetricsRow> metrics;
  std::vector<ValidationRow> validation;
  std::vector<HistoryRecord> history;
};

struct EvalResult {
  std::vector<double> nll;
  std::vector<double> accuracy;
  std::vector<double> effective_depth;
  double mean_nll() const;
  double mean_accuracy() const;
};

class Trainer {
 public:
  Trainer(TrainConfig config, const tasks::Corpus& corpus);
  /// Continues from a checkpoint written by save_checkpoint.
  Trainer(const nlohmann::json& checkpoint, const tasks::Corpus& corpus);

  const TrainConfig& config() const noexcept { return config_; }
  const TrainState& state() const noexcept { return state_; }
  TrainState& mutable_state() noexcept { return state_; }
  std::size_t num_tasks() const noexcept { return corpus_->tasks.size(); }

  /// One inner iteration over all tasks; returns one breakdown per task.
  /// A non-finite objective skips the update and returns an empty list.
  std::vector<loss::LossBreakdown> inner_step();
  /// Posterior update from the last inner iteration's gradient.
  bool outer_step();
  /// I inner iterations followed by the outer update.
  void step();
  /// Runs the remaining outer steps with validation and checkpoints.
  /// Throws Diverged after too many consecutive skipped steps.
  void train(const std::optional<std::filesystem::path>& run_dir = std::nullopt);

  /// Gate values used at evaluation for one task.
  std::vector<double> eval_gates(bool decoder, std::size_t task, EvalGates mode) const;
  EvalResult evaluate(tasks::Split split, EvalGates mode, bool with_accuracy = true) const;

  nlohmann::json checkpoint() const;
  void write_outputs(const std::filesystem::path& run_dir) const;

 private:
  bool latent(bool decoder) const;
  void init_streams();
  void validate_now();
  void record_history(const std::vector<std::vector<double>>& z_dec);

  TrainConfig config_;
  const tasks::Corpus* corpus_;
  TrainState state_;
  std::vector<tasks::BatchStream> streams_;
  std::vector<Rng> noise_;
  std::vector<Rng> layerdrop_;
  std::vector<Rng> dropout_;
  std::vector<Tensor> phi_grads_;
  bool have_phi_grads_ = false;
};

/// Mean NLL of one task's split under fixed gates.
double split_nll(const model::ModelParameters& params, const std::vector<tasks::Example>& examples,
                 const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates,
                 std::size_t batch_size);

void save_checkpoint(const nlohmann::json& checkpoint, const std::filesystem::path& path);
nlohmann::json load_checkpoint(const std::filesystem::path& path);

/// Model weights and posteriors of a checkpoint, without training state.
struct ModelSnapshot {
  TrainConfig config;
  model::ModelParameters params;
  gate::PosteriorTable encoder_posterior;
  gate::PosteriorTable decoder_posterior;
};
ModelSnapshot snapshot_from_checkpoint(const nlohmann::json& checkpoint);
nlohmann::json snapshot_to_json(const ModelSnapshot& snapshot);

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
void write_validation_csv(const std::vector<ValidationRow>& rows, const std::filesystem::path& path);

}  // namespace latent_depth::train
