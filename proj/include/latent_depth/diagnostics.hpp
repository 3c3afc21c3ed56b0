// SPDX-License-Identifier: Apache-2.0
//
// Gradient audits, activation-gradient probes and utilization exports.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "latent_depth/latent_gate.hpp"
#include "latent_depth/trainer.hpp"
#include "latent_depth/transformer.hpp"

namespace latent_depth::diag {

struct GroupCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double scale = 0.0;  // largest sampled |analytic| in the group, at least the floor
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
  std::string failure;  // non-finite loss location, if any
};

/// A coordinate passes when its relative error is within tolerance, when
/// both gradients are below the absolute floor, or when its absolute error is
/// within tolerance times the group's gradient scale.
struct GradCheckReport {
  double tolerance = 1e-4;
  double abs_floor = 1e-7;
  std::vector<GroupCheck> groups;
  bool passed() const;
  std::string text() const;
  std::string csv() const;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double abs_floor = 1e-7;
  double eps = 1e-5;
  std::size_t max_coordinates = 256;  // per parameter group
  std::uint64_t sample_seed = 7;
};

/// Compares autodiff against central differences for sampled coordinates of
/// every parameter tensor and for every gate scalar. Gates are free leaves
/// with the given values.
GradCheckReport grad_check(const model::ModelParameters& params, const model::Batch& batch,
                           const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates,
                           const GradCheckOptions& options = {});

/// Same, with gates produced by the Gumbel-Softmax relaxation of `logits`
/// under frozen noise; audits the posterior logits as well.
GradCheckReport grad_check_latent(const model::ModelParameters& params, const model::Batch& batch,
                                  const Tensor& encoder_logits, const Tensor& decoder_logits,
                                  const Tensor& encoder_noise, const Tensor& decoder_noise, double temperature,
                                  const GradCheckOptions& options = {});

struct ProbeRow {
  std::string assignment;
  std::string stack;
  std::size_t layer = 0;
  double grad_norm = 0.0;
};

/// ||dL/dx_l|| per layer for each named gate assignment.
struct GateAssignment {
  std::string name;
  std::vector<double> encoder;
  std::vector<double> decoder;
};

std::vector<GateAssignment> standard_assignments(std::size_t encoder_layers, std::size_t decoder_layers,
                                                 std::uint64_t seed, double temperature = 1.0);
std::vector<ProbeRow> gradient_scaling_probe(const model::ModelParameters& params, const model::Batch& batch,
                                             const std::vector<GateAssignment>& assignments);
std::string probe_csv(const std::vector<ProbeRow>& rows);

/// Mean binary entropy of the selection probabilities over tasks and layers.
double discreteness_score(const gate::PosteriorTable& table);

void write_history(const std::vector<train::HistoryRecord>& history, const std::filesystem::path& path);
std::vector<train::HistoryRecord> read_history(const std::filesystem::path& path);
/// CSV with header step,task,layer,pi,z,u.
void export_history(const std::vector<train::HistoryRecord>& history, const std::filesystem::path& path);
std::vector<train::HistoryRecord> parse_history_csv(const std::filesystem::path& path);

}  // namespace latent_depth::diag
