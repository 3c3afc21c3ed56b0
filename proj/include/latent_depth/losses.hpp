// SPDX-License-Identifier: Apache-2.0
//
// Training objective: NLL + beta_eff * KL + lambda * |sum(u) - K|.
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

#include "latent_depth/autodiff.hpp"
#include "latent_depth/latent_gate.hpp"

namespace latent_depth::loss {

struct AnnealSchedule {
  enum class Kind { None, Linear };
  Kind kind = Kind::None;
  std::size_t warmup_steps = 1;

  static AnnealSchedule none() { return {}; }
  static AnnealSchedule linear(std::size_t warmup) { return {Kind::Linear, warmup}; }
};

struct LossConfig {
  double beta = 1.0;
  double lambda = 0.1;
  double target_depth = 0.0;
  gate::PriorSpec prior;
  AnnealSchedule anneal;

  void validate() const;
};

struct LossBreakdown {
  double nll = 0.0;
  double kl = 0.0;
  double depth_loss = 0.0;
  double beta_effective = 0.0;
  double total = 0.0;
};

/// |sum_l u_l - K|.
double target_depth_loss(std::span<const double> utilization, double target);

double kl_anneal(std::size_t step, const LossConfig& cfg);

/// Throws NonFiniteLoss naming the offending component.
LossBreakdown total_loss(double nll, double kl_sum, std::span<const double> utilization, const LossConfig& cfg,
                         std::size_t step);

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Differentiable |sum(u) - K| over a [layers] node.
ad::Var target_depth_loss(ad::Graph& g, ad::Var utilization, double target);

}  // namespace latent_depth::loss
