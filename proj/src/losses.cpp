// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/losses.hpp"

#include <algorithm>
#include <cmath>

namespace latent_depth::loss {

void LossConfig::validate() const {
  if (!(beta >= 0.0)) throw ContractViolation("beta must be nonnegative");
  if (!(lambda >= 0.0)) throw ContractViolation("lambda must be nonnegative");
  if (!(target_depth >= 0.0)) throw ContractViolation("target depth K must be nonnegative");
  if (anneal.kind == AnnealSchedule::Kind::Linear && anneal.warmup_steps < 1) {
    throw ContractViolation("linear KL annealing needs warmup_steps >= 1");
  }
  if (prior.kind == gate::PriorSpec::Kind::Beta && !(prior.a > 0.0 && prior.b > 0.0)) {
    throw ContractViolation("Beta prior parameters must be positive");
  }
}

double target_depth_loss(std::span<const double> utilization, double target) {
  double total = 0.0;
  for (double u : utilization) total += u;
  return std::fabs(total - target);
}

double kl_anneal(std::size_t step, const LossConfig& cfg) {
  if (cfg.anneal.kind == AnnealSchedule::Kind::None) return cfg.beta;
  const double frac = std::min(1.0, double(step) / double(cfg.anneal.warmup_steps));
  return cfg.beta * frac;
}

LossBreakdown total_loss(double nll, double kl_sum, std::span<const double> utilization, const LossConfig& cfg,
                         std::size_t step) {
  LossBreakdown b;
  b.nll = nll;
  b.kl = kl_sum;
  b.depth_loss = target_depth_loss(utilization, cfg.target_depth);
  b.beta_effective = kl_anneal(step, cfg);
  for (auto [name, v] : {std::pair{"nll", b.nll}, {"kl", b.kl}, {"depth_loss", b.depth_loss}}) {
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss component: ") + name);
  }
  b.total = b.nll + b.beta_effective * b.kl + cfg.lambda * b.depth_loss;
  return b;
}

ad::Var target_depth_loss(ad::Graph& g, ad::Var utilization, double target) {
  return g.abs(g.add_constant(g.sum(utilization), -target));
}

}  // namespace latent_depth::loss
