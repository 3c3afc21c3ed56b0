// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "latent_depth/diagnostics.hpp"

namespace latent_depth::train {

using nlohmann::json;

std::string to_string(EvalGates g) { return g == EvalGates::Soft ? "soft" : "hard"; }

EvalGates parse_eval_gates(const std::string& text) {
  if (text == "soft") return EvalGates::Soft;
  if (text == "hard") return EvalGates::Hard;
  throw ContractViolation("unknown gate mode '" + text + "' (expected soft or hard)");
}

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (steps < 1) throw ContractViolation("steps must be >= 1");
  if (inner_loop < 1) throw ContractViolation("inner loop frequency I must be >= 1");
  if (!(learning_rate >= 0.0)) throw ContractViolation("learning rate must be nonnegative");
  if (warmup < 1) throw ContractViolation("warmup must be >= 1");
  if (!(posterior_lr_scale >= 0.0) || !std::isfinite(posterior_lr_scale)) {
    throw ContractViolation("posterior learning-rate scale must be finite and nonnegative");
  }
  if (batch_size < 1) throw ContractViolation("batch size must be >= 1");
  if (!(temperature > 0.0)) throw ContractViolation("temperature must be positive");
  if (!(clip_norm > 0.0)) throw ContractViolation("clip norm must be positive");
  for (double b : {adam.beta1, adam.beta2}) {
    if (!(b >= 0.0 && b < 1.0)) throw ContractViolation("Adam coefficients must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ContractViolation("Adam epsilon must be positive");
}

// ---------------------------------------------------------------------------
// Config serialization

namespace {

json gating_to_json(const model::Gating& g) { return {{"kind", model::to_string(g.kind)}, {"drop_prob", g.drop_prob}}; }

model::Gating gating_from_json(const json& j, model::Gating g) {
  if (j.contains("kind")) g.kind = model::parse_gating_kind(j.at("kind").get<std::string>());
  g.drop_prob = j.value("drop_prob", g.drop_prob);
  return g;
}

std::string prior_kind(const gate::PriorSpec& p) {
  switch (p.kind) {
    case gate::PriorSpec::Kind::Uniform: return "uniform";
    case gate::PriorSpec::Kind::Beta: return "beta";
    case gate::PriorSpec::Kind::AggregatedPosterior: return "aggregate";
  }
  return "uniform";
}

}  // namespace

json to_json(const model::StackConfig& c) {
  return {{"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"model_dim", c.model_dim},
          {"ffn_dim", c.ffn_dim},
          {"heads", c.heads},
          {"vocab_size", c.vocab_size},
          {"norm", c.norm == model::NormMode::PreNorm ? "pre-norm" : "none"},
          {"encoder_gating", gating_to_json(c.encoder_gating)},
          {"decoder_gating", gating_to_json(c.decoder_gating)},
          {"dropout", c.dropout}};
}

model::StackConfig stack_config_from_json(const json& j) {
  model::StackConfig c;
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.heads = j.value("heads", c.heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  if (j.contains("norm")) c.norm = model::parse_norm_mode(j.at("norm").get<std::string>());
  if (j.contains("encoder_gating")) c.encoder_gating = gating_from_json(j.at("encoder_gating"), c.encoder_gating);
  if (j.contains("decoder_gating")) c.decoder_gating = gating_from_json(j.at("decoder_gating"), c.decoder_gating);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

json to_json(const TrainConfig& c) {
  const auto& l = c.loss;
  return {{"model", to_json(c.model)},
          {"loss",
           {{"beta", l.beta},
            {"lambda", l.lambda},
            {"K", l.target_depth},
            {"prior", {{"kind", prior_kind(l.prior)}, {"a", l.prior.a}, {"b", l.prior.b}}},
            {"anneal",
             {{"kind", l.anneal.kind == loss::AnnealSchedule::Kind::Linear ? "linear" : "none"},
              {"warmup_steps", l.anneal.warmup_steps}}}}},
          {"steps", c.steps},
          {"inner_loop", c.inner_loop},
          {"learning_rate", c.learning_rate},
          {"warmup", c.warmup},
          {"posterior_lr_scale", c.posterior_lr_scale},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"clip_norm", c.clip_norm},
          {"batch_size", c.batch_size},
          {"temperature", c.temperature},
          {"seed", c.seed},
          {"validate_every", c.validate_every},
          {"checkpoint_every", c.checkpoint_every},
          {"history_every", c.history_every},
          {"max_consecutive_skips", c.max_consecutive_skips},
          {"eval_gates", to_string(c.eval_gates)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = stack_config_from_json(j.at("model"));
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    c.loss.beta = l.value("beta", c.loss.beta);
    c.loss.lambda = l.value("lambda", c.loss.lambda);
    c.loss.target_depth = l.value("K", c.loss.target_depth);
    if (l.contains("prior")) {
      const auto& p = l.at("prior");
      const auto kind = p.value("kind", std::string("uniform"));
      if (kind == "uniform") {
        c.loss.prior = gate::PriorSpec::uniform();
      } else if (kind == "beta") {
        c.loss.prior = gate::PriorSpec::beta(p.value("a", 1.0), p.value("b", 1.0));
      } else if (kind == "aggregate") {
        c.loss.prior = gate::PriorSpec::aggregated();
      } else {
        throw ContractViolation("unknown prior kind '" + kind + "'");
      }
    }
    if (l.contains("anneal")) {
      const auto& a = l.at("anneal");
      const auto kind = a.value("kind", std::string("none"));
      if (kind == "none") {
        c.loss.anneal = loss::AnnealSchedule::none();
      } else if (kind == "linear") {
        c.loss.anneal = loss::AnnealSchedule::linear(a.value("warmup_steps", std::size_t{1}));
      } else {
        throw ContractViolation("unknown anneal schedule '" + kind + "'");
      }
    }
  }
  c.steps = j.value("steps", c.steps);
  c.inner_loop = j.value("inner_loop", c.inner_loop);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup = j.value("warmup", c.warmup);
  c.posterior_lr_scale = j.value("posterior_lr_scale", c.posterior_lr_scale);
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.temperature = j.value("temperature", c.temperature);
  c.seed = j.value("seed", c.seed);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.history_every = j.value("history_every", c.history_every);
  c.max_consecutive_skips = j.value("max_consecutive_skips", c.max_consecutive_skips);
  if (j.contains("eval_gates")) c.eval_gates = parse_eval_gates(j.at("eval_gates").get<std::string>());
  return c;
}

double learning_rate(std::size_t update, const TrainConfig& cfg) {
  const double s = double(update + 1);
  const double w = double(cfg.warmup);
  return cfg.learning_rate * std::min(s / w, std::sqrt(w / s));
}

// ---------------------------------------------------------------------------
// Optimizer

void AdamState::init(const std::vector<Tensor>& params) {
  t = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.push_back(Tensor::zeros_like(p));
    v.push_back(Tensor::zeros_like(p));
  }
}

void AdamState::update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr,
                       const AdamConfig& cfg) {
  if (params.size() != m.size() || grads.size() != m.size()) {
    throw ContractViolation("optimizer state does not match the parameter list");
  }
  ++t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != m[i].shape() || grads[i].shape() != m[i].shape()) {
      throw ContractViolation("optimizer moment shape mismatch for tensor " + std::to_string(i));
    }
    double* p = params[i].data();
    double* mi = m[i].data();
    double* vi = v[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      mi[k] = cfg.beta1 * mi[k] + (1.0 - cfg.beta1) * g[k];
      vi[k] = cfg.beta2 * vi[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= lr * (mi[k] / c1) / (std::sqrt(vi[k] / c2) + cfg.eps);
    }
  }
}

double global_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squared_norm();
  return std::sqrt(sq);
}

double EvalResult::mean_nll() const {
  double s = 0.0;
  for (double v : nll) s += v;
  return nll.empty() ? 0.0 : s / double(nll.size());
}

double EvalResult::mean_accuracy() const {
  double s = 0.0;
  for (double v : accuracy) s += v;
  return accuracy.empty() ? 0.0 : s / double(accuracy.size());
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::vector<Tensor> phi_tensors(const TrainState& s) {
  std::vector<Tensor> out;
  for (std::size_t n = 0; n < s.encoder_posterior.num_tasks(); ++n) out.push_back(s.encoder_posterior.task_logits(n));
  for (std::size_t n = 0; n < s.decoder_posterior.num_tasks(); ++n) out.push_back(s.decoder_posterior.task_logits(n));
  return out;
}

std::string task_rng_seed_error(std::size_t n) { return "checkpoint lacks random state for task " + std::to_string(n); }

}  // namespace

Trainer::Trainer(TrainConfig config, const tasks::Corpus& corpus) : config_(std::move(config)), corpus_(&corpus) {
  config_.validate();
  if (config_.model.vocab_size != corpus.vocab) {
    throw ContractViolation("model vocab " + std::to_string(config_.model.vocab_size) + " differs from corpus vocab " +
                            std::to_string(corpus.vocab));
  }
  const std::size_t N = corpus.tasks.size();
  state_.params = model::ModelParameters::initialize(config_.model, Rng::derive(config_.seed, 1));
  state_.encoder_posterior = gate::PosteriorTable(N, config_.model.encoder_layers);
  state_.decoder_posterior = gate::PosteriorTable(N, config_.model.decoder_layers);
  state_.encoder_aggregate = gate::aggregate_posterior(state_.encoder_posterior);
  state_.decoder_aggregate = gate::aggregate_posterior(state_.decoder_posterior);
  state_.theta_adam.init(state_.params.tensors);
  state_.phi_adam.init(phi_tensors(state_));
  init_streams();
}

void Trainer::init_streams() {
  const std::size_t N = corpus_->tasks.size();
  streams_.clear();
  noise_.clear();
  layerdrop_.clear();
  dropout_.clear();
  for (std::size_t n = 0; n < N; ++n) {
    streams_.emplace_back(*corpus_, n, config_.batch_size, Rng::derive(config_.seed, 100 + n));
    noise_.emplace_back(Rng::derive(config_.seed, 200 + n));
    layerdrop_.emplace_back(Rng::derive(config_.seed, 300 + n));
    dropout_.emplace_back(Rng::derive(config_.seed, 400 + n));
  }
}

bool Trainer::latent(bool decoder) const {
  const auto& g = decoder ? config_.model.decoder_gating : config_.model.encoder_gating;
  return g.kind == model::Gating::Kind::Latent;
}

std::vector<loss::LossBreakdown> Trainer::inner_step() {
  const std::size_t N = num_tasks();
  const std::size_t Le = config_.model.encoder_layers;
  const std::size_t Ld = config_.model.decoder_layers;
  const bool enc_latent = latent(false);
  const bool dec_latent = latent(true);
  const std::size_t step = state_.inner_iterations;
  const double beta_eff = loss::kl_anneal(step, config_.loss);

  const Tensor enc_prior = gate::prior_probabilities(config_.loss.prior, Le, state_.encoder_aggregate);
  const Tensor dec_prior = gate::prior_probabilities(config_.loss.prior, Ld, state_.decoder_aggregate);

  ad::Graph g;
  const auto bound = model::bind(g, state_.params, true);
  std::vector<ad::Var> enc_alpha, dec_alpha, nll(N), kl(N), z_dec;
  std::vector<std::vector<double>> z_values(N);
  std::optional<ad::Var> objective;

  auto stack_gates = [&](bool decoder, std::size_t n, std::optional<ad::Var>& kl_term) {
    const std::size_t L = decoder ? Ld : Le;
    const auto& table = decoder ? state_.decoder_posterior : state_.encoder_posterior;
    if (!latent(decoder)) {
      const auto& gating = decoder ? config_.model.decoder_gating : config_.model.encoder_gating;
      const auto z = model::fixed_gate_values(gating, L, true, &layerdrop_[n]);
      if (decoder) z_values[n] = z;
      return model::constant_gates(g, z);
    }
    auto alpha = g.leaf(table.task_logits(n));
    (decoder ? dec_alpha : enc_alpha).push_back(alpha);
    const Tensor noise = gate::draw_gumbel_noise(L, noise_[n]);
    auto z = gate::soft_gates(g, alpha, noise, config_.temperature);
    if (decoder) {
      z_dec.push_back(z);
      const auto zs = g.value(z).values();
      z_values[n].assign(zs.begin(), zs.end());
    }
    auto k = gate::kl_sum(g, gate::selection_probabilities(g, alpha), decoder ? dec_prior : enc_prior);
    kl_term = kl_term ? g.add(*kl_term, k) : k;
    return model::split_gates(g, z, L);
  };

  for (std::size_t n = 0; n < N; ++n) {
    const auto batch = streams_[n].next();
    std::optional<ad::Var> kl_term;
    const auto enc_gates = stack_gates(false, n, kl_term);
    const auto dec_gates = stack_gates(true, n, kl_term);
    const model::DropoutContext dropout{&dropout_[n], config_.model.dropout};
    const auto fwd = model::forward_seq2seq(g, state_.params, bound, batch, enc_gates, dec_gates, dropout);
    nll[n] = model::sequence_nll(g, fwd.logits, batch.target_out);
    kl[n] = kl_term ? *kl_term : g.constant(Tensor::scalar(0.0));
    auto term = g.add(nll[n], g.scale(kl[n], beta_eff));
    objective = objective ? g.add(*objective, term) : term;
  }
  ad::Var obj = g.scale(*objective, 1.0 / double(N));

  std::vector<double> u;
  if (dec_latent) {
    ad::Var total = z_dec[0];
    for (std::size_t n = 1; n < N; ++n) total = g.add(total, z_dec[n]);
    auto u_var = g.scale(total, 1.0 / double(N));
    const auto us = g.value(u_var).values();
    u.assign(us.begin(), us.end());
    auto depth_var = loss::target_depth_loss(g, u_var, config_.loss.target_depth);
    obj = g.add(obj, g.scale(depth_var, config_.loss.lambda));
  }

  std::vector<loss::LossBreakdown> rows;
  bool finite = std::isfinite(g.value(obj).item());
  try {
    for (std::size_t n = 0; n < N; ++n) {
      auto b = loss::total_loss(g.value(nll[n]).item(), g.value(kl[n]).item(), std::span<const double>(u),
                                config_.loss, step);
      if (!dec_latent) {
        b.depth_loss = 0.0;
        b.total = b.nll + b.beta_effective * b.kl;
      }
      rows.push_back(b);
    }
  } catch (const loss::NonFiniteLoss& e) {
    std::clog << "[latent-depth] step " << step << ": " << e.what() << "\n";
    finite = false;
  }

  std::vector<Tensor> grads;
  double norm = 0.0;
  ad::Gradients all;
  if (finite) {
    all = g.backward(obj);
    grads.reserve(bound.vars.size());
    for (auto v : bound.vars) grads.push_back(all.of(v));
    norm = global_norm(grads);
    finite = std::isfinite(norm);
  }
  ++state_.inner_iterations;
  if (!finite) {
    ++state_.skipped;
    ++state_.consecutive_skips;
    have_phi_grads_ = false;
    std::clog << "[latent-depth] step " << step << ": non-finite objective or gradient, update skipped\n";
    if (state_.consecutive_skips > config_.max_consecutive_skips) {
      std::string last = "none";
      for (auto it = state_.metrics.rbegin(); it != state_.metrics.rend(); ++it) {
        last = "step " + std::to_string(it->step) + " nll " + std::to_string(it->loss.nll) + " total " +
               std::to_string(it->loss.total);
        break;
      }
      throw Diverged("training diverged: " + std::to_string(state_.consecutive_skips) +
                     " consecutive non-finite steps (last finite: " + last + ")");
    }
    return {};
  }
  state_.consecutive_skips = 0;

  if (norm > config_.clip_norm) {
    const double s = config_.clip_norm / norm;
    for (auto& t : grads) {
      for (auto& v : t.values()) v *= s;
    }
    ++state_.clip_events;
  }
  state_.theta_adam.update(state_.params.tensors, grads, learning_rate(state_.theta_updates, config_), config_.adam);
  ++state_.theta_updates;

  phi_grads_.clear();
  for (std::size_t n = 0; n < N; ++n) {
    phi_grads_.push_back(enc_latent ? all.of(enc_alpha[n]) : Tensor({Le, 2}));
  }
  for (std::size_t n = 0; n < N; ++n) {
    phi_grads_.push_back(dec_latent ? all.of(dec_alpha[n]) : Tensor({Ld, 2}));
  }
  have_phi_grads_ = enc_latent || dec_latent;

  for (std::size_t n = 0; n < N; ++n) state_.metrics.push_back({step, n, rows[n]});
  if (dec_latent && config_.history_every > 0 && step % config_.history_every == 0) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t l = 0; l < Ld; ++l) {
        state_.history.push_back({step, n, l, state_.decoder_posterior.probability(n, l), z_values[n][l], u[l]});
      }
    }
  }
  return rows;
}

bool Trainer::outer_step() {
  if (!have_phi_grads_) return false;
  auto phi = phi_tensors(state_);
  const double lr = config_.posterior_lr_scale *
                   learning_rate(state_.theta_updates == 0 ? 0 : state_.theta_updates - 1, config_);
  state_.phi_adam.update(phi, phi_grads_, lr, config_.adam);
  const std::size_t N = num_tasks();
  for (std::size_t n = 0; n < N; ++n) {
    if (latent(false)) state_.encoder_posterior.set_task_logits(n, phi[n]);
    if (latent(true)) state_.decoder_posterior.set_task_logits(n, phi[N + n]);
  }
  ++state_.phi_updates;
  state_.encoder_aggregate = gate::aggregate_posterior(state_.encoder_posterior);
  state_.decoder_aggregate = gate::aggregate_posterior(state_.decoder_posterior);
  have_phi_grads_ = false;
  return true;
}

void Trainer::step() {
  have_phi_grads_ = false;
  for (std::size_t i = 0; i < config_.inner_loop; ++i) inner_step();
  outer_step();
  ++state_.outer_steps;
}

std::vector<double> Trainer::eval_gates(bool decoder, std::size_t task, EvalGates mode) const {
  const std::size_t L = decoder ? config_.model.decoder_layers : config_.model.encoder_layers;
  if (!latent(decoder)) return std::vector<double>(L, 1.0);
  const auto& table = decoder ? state_.decoder_posterior : state_.encoder_posterior;
  std::vector<double> z(L);
  for (std::size_t l = 0; l < L; ++l) {
    z[l] = mode == EvalGates::Soft ? table.probability(task, l) : double(gate::sample_hard(table.at(task, l)));
  }
  return z;
}

double split_nll(const model::ModelParameters& params, const std::vector<tasks::Example>& examples,
                 const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates,
                 std::size_t batch_size) {
  double total = 0.0;
  std::size_t tokens = 0;
  const std::span<const tasks::Example> all(examples);
  for (std::size_t begin = 0; begin < all.size(); begin += batch_size) {
    const auto batch = tasks::make_batch(all.subspan(begin, std::min(batch_size, all.size() - begin)));
    ad::Graph g;
    const auto bound = model::bind(g, params, false);
    const auto fwd = model::forward_seq2seq(g, params, bound, batch, model::constant_gates(g, encoder_gates),
                                            model::constant_gates(g, decoder_gates));
    const auto count = batch.target_tokens();
    total += g.value(model::sequence_nll(g, fwd.logits, batch.target_out)).item() * double(count);
    tokens += count;
  }
  if (tokens == 0) throw ContractViolation("split has no target tokens");
  return total / double(tokens);
}

EvalResult Trainer::evaluate(tasks::Split split, EvalGates mode, bool with_accuracy) const {
  EvalResult r;
  for (std::size_t n = 0; n < num_tasks(); ++n) {
    const auto eg = eval_gates(false, n, mode);
    const auto dg = eval_gates(true, n, mode);
    const auto& ex = tasks::examples(corpus_->tasks[n], split);
    r.nll.push_back(split_nll(state_.params, ex, eg, dg, 64));
    r.accuracy.push_back(with_accuracy ? tasks::token_accuracy(state_.params, ex, eg, dg, 64).value() : 0.0);
    r.effective_depth.push_back(latent(true) ? gate::effective_depth(state_.decoder_posterior, n)
                                             : double(config_.model.decoder_layers));
  }
  return r;
}

void Trainer::validate_now() {
  const auto r = evaluate(tasks::Split::Valid, config_.eval_gates, true);
  for (std::size_t n = 0; n < num_tasks(); ++n) {
    state_.validation.push_back({state_.outer_steps, n, r.nll[n], r.accuracy[n], r.effective_depth[n]});
  }
}

void Trainer::train(const std::optional<std::filesystem::path>& run_dir) {
  try {
    while (state_.outer_steps < config_.steps) {
      step();
      if (config_.validate_every > 0 && state_.outer_steps % config_.validate_every == 0) validate_now();
      if (run_dir && config_.checkpoint_every > 0 && state_.outer_steps % config_.checkpoint_every == 0 &&
          state_.outer_steps < config_.steps) {
        char name[64];
        std::snprintf(name, sizeof name, "step-%06zu.json", state_.outer_steps);
        save_checkpoint(checkpoint(), *run_dir / "checkpoints" / name);
      }
    }
    if (state_.validation.empty() || state_.validation.back().step != state_.outer_steps) validate_now();
  } catch (const Diverged&) {
    if (run_dir) write_outputs(*run_dir);
    throw;
  }
  if (run_dir) {
    save_checkpoint(checkpoint(), *run_dir / "checkpoints" / "final.json");
    write_outputs(*run_dir);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json tensors_to_json(const std::vector<Tensor>& tensors) {
  json arr = json::array();
  for (const auto& t : tensors) arr.push_back({{"shape", t.shape()}, {"values", t.values()}});
  return arr;
}

std::vector<Tensor> tensors_from_json(const json& arr) {
  std::vector<Tensor> out;
  for (const auto& j : arr) {
    out.emplace_back(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
  }
  return out;
}

json table_to_json(const gate::PosteriorTable& t) {
  json rows = json::array();
  for (std::size_t n = 0; n < t.num_tasks(); ++n) {
    json row = json::array();
    for (std::size_t l = 0; l < t.num_layers(); ++l) row.push_back({t.at(n, l).skip, t.at(n, l).select});
    rows.push_back(row);
  }
  return rows;
}

gate::PosteriorTable table_from_json(const json& rows) {
  const std::size_t N = rows.size();
  const std::size_t L = N ? rows[0].size() : 0;
  gate::PosteriorTable t(N, L);
  for (std::size_t n = 0; n < N; ++n) {
    if (rows[n].size() != L) throw ContractViolation("ragged posterior table in checkpoint");
    for (std::size_t l = 0; l < L; ++l) t.at(n, l) = {rows[n][l][0].get<double>(), rows[n][l][1].get<double>()};
  }
  return t;
}

json adam_to_json(const AdamState& a) { return {{"t", a.t}, {"m", tensors_to_json(a.m)}, {"v", tensors_to_json(a.v)}}; }

AdamState adam_from_json(const json& j) {
  AdamState a;
  a.t = j.at("t").get<std::size_t>();
  a.m = tensors_from_json(j.at("m"));
  a.v = tensors_from_json(j.at("v"));
  return a;
}

json params_to_json(const model::ModelParameters& p) {
  return {{"config", to_json(p.config)}, {"names", p.names}, {"tensors", tensors_to_json(p.tensors)}};
}

model::ModelParameters params_from_json(const json& j) {
  auto p = model::ModelParameters::layout(stack_config_from_json(j.at("config")));
  const auto names = j.at("names").get<std::vector<std::string>>();
  auto tensors = tensors_from_json(j.at("tensors"));
  if (names != p.names || tensors.size() != p.tensors.size()) {
    throw ContractViolation("checkpoint parameters do not match their configuration");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].shape() != p.tensors[i].shape()) throw ContractViolation("bad shape for parameter " + names[i]);
    p.tensors[i] = std::move(tensors[i]);
  }
  return p;
}

}  // namespace

json Trainer::checkpoint() const {
  const auto& s = state_;
  json streams = json::array();
  for (const auto& st : streams_) {
    const auto x = st.state();
    streams.push_back({{"rng", x.rng}, {"epoch", x.epoch}, {"cursor", x.cursor}, {"order", x.order}});
  }
  json rngs = {{"noise", json::array()}, {"layerdrop", json::array()}, {"dropout", json::array()}};
  for (std::size_t n = 0; n < noise_.size(); ++n) {
    rngs["noise"].push_back(noise_[n].state());
    rngs["layerdrop"].push_back(layerdrop_[n].state());
    rngs["dropout"].push_back(dropout_[n].state());
  }
  json metrics = json::array();
  for (const auto& m : s.metrics) {
    metrics.push_back({m.step, m.task, m.loss.nll, m.loss.kl, m.loss.depth_loss, m.loss.beta_effective, m.loss.total});
  }
  json validation = json::array();
  for (const auto& v : s.validation) validation.push_back({v.step, v.task, v.nll, v.accuracy, v.effective_depth});
  json history = json::array();
  for (const auto& h : s.history) history.push_back({h.step, h.task, h.layer, h.pi, h.z, h.u});

  return {{"format", "latent-depth-checkpoint"},
          {"version", 1},
          {"config", to_json(config_)},
          {"params", params_to_json(s.params)},
          {"posterior", {{"encoder", table_to_json(s.encoder_posterior)}, {"decoder", table_to_json(s.decoder_posterior)}}},
          {"aggregate", {{"encoder", s.encoder_aggregate}, {"decoder", s.decoder_aggregate}}},
          {"adam", {{"theta", adam_to_json(s.theta_adam)}, {"phi", adam_to_json(s.phi_adam)}}},
          {"counters",
           {{"outer_steps", s.outer_steps},
            {"inner_iterations", s.inner_iterations},
            {"theta_updates", s.theta_updates},
            {"phi_updates", s.phi_updates},
            {"skipped", s.skipped},
            {"consecutive_skips", s.consecutive_skips},
            {"clip_events", s.clip_events}}},
          {"streams", streams},
          {"rng", rngs},
          {"metrics", metrics},
          {"validation", validation},
          {"history", history}};
}

Trainer::Trainer(const json& ck, const tasks::Corpus& corpus)
    : Trainer(train_config_from_json(ck.at("config")), corpus) {
  if (ck.value("format", std::string()) != "latent-depth-checkpoint" || ck.value("version", 0) != 1) {
    throw ContractViolation("not a version-1 latent-depth checkpoint");
  }
  auto& s = state_;
  s.params = params_from_json(ck.at("params"));
  s.encoder_posterior = table_from_json(ck.at("posterior").at("encoder"));
  s.decoder_posterior = table_from_json(ck.at("posterior").at("decoder"));
  s.encoder_aggregate = ck.at("aggregate").at("encoder").get<std::vector<double>>();
  s.decoder_aggregate = ck.at("aggregate").at("decoder").get<std::vector<double>>();
  s.theta_adam = adam_from_json(ck.at("adam").at("theta"));
  s.phi_adam = adam_from_json(ck.at("adam").at("phi"));
  const auto& c = ck.at("counters");
  s.outer_steps = c.at("outer_steps").get<std::size_t>();
  s.inner_iterations = c.at("inner_iterations").get<std::size_t>();
  s.theta_updates = c.at("theta_updates").get<std::size_t>();
  s.phi_updates = c.at("phi_updates").get<std::size_t>();
  s.skipped = c.at("skipped").get<std::size_t>();
  s.consecutive_skips = c.at("consecutive_skips").get<std::size_t>();
  s.clip_events = c.at("clip_events").get<std::size_t>();

  const std::size_t N = num_tasks();
  const auto& streams = ck.at("streams");
  const auto& rngs = ck.at("rng");
  if (streams.size() != N || rngs.at("noise").size() != N) throw ContractViolation(task_rng_seed_error(streams.size()));
  for (std::size_t n = 0; n < N; ++n) {
    tasks::BatchStream::State st;
    st.rng = streams[n].at("rng").get<std::string>();
    st.epoch = streams[n].at("epoch").get<std::size_t>();
    st.cursor = streams[n].at("cursor").get<std::size_t>();
    st.order = streams[n].at("order").get<std::vector<std::size_t>>();
    streams_[n].restore(st);
    noise_[n].restore(rngs.at("noise")[n].get<std::string>());
    layerdrop_[n].restore(rngs.at("layerdrop")[n].get<std::string>());
    dropout_[n].restore(rngs.at("dropout")[n].get<std::string>());
  }
  for (const auto& m : ck.at("metrics")) {
    s.metrics.push_back({m[0].get<std::size_t>(), m[1].get<std::size_t>(),
                         {m[2].get<double>(), m[3].get<double>(), m[4].get<double>(), m[5].get<double>(),
                          m[6].get<double>()}});
  }
  for (const auto& v : ck.at("validation")) {
    s.validation.push_back({v[0].get<std::size_t>(), v[1].get<std::size_t>(), v[2].get<double>(), v[3].get<double>(),
                            v[4].get<double>()});
  }
  for (const auto& h : ck.at("history")) {
    s.history.push_back({h[0].get<std::size_t>(), h[1].get<std::size_t>(), h[2].get<std::size_t>(), h[3].get<double>(),
                         h[4].get<double>(), h[5].get<double>()});
  }
  if (s.theta_adam.m.size() != s.params.tensors.size()) throw ContractViolation("optimizer state does not match model");
}

void save_checkpoint(const json& checkpoint, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint.dump() << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

json load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  return json::parse(in);
}

ModelSnapshot snapshot_from_checkpoint(const json& ck) {
  ModelSnapshot s;
  s.config = train_config_from_json(ck.at("config"));
  s.params = params_from_json(ck.at("params"));
  s.config.model = s.params.config;
  s.encoder_posterior = table_from_json(ck.at("posterior").at("encoder"));
  s.decoder_posterior = table_from_json(ck.at("posterior").at("decoder"));
  return s;
}

json snapshot_to_json(const ModelSnapshot& s) {
  return {{"format", "latent-depth-model"},
          {"version", 1},
          {"config", to_json(s.config)},
          {"params", params_to_json(s.params)},
          {"posterior", {{"encoder", table_to_json(s.encoder_posterior)}, {"decoder", table_to_json(s.decoder_posterior)}}}};
}

// ---------------------------------------------------------------------------
// CSV outputs

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,task,nll,kl,depth_loss,beta_effective,total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.task, r.loss.nll, r.loss.kl,
                  r.loss.depth_loss, r.loss.beta_effective, r.loss.total);
    out << buf;
  }
}

void write_validation_csv(const std::vector<ValidationRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,task,nll,accuracy,effective_depth\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g\n", r.step, r.task, r.nll, r.accuracy,
                  r.effective_depth);
    out << buf;
  }
}

void Trainer::write_outputs(const std::filesystem::path& run_dir) const {
  std::filesystem::create_directories(run_dir);
  write_metrics_csv(state_.metrics, run_dir / "metrics.csv");
  write_validation_csv(state_.validation, run_dir / "validation.csv");
  diag::write_history(state_.history, run_dir / "hist.bin");
  diag::export_history(state_.history, run_dir / "utilization.csv");
}

}  // namespace latent_depth::train
