// SPDX-License-Identifier: Apache-2.0
//
// latent-depth: corpus generation, training, evaluation, pruning and
// diagnostics from the command line.
//
// Exit codes: 0 success, 1 I/O or runtime error, 2 usage or validation
// error, 3 divergence, 4 gradient check failure.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "latent_depth/diagnostics.hpp"
#include "latent_depth/latent_gate.hpp"
#include "latent_depth/losses.hpp"
#include "latent_depth/tasks.hpp"
#include "latent_depth/trainer.hpp"
#include "latent_depth/transformer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace latent_depth;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kDiverged = 3, kGradCheck = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_text(const std::string& text, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Corpus selection shared by train / eval / prune

struct CorpusArgs {
  std::string dir;
  std::string preset;
  std::size_t vocab = 32;
  std::uint64_t seed = 1;
  std::size_t train_examples = 256;
  std::size_t max_len = 6;
};

void add_corpus_flags(CLI::App* cmd, CorpusArgs& a, bool with_generation) {
  cmd->add_option("--corpus", a.dir, "Corpus directory written by gen-corpus");
  cmd->add_option("--tasks", a.preset, "Generate a benchmark preset in memory instead")
      ->check(CLI::IsMember(tasks::preset_names()));
  cmd->add_option("--vocab", a.vocab, "Vocabulary size for --tasks");
  cmd->add_option("--corpus-seed", a.seed, "Corpus seed for --tasks");
  if (with_generation) {
    cmd->add_option("--train-examples", a.train_examples, "Training examples per task for --tasks");
    cmd->add_option("--max-len", a.max_len, "Longest canonical sequence for --tasks");
  }
}

json corpus_source(const CorpusArgs& a) {
  if (!a.dir.empty()) return {{"dir", fs::absolute(a.dir).string()}};
  return {{"preset", a.preset},
          {"vocab", a.vocab},
          {"seed", a.seed},
          {"train_examples", a.train_examples},
          {"max_len", a.max_len}};
}

tasks::Corpus load_corpus(const json& source) {
  if (source.contains("dir")) return tasks::read_corpus(source.at("dir").get<std::string>());
  if (!source.contains("preset") || source.at("preset").get<std::string>().empty()) {
    throw UsageError("a corpus is required: pass --corpus DIR or --tasks PRESET");
  }
  tasks::PresetOptions opt;
  opt.train_examples = source.value("train_examples", opt.train_examples);
  opt.max_len = source.value("max_len", opt.max_len);
  const auto vocab = source.at("vocab").get<std::size_t>();
  const auto seed = source.at("seed").get<std::uint64_t>();
  return tasks::generate_corpus(tasks::preset_specs(source.at("preset").get<std::string>(), vocab, seed, opt), vocab,
                                seed);
}

std::optional<json> corpus_from_flags(const CorpusArgs& a) {
  if (!a.dir.empty() && !a.preset.empty()) throw UsageError("--corpus and --tasks are mutually exclusive");
  if (a.dir.empty() && a.preset.empty()) return std::nullopt;
  return corpus_source(a);
}

// ---------------------------------------------------------------------------
// Gates of a saved model

std::vector<double> snapshot_gates(const train::ModelSnapshot& s, bool decoder, std::size_t task, train::EvalGates mode) {
  const auto& cfg = s.params.config;
  const std::size_t L = decoder ? cfg.decoder_layers : cfg.encoder_layers;
  const auto kind = decoder ? cfg.decoder_gating.kind : cfg.encoder_gating.kind;
  if (kind != model::Gating::Kind::Latent) return std::vector<double>(L, 1.0);
  const auto& table = decoder ? s.decoder_posterior : s.encoder_posterior;
  std::vector<double> z(L);
  for (std::size_t l = 0; l < L; ++l) {
    z[l] = mode == train::EvalGates::Soft ? table.probability(task, l) : double(gate::sample_hard(table.at(task, l)));
  }
  return z;
}

double snapshot_depth(const train::ModelSnapshot& s, std::size_t task) {
  if (s.params.config.decoder_gating.kind != model::Gating::Kind::Latent) return double(s.params.config.decoder_layers);
  return gate::effective_depth(s.decoder_posterior, task);
}

train::ModelSnapshot load_snapshot(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return train::snapshot_from_checkpoint(read_json(path));
}

// ---------------------------------------------------------------------------
// gen-corpus

struct GenArgs {
  std::string preset;
  std::size_t vocab = 32;
  std::uint64_t seed = 1;
  std::string out;
  tasks::PresetOptions options;
};

int cmd_gen_corpus(const GenArgs& a) {
  const auto specs = tasks::preset_specs(a.preset, a.vocab, a.seed, a.options);
  const auto corpus = tasks::generate_corpus(specs, a.vocab, a.seed);
  fs::create_directories(a.out);
  tasks::write_corpus(corpus, a.out);
  write_json({{"command", "gen-corpus"},
              {"version", kVersion},
              {"tasks", a.preset},
              {"vocab", a.vocab},
              {"seed", a.seed},
              {"options",
               {{"train_examples", a.options.train_examples},
                {"valid_examples", a.options.valid_examples},
                {"test_examples", a.options.test_examples},
                {"min_len", a.options.min_len},
                {"max_len", a.options.max_len},
                {"high_resource_volume", a.options.high_resource_volume}}},
              {"artifacts", {{"corpus", "corpus.json"}}}},
             fs::path(a.out) / "manifest.json");
  std::printf("task,direction,train,valid,test\n");
  for (const auto& t : corpus.tasks) {
    std::printf("%zu,%s,%zu,%zu,%zu\n", t.spec.id, tasks::to_string(t.spec.direction).c_str(), t.train.size(),
                t.valid.size(), t.test.size());
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  CorpusArgs corpus;
  std::string config;
  std::string out;
  std::string resume;
  std::string gating;
  std::string encoder_gating;
  double drop_prob = 0.5;
  double beta = 1.0;
  double lambda = 0.1;
  double K = 0.0;
  std::string prior;
  std::size_t anneal = 0;
  std::size_t inner_loop = 1;
  std::size_t steps = 1;
  std::uint64_t seed = 1;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::string norm;
  double lr = 1e-3;
  std::size_t warmup = 400;
  double posterior_lr_scale = 1.0;
  std::size_t batch_size = 16;
  double temperature = 1.0;
  double dropout = 0.0;
  std::size_t validate_every = 200;
  std::size_t checkpoint_every = 0;
  std::string eval_gates;
};

gate::PriorSpec parse_prior(const std::string& text) {
  if (text == "uniform") return gate::PriorSpec::uniform();
  if (text == "aggregate") return gate::PriorSpec::aggregated();
  if (text.rfind("beta:", 0) == 0) {
    double a = 0, b = 0;
    char tail = 0;
    if (std::sscanf(text.c_str() + 5, "%lf,%lf%c", &a, &b, &tail) != 2) {
      throw ContractViolation("--prior beta expects beta:a,b, got '" + text + "'");
    }
    return gate::PriorSpec::beta(a, b);
  }
  throw ContractViolation("--prior must be uniform, beta:a,b or aggregate, got '" + text + "'");
}

// defaults < config file < flags
train::TrainConfig resolve_config(const TrainArgs& a, const CLI::App& cmd, json* corpus_hint) {
  train::TrainConfig c;
  if (!a.config.empty()) {
    const auto j = read_json(a.config);
    c = train::train_config_from_json(j.contains("config") ? j.at("config") : j);
    if (j.contains("corpus") && corpus_hint) *corpus_hint = j.at("corpus");
  }
  auto given = [&](const char* name) { return cmd.get_option(name)->count() > 0; };
  auto& m = c.model;
  if (given("--gating")) {
    m.decoder_gating.kind = model::parse_gating_kind(a.gating);
    if (!given("--encoder-gating")) m.encoder_gating.kind = m.decoder_gating.kind;
  }
  if (given("--encoder-gating")) m.encoder_gating.kind = model::parse_gating_kind(a.encoder_gating);
  if (given("--drop-prob")) m.encoder_gating.drop_prob = m.decoder_gating.drop_prob = a.drop_prob;
  if (given("--encoder-layers")) m.encoder_layers = a.encoder_layers;
  if (given("--decoder-layers")) m.decoder_layers = a.decoder_layers;
  if (given("--model-dim")) m.model_dim = a.model_dim;
  if (given("--ffn-dim")) m.ffn_dim = a.ffn_dim;
  if (given("--heads")) m.heads = a.heads;
  if (given("--norm")) m.norm = model::parse_norm_mode(a.norm);
  if (given("--dropout")) m.dropout = a.dropout;
  if (given("--beta")) c.loss.beta = a.beta;
  if (given("--lambda")) c.loss.lambda = a.lambda;
  if (given("--K")) c.loss.target_depth = a.K;
  if (given("--prior")) c.loss.prior = parse_prior(a.prior);
  if (given("--anneal")) {
    c.loss.anneal = a.anneal == 0 ? loss::AnnealSchedule{} : loss::AnnealSchedule::linear(a.anneal);
  }
  if (given("--inner-loop")) c.inner_loop = a.inner_loop;
  if (given("--steps")) c.steps = a.steps;
  if (given("--seed")) c.seed = a.seed;
  if (given("--lr")) c.learning_rate = a.lr;
  if (given("--warmup")) c.warmup = a.warmup;
  if (given("--posterior-lr-scale")) c.posterior_lr_scale = a.posterior_lr_scale;
  if (given("--batch-size")) c.batch_size = a.batch_size;
  if (given("--temperature")) c.temperature = a.temperature;
  if (given("--validate-every")) c.validate_every = a.validate_every;
  if (given("--checkpoint-every")) c.checkpoint_every = a.checkpoint_every;
  if (given("--eval-gates")) c.eval_gates = train::parse_eval_gates(a.eval_gates);
  return c;
}

void report_last_losses(const train::TrainState& s) {
  std::fprintf(stderr, "last finite losses:\n");
  std::size_t shown = 0;
  for (auto it = s.metrics.rbegin(); it != s.metrics.rend() && shown < 8; ++it) {
    if (!std::isfinite(it->loss.total)) continue;
    std::fprintf(stderr, "  step %zu task %zu: nll %.6g kl %.6g depth %.6g total %.6g\n", it->step, it->task,
                 it->loss.nll, it->loss.kl, it->loss.depth_loss, it->loss.total);
    ++shown;
  }
  if (shown == 0) std::fprintf(stderr, "  none\n");
}

void print_validation(const train::TrainState& s) {
  if (s.validation.empty()) return;
  const auto step = s.validation.back().step;
  std::printf("step,task,nll,accuracy,effective_depth\n");
  for (const auto& v : s.validation) {
    if (v.step == step) std::printf("%zu,%zu,%.6f,%.4f,%.3f\n", v.step, v.task, v.nll, v.accuracy, v.effective_depth);
  }
}

int cmd_train(const TrainArgs& a, const CLI::App& cmd) {
  const fs::path run = a.out;
  json corpus_hint;
  std::optional<json> resume_ck;
  train::TrainConfig cfg;
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw UsageError("checkpoint not found: " + a.resume);
    resume_ck = read_json(a.resume);
    cfg = train::train_config_from_json(resume_ck->at("config"));
    const auto manifest = run / "manifest.json";
    if (fs::exists(manifest)) corpus_hint = read_json(manifest).value("corpus", json{});
  } else {
    cfg = resolve_config(a, cmd, &corpus_hint);
  }
  const auto flags = corpus_from_flags(a.corpus);
  const json source = flags ? *flags : corpus_hint;
  if (source.is_null() || source.empty()) throw UsageError("a corpus is required: pass --corpus DIR or --tasks PRESET");
  const auto corpus = load_corpus(source);
  if (!resume_ck) {
    cfg.model.vocab_size = corpus.vocab;
    cfg.validate();
  }

  fs::create_directories(run / "checkpoints");
  if (!resume_ck) {
    write_json({{"command", "train"},
                {"version", kVersion},
                {"seed", cfg.seed},
                {"config", train::to_json(cfg)},
                {"corpus", source},
                {"artifacts",
                 {{"metrics", "metrics.csv"},
                  {"validation", "validation.csv"},
                  {"utilization", "utilization.csv"},
                  {"history", "hist.bin"},
                  {"checkpoint", "checkpoints/final.json"}}}},
               run / "manifest.json");
  }

  std::optional<train::Trainer> trainer;
  if (resume_ck) {
    trainer.emplace(*resume_ck, corpus);
  } else {
    trainer.emplace(cfg, corpus);
  }
  try {
    trainer->train(run);
  } catch (const train::Diverged& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    report_last_losses(trainer->state());
    return kDiverged;
  }
  const auto& s = trainer->state();
  std::fprintf(stderr, "trained %zu outer steps (%zu updates, %zu skipped, %zu clipped) -> %s\n", s.outer_steps,
               s.theta_updates, s.skipped, s.clip_events, (run / "checkpoints" / "final.json").string().c_str());
  print_validation(s);
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  CorpusArgs corpus;
  std::string checkpoint;
  std::string gates = "soft";
  std::string split = "test";
  std::string out;
};

struct EvalRow {
  std::size_t task;
  double nll, accuracy, depth;
};

std::vector<EvalRow> evaluate_snapshot(const train::ModelSnapshot& s, const tasks::Corpus& corpus, tasks::Split split,
                                       train::EvalGates mode) {
  std::vector<EvalRow> rows;
  for (std::size_t n = 0; n < corpus.tasks.size(); ++n) {
    const auto eg = snapshot_gates(s, false, n, mode);
    const auto dg = snapshot_gates(s, true, n, mode);
    const auto& ex = tasks::examples(corpus.tasks[n], split);
    rows.push_back({n, train::split_nll(s.params, ex, eg, dg, 64),
                    tasks::token_accuracy(s.params, ex, eg, dg, 64).value(), snapshot_depth(s, n)});
  }
  return rows;
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream out;
  out << "task,nll,accuracy,effective_depth\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", r.task, r.nll, r.accuracy, r.depth);
    out << line;
  }
  return out.str();
}

std::optional<json> manifest_corpus_near(const fs::path& checkpoint) {
  for (auto dir = fs::absolute(checkpoint).parent_path(); !dir.empty(); dir = dir.parent_path()) {
    const auto m = dir / "manifest.json";
    if (fs::exists(m)) {
      const auto j = read_json(m);
      if (j.contains("corpus")) return j.at("corpus");
      return std::nullopt;
    }
    if (dir == dir.root_path()) break;
  }
  return std::nullopt;
}

tasks::Corpus corpus_for(const CorpusArgs& flags, const std::string& checkpoint) {
  if (auto f = corpus_from_flags(flags)) return load_corpus(*f);
  if (auto m = manifest_corpus_near(checkpoint)) return load_corpus(*m);
  throw UsageError("a corpus is required: pass --corpus DIR or --tasks PRESET");
}

int cmd_eval(const EvalArgs& a) {
  const auto snapshot = load_snapshot(a.checkpoint);
  const auto corpus = corpus_for(a.corpus, a.checkpoint);
  if (corpus.vocab != snapshot.params.config.vocab_size) {
    throw ContractViolation("corpus vocabulary " + std::to_string(corpus.vocab) + " does not match the model's " +
                            std::to_string(snapshot.params.config.vocab_size));
  }
  const auto rows = evaluate_snapshot(snapshot, corpus, tasks::parse_split(a.split), train::parse_eval_gates(a.gates));
  const auto text = eval_csv(rows);
  std::fputs(text.c_str(), stdout);
  if (!a.out.empty()) write_text(text, a.out);
  return kOk;
}

// ---------------------------------------------------------------------------
// prune

struct PruneArgs {
  CorpusArgs corpus;
  std::string checkpoint;
  double threshold = 0.5;
  std::optional<std::size_t> task;
  std::string out;
  std::string split = "test";
};

std::vector<std::size_t> kept_indices(const std::vector<bool>& keep) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < keep.size(); ++l) {
    if (keep[l]) out.push_back(l);
  }
  return out;
}

int cmd_prune(const PruneArgs& a) {
  const auto s = load_snapshot(a.checkpoint);
  const auto& cfg = s.params.config;
  const std::size_t N = s.decoder_posterior.num_tasks();
  if (a.task && *a.task >= N) throw ContractViolation("--task " + std::to_string(*a.task) + " out of range");

  auto masks = [&](bool decoder) {
    const std::size_t L = decoder ? cfg.decoder_layers : cfg.encoder_layers;
    const auto kind = decoder ? cfg.decoder_gating.kind : cfg.encoder_gating.kind;
    const auto& table = decoder ? s.decoder_posterior : s.encoder_posterior;
    std::vector<std::vector<bool>> per_task(N, std::vector<bool>(L, true));
    if (kind == model::Gating::Kind::Latent) {
      for (std::size_t n = 0; n < N; ++n) per_task[n] = gate::prune(table, n, a.threshold);
    }
    return per_task;
  };
  const auto enc_masks = masks(false);
  const auto dec_masks = masks(true);

  auto combined = [&](const std::vector<std::vector<bool>>& per_task, std::size_t L) {
    if (a.task) return per_task[*a.task];
    std::vector<bool> keep(L, false);
    for (const auto& m : per_task) {
      for (std::size_t l = 0; l < L; ++l) keep[l] = keep[l] || m[l];
    }
    return keep;
  };
  const auto enc_keep = kept_indices(combined(enc_masks, cfg.encoder_layers));
  const auto dec_keep = kept_indices(combined(dec_masks, cfg.decoder_layers));
  if (enc_keep.empty() && dec_keep.empty()) {
    std::fprintf(stderr, "warning: every layer was pruned; the result is an identity model\n");
  }

  train::ModelSnapshot pruned = s;
  pruned.params = s.params.with_layers(enc_keep, dec_keep);
  pruned.config.model = pruned.params.config;
  pruned.encoder_posterior = s.encoder_posterior.with_layers(enc_keep);
  pruned.decoder_posterior = s.decoder_posterior.with_layers(dec_keep);

  std::ostringstream report;
  report << "stack,task,layer,pi,keep\n";
  char line[256];
  for (bool decoder : {false, true}) {
    const auto& per_task = decoder ? dec_masks : enc_masks;
    const auto& table = decoder ? s.decoder_posterior : s.encoder_posterior;
    const bool latent = (decoder ? cfg.decoder_gating.kind : cfg.encoder_gating.kind) == model::Gating::Kind::Latent;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t l = 0; l < per_task[n].size(); ++l) {
        std::snprintf(line, sizeof line, "%s,%zu,%zu,%.9g,%d\n", decoder ? "decoder" : "encoder", n, l,
                      latent ? table.probability(n, l) : 1.0, per_task[n][l] ? 1 : 0);
        report << line;
      }
    }
  }

  const std::size_t before = s.params.scalar_count();
  const std::size_t after = pruned.params.scalar_count();
  std::printf("encoder layers: %zu -> %zu\n", std::size_t(cfg.encoder_layers), enc_keep.size());
  std::printf("decoder layers: %zu -> %zu\n", std::size_t(cfg.decoder_layers), dec_keep.size());
  std::printf("parameters: %zu -> %zu\n", before, after);
  for (std::size_t n = 0; n < N; ++n) {
    std::string mask;
    for (bool k : dec_masks[n]) mask += k ? '1' : '0';
    std::printf("task %zu decoder mask %s\n", n, mask.c_str());
  }

  json summary = {{"threshold", a.threshold},
                  {"task", a.task ? json(*a.task) : json(nullptr)},
                  {"encoder_keep", enc_keep},
                  {"decoder_keep", dec_keep},
                  {"parameters_before", before},
                  {"parameters_after", after}};

  std::optional<tasks::Corpus> corpus;
  if (auto f = corpus_from_flags(a.corpus)) {
    corpus = load_corpus(*f);
  } else if (auto m = manifest_corpus_near(a.checkpoint)) {
    corpus = load_corpus(*m);
  }
  if (corpus) {
    const auto split = tasks::parse_split(a.split);
    const auto soft = evaluate_snapshot(s, *corpus, split, train::EvalGates::Soft);
    const auto hard = evaluate_snapshot(pruned, *corpus, split, train::EvalGates::Hard);
    std::printf("task,soft_nll,pruned_nll,relative_change\n");
    json evals = json::array();
    for (std::size_t n = 0; n < soft.size(); ++n) {
      if (a.task && n != *a.task) continue;
      const double rel = (hard[n].nll - soft[n].nll) / soft[n].nll;
      std::printf("%zu,%.6f,%.6f,%.4f\n", n, soft[n].nll, hard[n].nll, rel);
      evals.push_back({{"task", n}, {"soft_nll", soft[n].nll}, {"pruned_nll", hard[n].nll}, {"relative_change", rel}});
    }
    summary["evaluation"] = evals;
  }

  if (!a.out.empty()) {
    const fs::path out = a.out;
    fs::create_directories(out);
    write_json(train::snapshot_to_json(pruned), out / "pruned.json");
    write_text(report.str(), out / "masks.csv");
    write_json(summary, out / "prune_report.json");
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck / probe

struct ToyArgs {
  std::string checkpoint;
  std::size_t layers = 4;
  std::optional<std::size_t> encoder_layers;
  std::optional<std::size_t> decoder_layers;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::size_t vocab = 32;
  std::string norm = "pre-norm";
  std::uint64_t seed = 1;
  std::size_t batch = 2;
  std::size_t max_len = 5;
};

void add_toy_flags(CLI::App* cmd, ToyArgs& a) {
  cmd->add_option("--checkpoint", a.checkpoint, "Model to audit (fresh initialization if omitted)");
  cmd->add_option("--layers", a.layers, "Layers per stack for a fresh model");
  cmd->add_option("--encoder-layers", a.encoder_layers, "Encoder layers (overrides --layers)");
  cmd->add_option("--decoder-layers", a.decoder_layers, "Decoder layers (overrides --layers)");
  cmd->add_option("--model-dim", a.model_dim, "Model width");
  cmd->add_option("--ffn-dim", a.ffn_dim, "Feed-forward width");
  cmd->add_option("--heads", a.heads, "Attention heads");
  cmd->add_option("--vocab", a.vocab, "Vocabulary size");
  cmd->add_option("--norm", a.norm, "pre-norm or none");
  cmd->add_option("--seed", a.seed, "Seed for initialization, batch and gate noise");
  cmd->add_option("--batch", a.batch, "Sequences in the micro-batch");
  cmd->add_option("--max-len", a.max_len, "Longest sequence in the micro-batch");
}

struct Toy {
  model::ModelParameters params;
  gate::PosteriorTable encoder_posterior;
  gate::PosteriorTable decoder_posterior;
  model::Batch batch;
};

Toy make_toy(const ToyArgs& a) {
  Toy t;
  if (!a.checkpoint.empty()) {
    auto s = load_snapshot(a.checkpoint);
    t.params = std::move(s.params);
    t.encoder_posterior = std::move(s.encoder_posterior);
    t.decoder_posterior = std::move(s.decoder_posterior);
  } else {
    model::StackConfig c;
    c.encoder_layers = a.encoder_layers.value_or(a.layers);
    c.decoder_layers = a.decoder_layers.value_or(a.layers);
    c.model_dim = a.model_dim;
    c.ffn_dim = a.ffn_dim;
    c.heads = a.heads;
    c.vocab_size = a.vocab;
    c.norm = model::parse_norm_mode(a.norm);
    c.encoder_gating = c.decoder_gating = model::Gating::latent();
    c.validate();
    t.params = model::ModelParameters::initialize(c, Rng::derive(a.seed, 1));
    Rng init(Rng::derive(a.seed, 2));
    t.encoder_posterior = gate::PosteriorTable(1, c.encoder_layers);
    t.decoder_posterior = gate::PosteriorTable(1, c.decoder_layers);
    for (auto* table : {&t.encoder_posterior, &t.decoder_posterior}) {
      for (std::size_t l = 0; l < table->num_layers(); ++l) {
        table->at(0, l) = {0.5 * init.normal(), 0.5 * init.normal()};
      }
    }
  }
  const std::size_t vocab = t.params.config.vocab_size;
  if (vocab < 5) throw ContractViolation("vocabulary too small for a micro-batch");
  if (a.batch == 0 || a.max_len == 0) throw ContractViolation("--batch and --max-len must be positive");
  Rng rng(Rng::derive(a.seed, 3));
  std::vector<std::vector<int>> src, tgt;
  for (std::size_t i = 0; i < a.batch; ++i) {
    for (auto* seq : {&src, &tgt}) {
      std::vector<int> s(1 + rng.below(a.max_len));
      for (auto& tok : s) tok = int(3 + rng.below(vocab - 3));
      seq->push_back(std::move(s));
    }
  }
  t.batch = model::make_batch(src, tgt);
  return t;
}

struct GradCheckArgs {
  ToyArgs toy;
  int precision = 64;
  double tolerance = 1e-4;
  double floor = 1e-7;
  double eps = 1e-5;
  std::size_t max_coordinates = 256;
  double temperature = 1.0;
  std::size_t task = 0;
  std::string out;
};

int cmd_gradcheck(const GradCheckArgs& a) {
  if (a.precision != 64) throw ContractViolation("gradient checks run at 64-bit precision only");
  const auto toy = make_toy(a.toy);
  const auto& cfg = toy.params.config;
  if (a.task >= std::max<std::size_t>(1, toy.decoder_posterior.num_tasks())) {
    throw ContractViolation("--task out of range");
  }
  Rng noise(Rng::derive(a.toy.seed, 4));
  const auto ne = gate::draw_gumbel_noise(cfg.encoder_layers, noise);
  const auto nd = gate::draw_gumbel_noise(cfg.decoder_layers, noise);
  diag::GradCheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.abs_floor = a.floor;
  opt.eps = a.eps;
  opt.max_coordinates = a.max_coordinates;
  opt.sample_seed = Rng::derive(a.toy.seed, 5);
  const auto report = diag::grad_check_latent(toy.params, toy.batch, toy.encoder_posterior.task_logits(a.task),
                                              toy.decoder_posterior.task_logits(a.task), ne, nd, a.temperature, opt);
  std::fputs(report.text().c_str(), stdout);
  if (!a.out.empty()) write_text(report.csv(), a.out);
  return report.passed() ? kOk : kGradCheck;
}

struct ProbeArgs {
  ToyArgs toy;
  std::string gates = "all";
  double temperature = 1.0;
  std::string out;
};

int cmd_probe(const ProbeArgs& a) {
  const auto toy = make_toy(a.toy);
  const auto& cfg = toy.params.config;
  auto all = diag::standard_assignments(cfg.encoder_layers, cfg.decoder_layers, Rng::derive(a.toy.seed, 6),
                                        a.temperature);
  std::vector<diag::GateAssignment> chosen;
  const std::string want = a.gates == "ones" ? "all-ones" : a.gates == "zeros" ? "all-zeros" : "sampled-soft";
  for (auto& g : all) {
    if (a.gates == "all" || g.name == want) chosen.push_back(g);
  }
  const auto csv = diag::probe_csv(diag::gradient_scaling_probe(toy.params, toy.batch, chosen));
  std::fputs(csv.c_str(), stdout);
  if (!a.out.empty()) write_text(csv, a.out);
  return kOk;
}

// ---------------------------------------------------------------------------
// export

int cmd_export(const std::string& history, const std::string& out) {
  if (!fs::exists(history)) throw UsageError("history not found: " + history);
  const auto records = diag::read_history(history);
  if (records.empty()) throw ContractViolation("history " + history + " is empty");
  diag::export_history(records, out);
  std::fprintf(stderr, "wrote %zu records to %s\n", records.size(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformers with latent layer depth"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Write a synthetic multi-task corpus");
  gen_cmd->add_option("--tasks", gen.preset, "Benchmark preset")->required()->check(CLI::IsMember(tasks::preset_names()));
  gen_cmd->add_option("--vocab", gen.vocab, "Vocabulary size (>= 16)");
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--train-examples", gen.options.train_examples, "Training examples per task");
  gen_cmd->add_option("--valid-examples", gen.options.valid_examples, "Validation examples per task");
  gen_cmd->add_option("--test-examples", gen.options.test_examples, "Test examples per task");
  gen_cmd->add_option("--min-len", gen.options.min_len, "Shortest canonical sequence");
  gen_cmd->add_option("--max-len", gen.options.max_len, "Longest canonical sequence");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_corpus_flags(train_cmd, tr.corpus, true);
  train_cmd->add_option("--config", tr.config, "JSON config or a run manifest");
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint");
  train_cmd->add_option("--gating", tr.gating, "static, layerdrop or latent")
      ->check(CLI::IsMember({"static", "layerdrop", "latent"}));
  train_cmd->add_option("--encoder-gating", tr.encoder_gating, "Encoder gating if different from --gating")
      ->check(CLI::IsMember({"static", "layerdrop", "latent"}));
  train_cmd->add_option("--drop-prob", tr.drop_prob, "LayerDrop probability");
  train_cmd->add_option("--beta", tr.beta, "KL coefficient");
  train_cmd->add_option("--lambda", tr.lambda, "Target-depth coefficient");
  train_cmd->add_option("--K", tr.K, "Target depth");
  train_cmd->add_option("--prior", tr.prior, "uniform, beta:a,b or aggregate");
  train_cmd->add_option("--anneal", tr.anneal, "Linear KL warmup in inner iterations (0 disables)");
  train_cmd->add_option("--inner-loop", tr.inner_loop, "Inner iterations per posterior update");
  train_cmd->add_option("--steps", tr.steps, "Outer steps");
  train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_option("--encoder-layers", tr.encoder_layers, "Encoder layers");
  train_cmd->add_option("--decoder-layers", tr.decoder_layers, "Decoder layers");
  train_cmd->add_option("--model-dim", tr.model_dim, "Model width");
  train_cmd->add_option("--ffn-dim", tr.ffn_dim, "Feed-forward width");
  train_cmd->add_option("--heads", tr.heads, "Attention heads");
  train_cmd->add_option("--norm", tr.norm, "pre-norm or none");
  train_cmd->add_option("--dropout", tr.dropout, "Dropout probability");
  train_cmd->add_option("--lr", tr.lr, "Peak learning rate");
  train_cmd->add_option("--warmup", tr.warmup, "Learning-rate warmup updates");
  train_cmd->add_option("--posterior-lr-scale", tr.posterior_lr_scale, "Learning-rate multiplier for posterior logits");
  train_cmd->add_option("--batch-size", tr.batch_size, "Examples per task per batch");
  train_cmd->add_option("--temperature", tr.temperature, "Gumbel-Softmax temperature");
  train_cmd->add_option("--validate-every", tr.validate_every, "Outer steps between validations");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Outer steps between checkpoints");
  train_cmd->add_option("--eval-gates", tr.eval_gates, "soft or hard gates for validation");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Per-task NLL, token accuracy and effective depth");
  add_corpus_flags(eval_cmd, ev.corpus, true);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint or model file");
  eval_cmd->add_option("--gates", ev.gates, "soft or hard")->check(CLI::IsMember({"soft", "hard"}));
  eval_cmd->add_option("--split", ev.split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  eval_cmd->add_option("--out", ev.out, "Also write the report to this CSV file");

  PruneArgs pr;
  auto* prune_cmd = app.add_subcommand("prune", "Remove layers with low selection probability");
  add_corpus_flags(prune_cmd, pr.corpus, true);
  prune_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint or model file");
  prune_cmd->add_option("--threshold", pr.threshold, "Keep layers with pi >= threshold");
  prune_cmd->add_option("--task", pr.task, "Prune for one task only");
  prune_cmd->add_option("--split", pr.split, "Split used for the fidelity report")
      ->check(CLI::IsMember({"train", "valid", "test"}));
  prune_cmd->add_option("--out", pr.out, "Directory for pruned.json, masks.csv and prune_report.json");

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare autodiff against finite differences");
  add_toy_flags(gc_cmd, gc.toy);
  gc_cmd->add_option("--precision", gc.precision, "Floating-point precision in bits");
  gc_cmd->add_option("--tolerance", gc.tolerance, "Relative tolerance");
  gc_cmd->add_option("--floor", gc.floor, "Absolute floor for near-zero gradients");
  gc_cmd->add_option("--eps", gc.eps, "Finite-difference step");
  gc_cmd->add_option("--max-coordinates", gc.max_coordinates, "Sampled coordinates per group");
  gc_cmd->add_option("--temperature", gc.temperature, "Gumbel-Softmax temperature");
  gc_cmd->add_option("--task", gc.task, "Posterior row of a checkpoint");
  gc_cmd->add_option("--out", gc.out, "Write the report as CSV");

  ProbeArgs pb;
  auto* probe_cmd = app.add_subcommand("probe", "Activation-gradient norms per layer under gate assignments");
  add_toy_flags(probe_cmd, pb.toy);
  probe_cmd->add_option("--gates", pb.gates, "ones, zeros, soft or all")
      ->check(CLI::IsMember({"ones", "zeros", "soft", "all"}));
  probe_cmd->add_option("--temperature", pb.temperature, "Temperature of the sampled-soft assignment");
  probe_cmd->add_option("--out", pb.out, "Also write the table to this CSV file");

  std::string history, export_out;
  auto* export_cmd = app.add_subcommand("export", "Convert a utilization history to CSV");
  export_cmd->add_option("--history", history, "hist.bin from a run directory")->required();
  export_cmd->add_option("--out", export_out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_corpus(gen);
    if (*train_cmd) return cmd_train(tr, *train_cmd);
    if (*eval_cmd) return cmd_eval(ev);
    if (*prune_cmd) return cmd_prune(pr);
    if (*gc_cmd) return cmd_gradcheck(gc);
    if (*probe_cmd) return cmd_probe(pb);
    if (*export_cmd) return cmd_export(history, export_out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "invalid: %s\n", e.what());
    return kUsage;
  } catch (const train::Diverged& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
