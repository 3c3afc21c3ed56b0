// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace latent_depth::model {

std::string to_string(NormMode mode) { return mode == NormMode::PreNorm ? "pre-norm" : "no-norm"; }

std::string to_string(Gating::Kind kind) {
  switch (kind) {
    case Gating::Kind::Static: return "static";
    case Gating::Kind::LayerDrop: return "layerdrop";
    case Gating::Kind::Latent: return "latent";
  }
  return "static";
}

NormMode parse_norm_mode(const std::string& text) {
  if (text == "pre-norm" || text == "prenorm" || text == "pre") return NormMode::PreNorm;
  if (text == "no-norm" || text == "none") return NormMode::NoNorm;
  throw ContractViolation("unknown norm mode '" + text + "' (expected pre-norm or none)");
}

Gating::Kind parse_gating_kind(const std::string& text) {
  if (text == "static") return Gating::Kind::Static;
  if (text == "layerdrop") return Gating::Kind::LayerDrop;
  if (text == "latent") return Gating::Kind::Latent;
  throw ContractViolation("unknown gating mode '" + text + "' (expected static, layerdrop or latent)");
}

void StackConfig::validate() const {
  if (encoder_layers == 0 || decoder_layers == 0) throw ContractViolation("layer counts must be positive");
  if (model_dim == 0 || ffn_dim == 0 || heads == 0) throw ContractViolation("model dimensions must be positive");
  if (model_dim % heads != 0) {
    throw ContractViolation("model_dim " + std::to_string(model_dim) + " is not divisible by heads " +
                            std::to_string(heads));
  }
  if (vocab_size < 4) throw ContractViolation("vocabulary must hold the special tokens");
  for (const Gating* g : {&encoder_gating, &decoder_gating}) {
    if (g->kind == Gating::Kind::LayerDrop && !(g->drop_prob >= 0.0 && g->drop_prob < 1.0)) {
      throw ContractViolation("layerdrop probability must lie in [0, 1)");
    }
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractViolation("dropout must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(ModelParameters& p) : p_(p) {}

  std::size_t add(std::string name, Shape shape) {
    p_.names.push_back(std::move(name));
    p_.tensors.emplace_back(std::move(shape));
    return p_.tensors.size() - 1;
  }

  NormParams norm(const std::string& prefix) {
    const std::size_t d = p_.config.model_dim;
    return {add(prefix + ".gamma", {d}), add(prefix + ".beta", {d})};
  }

  AttentionParams attention(const std::string& prefix) {
    const std::size_t d = p_.config.model_dim;
    AttentionParams a;
    a.wq = add(prefix + ".wq", {d, d});
    a.bq = add(prefix + ".bq", {d});
    a.wk = add(prefix + ".wk", {d, d});
    a.bk = add(prefix + ".bk", {d});
    a.wv = add(prefix + ".wv", {d, d});
    a.bv = add(prefix + ".bv", {d});
    a.wo = add(prefix + ".wo", {d, d});
    a.bo = add(prefix + ".bo", {d});
    return a;
  }

  LayerParams layer(const std::string& prefix, bool decoder) {
    const bool normed = p_.config.norm == NormMode::PreNorm;
    const std::size_t first = p_.tensors.size();
    LayerParams l;
    if (normed) l.self_norm = norm(prefix + ".self_norm");
    l.self_attn = attention(prefix + ".self_attn");
    if (decoder) {
      if (normed) l.cross_norm = norm(prefix + ".cross_norm");
      l.cross_attn = attention(prefix + ".cross_attn");
    }
    if (normed) l.ffn_norm = norm(prefix + ".ffn_norm");
    const std::size_t d = p_.config.model_dim;
    const std::size_t f = p_.config.ffn_dim;
    l.ffn.w1 = add(prefix + ".ffn.w1", {d, f});
    l.ffn.b1 = add(prefix + ".ffn.b1", {f});
    l.ffn.w2 = add(prefix + ".ffn.w2", {f, d});
    l.ffn.b2 = add(prefix + ".ffn.b2", {d});
    for (std::size_t i = first; i < p_.tensors.size(); ++i) l.all.push_back(i);
    return l;
  }

 private:
  ModelParameters& p_;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ModelParameters ModelParameters::layout(const StackConfig& config) {
  // pruned models may carry empty stacks; everything else must be valid
  StackConfig check = config;
  check.encoder_layers = std::max<std::size_t>(1, check.encoder_layers);
  check.decoder_layers = std::max<std::size_t>(1, check.decoder_layers);
  check.validate();
  ModelParameters p;
  p.config = config;
  LayoutBuilder b(p);
  const std::size_t d = config.model_dim;
  p.embedding = b.add("embedding", {config.vocab_size, d});
  for (std::size_t l = 0; l < config.encoder_layers; ++l) p.encoder.push_back(b.layer("encoder." + std::to_string(l), false));
  if (config.norm == NormMode::PreNorm) p.encoder_final_norm = b.norm("encoder.final_norm");
  for (std::size_t l = 0; l < config.decoder_layers; ++l) p.decoder.push_back(b.layer("decoder." + std::to_string(l), true));
  if (config.norm == NormMode::PreNorm) p.decoder_final_norm = b.norm("decoder.final_norm");
  p.output_w = b.add("output.w", {d, config.vocab_size});
  p.output_b = b.add("output.b", {config.vocab_size});
  return p;
}

ModelParameters ModelParameters::initialize(const StackConfig& config, std::uint64_t seed) {
  ModelParameters p = layout(config);
  Rng rng(seed);
  const double d = double(config.model_dim);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    Tensor& t = p.tensors[i];
    const std::string& name = p.names[i];
    if (i == p.embedding) {
      const double sd = 1.0 / std::sqrt(d);
      for (auto& v : t.values()) v = sd * rng.normal();
    } else if (ends_with(name, ".gamma")) {
      t.fill(1.0);
    } else if (t.rank() == 2) {
      double limit = std::sqrt(6.0 / double(t.dim(0) + t.dim(1)));
      // residual branch outputs shrink with the number of branches in the stack
      if (ends_with(name, ".wo") || ends_with(name, ".ffn.w2")) {
        const bool decoder = name.rfind("decoder.", 0) == 0;
        const double branches = decoder ? 3.0 * double(config.decoder_layers) : 2.0 * double(config.encoder_layers);
        limit /= std::sqrt(branches);
      }
      for (auto& v : t.values()) v = limit * (2.0 * rng.uniform() - 1.0);
    }
  }
  return p;
}

std::size_t ModelParameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

std::size_t ModelParameters::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ContractViolation("no parameter named '" + name + "'");
  return std::size_t(it - names.begin());
}

ModelParameters ModelParameters::with_layers(const std::vector<std::size_t>& encoder_keep,
                                             const std::vector<std::size_t>& decoder_keep) const {
  StackConfig cfg = config;
  cfg.encoder_layers = encoder_keep.size();
  cfg.decoder_layers = decoder_keep.size();
  auto check = [](const std::vector<std::size_t>& keep, std::size_t n) {
    for (auto l : keep) {
      if (l >= n) throw ContractViolation("kept layer " + std::to_string(l) + " does not exist");
    }
  };
  check(encoder_keep, config.encoder_layers);
  check(decoder_keep, config.decoder_layers);
  ModelParameters out = layout(cfg);

  std::unordered_map<std::string, std::size_t> source;
  for (std::size_t i = 0; i < names.size(); ++i) source.emplace(names[i], i);
  auto rename = [&](const std::string& name) -> std::string {
    for (auto [stack, keep] : {std::pair{std::string("encoder."), &encoder_keep}, {std::string("decoder."), &decoder_keep}}) {
      if (name.rfind(stack, 0) != 0) continue;
      const auto rest = name.substr(stack.size());
      const auto dot = rest.find('.');
      const auto head = rest.substr(0, dot);
      if (head.empty() || !std::all_of(head.begin(), head.end(), ::isdigit)) return name;
      const std::size_t j = std::stoul(head);
      return stack + std::to_string((*keep)[j]) + rest.substr(dot);
    }
    return name;
  };
  for (std::size_t i = 0; i < out.names.size(); ++i) {
    const auto from = rename(out.names[i]);
    out.tensors[i] = tensors.at(source.at(from));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

std::size_t Batch::target_tokens() const {
  return std::size_t(std::count_if(target_out.begin(), target_out.end(), [](int t) { return t != kPadId; }));
}

Batch make_batch(const std::vector<std::vector<int>>& sources, const std::vector<std::vector<int>>& targets) {
  if (sources.empty() || sources.size() != targets.size()) {
    throw ContractViolation("batch needs matching, nonempty source and target lists");
  }
  Batch b;
  b.size = sources.size();
  for (std::size_t i = 0; i < b.size; ++i) {
    if (sources[i].empty()) throw ContractViolation("empty source sequence");
    b.source_len = std::max(b.source_len, sources[i].size());
    b.target_len = std::max(b.target_len, targets[i].size() + 1);
  }
  b.source.assign(b.size * b.source_len, kPadId);
  b.target_in.assign(b.size * b.target_len, kPadId);
  b.target_out.assign(b.size * b.target_len, kPadId);
  for (std::size_t i = 0; i < b.size; ++i) {
    std::copy(sources[i].begin(), sources[i].end(), b.source.begin() + std::ptrdiff_t(i * b.source_len));
    int* in = b.target_in.data() + i * b.target_len;
    int* out = b.target_out.data() + i * b.target_len;
    in[0] = kBosId;
    for (std::size_t t = 0; t < targets[i].size(); ++t) {
      in[t + 1] = targets[i][t];
      out[t] = targets[i][t];
    }
    out[targets[i].size()] = kEosId;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Forward pass

BoundParameters bind(ad::Graph& g, const ModelParameters& params, bool requires_grad) {
  BoundParameters b;
  b.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) b.vars.push_back(g.leaf(t, requires_grad));
  return b;
}

std::vector<ad::Var> constant_gates(ad::Graph& g, const std::vector<double>& values) {
  std::vector<ad::Var> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(g.constant(Tensor::scalar(v)));
  return out;
}

std::vector<ad::Var> split_gates(ad::Graph& g, ad::Var gates, std::size_t layers) {
  if (g.value(gates).size() != layers) throw ContractViolation("gate vector length does not match layer count");
  auto row = g.reshape(gates, {1, layers});
  std::vector<ad::Var> out;
  out.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) out.push_back(g.select(row, l));
  return out;
}

namespace {

std::shared_ptr<const ad::AttentionMask> make_mask(std::size_t batch, std::size_t queries, std::size_t keys,
                                                   const std::vector<int>& key_tokens, bool causal) {
  auto m = std::make_shared<ad::AttentionMask>();
  m->batch = batch;
  m->queries = queries;
  m->keys = keys;
  m->allow.assign(batch * queries * keys, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < queries; ++q) {
      for (std::size_t k = 0; k < keys; ++k) {
        const bool visible = key_tokens[b * keys + k] != kPadId && (!causal || k <= q);
        m->allow[(b * queries + q) * keys + k] = visible ? 1 : 0;
      }
    }
  }
  return m;
}

Tensor positional_encoding(std::size_t batch, std::size_t len, std::size_t d) {
  Tensor pe({batch, len, d});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -double(2 * (i / 2)) / double(d));
      const double v = (i % 2 == 0) ? std::sin(double(t) * rate) : std::cos(double(t) * rate);
      for (std::size_t b = 0; b < batch; ++b) pe[(b * len + t) * d + i] = v;
    }
  }
  return pe;
}

ad::Var embed(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound,
              const std::vector<int>& tokens, std::size_t batch, std::size_t len) {
  const std::size_t d = params.config.model_dim;
  auto e = g.embedding(bound[params.embedding], tokens, {batch, len});
  auto scaled = g.scale(e, std::sqrt(double(d)));
  return g.add(scaled, g.constant(positional_encoding(batch, len, d)));
}

ad::Var normalize(ad::Graph& g, const BoundParameters& bound, const std::optional<NormParams>& norm, ad::Var x) {
  if (!norm) return x;
  return g.layer_norm(x, bound[norm->gamma], bound[norm->beta]);
}

ad::Var attention(ad::Graph& g, const BoundParameters& bound, const AttentionParams& a, ad::Var queries,
                  ad::Var keys_values, std::size_t heads, const std::shared_ptr<const ad::AttentionMask>& mask) {
  auto q = g.linear(queries, bound[a.wq], bound[a.bq]);
  auto k = g.linear(keys_values, bound[a.wk], bound[a.bk]);
  auto v = g.linear(keys_values, bound[a.wv], bound[a.bv]);
  auto probs = g.masked_softmax(g.attention_scores(q, k, heads), mask);
  return g.linear(g.attention_context(probs, v), bound[a.wo], bound[a.bo]);
}

ad::Var maybe_dropout(ad::Graph& g, ad::Var x, DropoutContext dropout) {
  if (!dropout.rng || dropout.rate <= 0.0) return x;
  std::vector<std::uint8_t> keep(g.value(x).size());
  for (auto& k : keep) k = dropout.rng->bernoulli(1.0 - dropout.rate) ? 1 : 0;
  return g.dropout(x, std::move(keep), dropout.rate);
}

}  // namespace

ad::Var gated_layer_forward(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound,
                            const LayerParams& layer, ad::Var x, ad::Var gate,
                            std::shared_ptr<const ad::AttentionMask> self_mask, std::optional<ad::Var> memory,
                            std::shared_ptr<const ad::AttentionMask> cross_mask, DropoutContext dropout) {
  const std::size_t heads = params.config.heads;
  auto h = x;
  {
    auto n = normalize(g, bound, layer.self_norm, h);
    auto f = maybe_dropout(g, attention(g, bound, layer.self_attn, n, n, heads, self_mask), dropout);
    h = g.gated_residual(h, f, gate);
  }
  if (layer.cross_attn) {
    if (!memory || !cross_mask) throw ContractViolation("decoder layer needs encoder memory and a cross mask");
    auto n = normalize(g, bound, layer.cross_norm, h);
    auto f = maybe_dropout(g, attention(g, bound, *layer.cross_attn, n, *memory, heads, cross_mask), dropout);
    h = g.gated_residual(h, f, gate);
  }
  {
    auto n = normalize(g, bound, layer.ffn_norm, h);
    auto hidden = g.relu(g.linear(n, bound[layer.ffn.w1], bound[layer.ffn.b1]));
    auto f = maybe_dropout(g, g.linear(hidden, bound[layer.ffn.w2], bound[layer.ffn.b2]), dropout);
    h = g.gated_residual(h, f, gate);
  }
  return h;
}

ad::Var encode(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound, const Batch& batch,
               const std::vector<ad::Var>& gates, StackTrace* trace, DropoutContext dropout) {
  if (gates.size() != params.encoder.size()) {
    throw ContractViolation("encoder gates: " + std::to_string(gates.size()) + " for " +
                            std::to_string(params.encoder.size()) + " layers");
  }
  auto mask = make_mask(batch.size, batch.source_len, batch.source_len, batch.source, false);
  auto h = maybe_dropout(g, embed(g, params, bound, batch.source, batch.size, batch.source_len), dropout);
  if (trace) trace->states = {h};
  for (std::size_t l = 0; l < params.encoder.size(); ++l) {
    h = gated_layer_forward(g, params, bound, params.encoder[l], h, gates[l], mask, std::nullopt, nullptr, dropout);
    if (trace) trace->states.push_back(h);
  }
  return normalize(g, bound, params.encoder_final_norm, h);
}

ad::Var decode(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound, const Batch& batch,
               ad::Var memory, const std::vector<ad::Var>& gates, StackTrace* trace, DropoutContext dropout) {
  if (gates.size() != params.decoder.size()) {
    throw ContractViolation("decoder gates: " + std::to_string(gates.size()) + " for " +
                            std::to_string(params.decoder.size()) + " layers");
  }
  auto self_mask = make_mask(batch.size, batch.target_len, batch.target_len, batch.target_in, true);
  auto cross_mask = make_mask(batch.size, batch.target_len, batch.source_len, batch.source, false);
  auto h = maybe_dropout(g, embed(g, params, bound, batch.target_in, batch.size, batch.target_len), dropout);
  if (trace) trace->states = {h};
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    h = gated_layer_forward(g, params, bound, params.decoder[l], h, gates[l], self_mask, memory, cross_mask, dropout);
    if (trace) trace->states.push_back(h);
  }
  h = normalize(g, bound, params.decoder_final_norm, h);
  auto logits = g.linear(h, bound[params.output_w], bound[params.output_b]);
  return g.reshape(logits, {batch.size * batch.target_len, params.config.vocab_size});
}

ForwardResult forward_seq2seq(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound,
                              const Batch& batch, const std::vector<ad::Var>& encoder_gates,
                              const std::vector<ad::Var>& decoder_gates, DropoutContext dropout) {
  ForwardResult r;
  r.memory = encode(g, params, bound, batch, encoder_gates, &r.encoder, dropout);
  r.logits = decode(g, params, bound, batch, r.memory, decoder_gates, &r.decoder, dropout);
  return r;
}

ad::Var sequence_nll(ad::Graph& g, ad::Var logits, const std::vector<int>& targets, int pad_id) {
  return g.cross_entropy(logits, targets, pad_id);
}

std::vector<double> fixed_gate_values(const Gating& gating, std::size_t layers, bool training, Rng* rng) {
  std::vector<double> z(layers, 1.0);
  switch (gating.kind) {
    case Gating::Kind::Static: break;
    case Gating::Kind::LayerDrop:
      if (training) {
        if (!rng) throw ContractViolation("layerdrop training gates need a random stream");
        for (auto& v : z) v = rng->bernoulli(1.0 - gating.drop_prob) ? 1.0 : 0.0;
      }
      break;
    case Gating::Kind::Latent: throw ContractViolation("latent gates come from the posterior, not a fixed rule");
  }
  return z;
}

std::vector<int> greedy_decode(const ModelParameters& params, const Batch& batch,
                               const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates) {
  ad::Graph eg;
  auto ebound = bind(eg, params, false);
  const Tensor memory = eg.value(encode(eg, params, ebound, batch, constant_gates(eg, encoder_gates)));

  const std::size_t V = params.config.vocab_size;
  std::vector<int> out(batch.size * batch.target_len, kPadId);
  Batch step = batch;
  for (std::size_t t = 0; t < batch.target_len; ++t) {
    step.target_len = t + 1;
    step.target_in.assign(batch.size * (t + 1), kPadId);
    for (std::size_t b = 0; b < batch.size; ++b) {
      step.target_in[b * (t + 1)] = kBosId;
      for (std::size_t s = 0; s < t; ++s) step.target_in[b * (t + 1) + s + 1] = out[b * batch.target_len + s];
    }
    ad::Graph g;
    auto bound = bind(g, params, false);
    auto logits = decode(g, params, bound, step, g.constant(memory), constant_gates(g, decoder_gates));
    const Tensor& l = g.value(logits);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const double* row = l.data() + (b * (t + 1) + t) * V;
      int best = kEosId;
      for (std::size_t v = kEosId; v < V; ++v) {
        if (row[v] > row[best]) best = int(v);
      }
      out[b * batch.target_len + t] = best;
    }
  }
  return out;
}

LayerGradientNorms layer_gradient_norms(const ModelParameters& params, const Batch& batch,
                                        const std::vector<double>& encoder_gates,
                                        const std::vector<double>& decoder_gates) {
  ad::Graph g;
  auto bound = bind(g, params, true);
  auto enc = constant_gates(g, encoder_gates);
  auto dec = constant_gates(g, decoder_gates);
  auto fwd = forward_seq2seq(g, params, bound, batch, enc, dec);
  auto loss = sequence_nll(g, fwd.logits, batch.target_out);
  auto grads = g.backward(loss);

  LayerGradientNorms out;
  out.loss = g.value(loss).item();
  auto param_norms = [&](const std::vector<LayerParams>& layers) {
    std::vector<double> norms;
    for (const auto& layer : layers) {
      double sq = 0.0;
      for (auto i : layer.all) sq += grads.of(bound[i]).squared_norm();
      norms.push_back(std::sqrt(sq));
    }
    return norms;
  };
  auto state_norms = [&](const StackTrace& trace) {
    std::vector<double> norms;
    for (auto v : trace.states) norms.push_back(std::sqrt(grads.of(v).squared_norm()));
    return norms;
  };
  out.encoder_params = param_norms(params.encoder);
  out.decoder_params = param_norms(params.decoder);
  out.encoder_states = state_norms(fwd.encoder);
  out.decoder_states = state_norms(fwd.decoder);
  return out;
}

}  // namespace latent_depth::model
