// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "latent_depth/losses.hpp"

namespace latent_depth::diag {

namespace {

struct Group {
  std::string name;
  ad::Var var;
};

// Sampled coordinates of each group, compared against central differences
// obtained by perturbing the leaf and replaying the graph.
std::vector<GroupCheck> check_groups(ad::Graph& g, ad::Var loss, const std::vector<Group>& groups,
                                     const GradCheckOptions& opt) {
  const auto grads = g.backward(loss);
  Rng sampler(opt.sample_seed);
  std::vector<GroupCheck> out;
  for (const auto& group : groups) {
    GroupCheck c;
    c.name = group.name;
    const Tensor analytic = grads.of(group.var);
    Tensor x = g.value(group.var);
    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.max_coordinates) {
      for (std::size_t i = 0; i < opt.max_coordinates; ++i) {
        std::swap(coords[i], coords[i + sampler.below(coords.size() - i)]);
      }
      coords.resize(opt.max_coordinates);
      std::sort(coords.begin(), coords.end());
    }
    c.passed = true;
    std::vector<double> numeric(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const auto k = coords[i];
      const double original = x[k];
      x[k] = original + opt.eps;
      g.set_leaf(group.var, x);
      g.replay();
      const double up = g.value(loss).item();
      x[k] = original - opt.eps;
      g.set_leaf(group.var, x);
      g.replay();
      const double down = g.value(loss).item();
      x[k] = original;
      g.set_leaf(group.var, x);
      ++c.checked;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        c.passed = false;
        c.failure = "non-finite loss when perturbing " + group.name + "[" + std::to_string(k) + "]";
        c.worst_index = k;
        break;
      }
      numeric[i] = (up - down) / (2.0 * opt.eps);
      c.scale = std::max(c.scale, std::fabs(analytic[k]));
    }
    c.scale = std::max(c.scale, opt.abs_floor);
    for (std::size_t i = 0; i < c.checked && c.failure.empty(); ++i) {
      const auto k = coords[i];
      const double a = analytic[k];
      const double n = numeric[i];
      const double abs_err = std::fabs(a - n);
      const bool near_zero = std::fabs(a) <= opt.abs_floor && std::fabs(n) <= opt.abs_floor;
      const double rel = near_zero ? 0.0 : abs_err / std::max(std::fabs(a), std::fabs(n));
      if (rel > c.max_rel_error) {
        c.max_rel_error = rel;
        c.worst_index = k;
      }
      c.max_abs_error = std::max(c.max_abs_error, abs_err);
      const bool ok = rel <= opt.tolerance || near_zero || abs_err <= opt.tolerance * c.scale;
      if (!ok) c.passed = false;
    }
    g.replay();
    out.push_back(std::move(c));
  }
  return out;
}

ad::Var gates_leaf(ad::Graph& g, const std::vector<double>& values) {
  return g.leaf(Tensor({std::max<std::size_t>(values.size(), 1)}, values.empty() ? std::vector<double>{0.0} : values));
}

std::vector<ad::Var> split_or_empty(ad::Graph& g, ad::Var v, std::size_t layers) {
  if (layers == 0) return {};
  return model::split_gates(g, v, layers);
}

}  // namespace

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupCheck& c) { return c.passed; });
}

std::string GradCheckReport::text() const {
  std::ostringstream out;
  std::size_t failed = 0;
  for (const auto& c : groups) {
    if (!c.passed) ++failed;
    char line[512];
    std::snprintf(line, sizeof line, "%-36s %s  max_rel=%.3e  max_abs=%.3e  scale=%.3e  worst=%zu  checked=%zu%s%s\n",
                  c.name.c_str(), c.passed ? "ok  " : "FAIL", c.max_rel_error, c.max_abs_error, c.scale, c.worst_index,
                  c.checked, c.failure.empty() ? "" : "  ", c.failure.c_str());
    out << line;
  }
  out << (failed == 0 ? "PASS" : "FAIL") << ": " << groups.size() - failed << "/" << groups.size()
      << " groups within tolerance " << tolerance << " (absolute floor " << abs_floor << ")\n";
  return out.str();
}

std::string GradCheckReport::csv() const {
  std::ostringstream out;
  out << "group,passed,max_rel_error,max_abs_error,scale,worst_index,checked\n";
  for (const auto& c : groups) {
    char line[512];
    std::snprintf(line, sizeof line, "%s,%d,%.9g,%.9g,%.9g,%zu,%zu\n", c.name.c_str(), c.passed ? 1 : 0,
                  c.max_rel_error, c.max_abs_error, c.scale, c.worst_index, c.checked);
    out << line;
  }
  return out.str();
}

namespace {

std::vector<GroupCheck> free_gate_checks(const model::ModelParameters& params, const model::Batch& batch,
                                         const std::vector<double>& encoder_gates,
                                         const std::vector<double>& decoder_gates, const GradCheckOptions& options,
                                         bool with_params) {
  ad::Graph g;
  const auto bound = model::bind(g, params, with_params);
  auto ze = gates_leaf(g, encoder_gates);
  auto zd = gates_leaf(g, decoder_gates);
  const auto fwd = model::forward_seq2seq(g, params, bound, batch, split_or_empty(g, ze, encoder_gates.size()),
                                          split_or_empty(g, zd, decoder_gates.size()));
  const auto loss = model::sequence_nll(g, fwd.logits, batch.target_out);

  std::vector<Group> groups;
  if (with_params) {
    for (std::size_t i = 0; i < params.tensors.size(); ++i) groups.push_back({params.names[i], bound[i]});
  }
  if (!encoder_gates.empty()) groups.push_back({"encoder.gates", ze});
  if (!decoder_gates.empty()) groups.push_back({"decoder.gates", zd});
  return check_groups(g, loss, groups, options);
}

}  // namespace

GradCheckReport grad_check(const model::ModelParameters& params, const model::Batch& batch,
                           const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates,
                           const GradCheckOptions& options) {
  GradCheckReport r;
  r.tolerance = options.tolerance;
  r.abs_floor = options.abs_floor;
  r.groups = free_gate_checks(params, batch, encoder_gates, decoder_gates, options, true);
  return r;
}

GradCheckReport grad_check_latent(const model::ModelParameters& params, const model::Batch& batch,
                                  const Tensor& encoder_logits, const Tensor& decoder_logits,
                                  const Tensor& encoder_noise, const Tensor& decoder_noise, double temperature,
                                  const GradCheckOptions& options) {
  const std::size_t Le = params.encoder.size();
  const std::size_t Ld = params.decoder.size();
  ad::Graph g;
  const auto bound = model::bind(g, params, true);
  auto ae = g.leaf(encoder_logits);
  auto ad_ = g.leaf(decoder_logits);
  auto ze = gate::soft_gates(g, ae, encoder_noise, temperature);
  auto zd = gate::soft_gates(g, ad_, decoder_noise, temperature);
  const auto fwd = model::forward_seq2seq(g, params, bound, batch, model::split_gates(g, ze, Le),
                                          model::split_gates(g, zd, Ld));
  // full objective for one task: NLL + KL to a uniform prior + 0.1 |sum z - L/2|
  auto loss = model::sequence_nll(g, fwd.logits, batch.target_out);
  const auto uniform = gate::PriorSpec::uniform();
  loss = g.add(loss, gate::kl_sum(g, gate::selection_probabilities(g, ae), gate::prior_probabilities(uniform, Le)));
  loss = g.add(loss, gate::kl_sum(g, gate::selection_probabilities(g, ad_), gate::prior_probabilities(uniform, Ld)));
  loss = g.add(loss, g.scale(loss::target_depth_loss(g, zd, double(Ld) / 2.0), 0.1));

  std::vector<Group> groups;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) groups.push_back({params.names[i], bound[i]});
  groups.push_back({"encoder.logits", ae});
  groups.push_back({"decoder.logits", ad_});

  GradCheckReport r;
  r.tolerance = options.tolerance;
  r.abs_floor = options.abs_floor;
  r.groups = check_groups(g, loss, groups, options);

  // the sampled gate values, audited as free scalars
  const auto zev_span = g.value(ze).values();
  const std::vector<double> zev(zev_span.begin(), zev_span.end());
  const auto zdv_span = g.value(zd).values();
  const std::vector<double> zdv(zdv_span.begin(), zdv_span.end());
  for (auto& c : free_gate_checks(params, batch, zev, zdv, options, false)) r.groups.push_back(std::move(c));
  return r;
}

std::vector<GateAssignment> standard_assignments(std::size_t encoder_layers, std::size_t decoder_layers,
                                                 std::uint64_t seed, double temperature) {
  std::vector<GateAssignment> out;
  out.push_back({"all-ones", std::vector<double>(encoder_layers, 1.0), std::vector<double>(decoder_layers, 1.0)});
  out.push_back({"all-zeros", std::vector<double>(encoder_layers, 0.0), std::vector<double>(decoder_layers, 0.0)});
  Rng rng(seed);
  GateAssignment soft{"sampled-soft", {}, {}};
  for (std::size_t l = 0; l < encoder_layers; ++l) soft.encoder.push_back(gate::sample_soft({}, {temperature}, rng));
  for (std::size_t l = 0; l < decoder_layers; ++l) soft.decoder.push_back(gate::sample_soft({}, {temperature}, rng));
  out.push_back(std::move(soft));
  return out;
}

std::vector<ProbeRow> gradient_scaling_probe(const model::ModelParameters& params, const model::Batch& batch,
                                             const std::vector<GateAssignment>& assignments) {
  std::vector<ProbeRow> rows;
  for (const auto& a : assignments) {
    const auto norms = model::layer_gradient_norms(params, batch, a.encoder, a.decoder);
    for (std::size_t l = 0; l < norms.encoder_states.size(); ++l) {
      rows.push_back({a.name, "encoder", l, norms.encoder_states[l]});
    }
    for (std::size_t l = 0; l < norms.decoder_states.size(); ++l) {
      rows.push_back({a.name, "decoder", l, norms.decoder_states[l]});
    }
  }
  return rows;
}

std::string probe_csv(const std::vector<ProbeRow>& rows) {
  std::ostringstream out;
  out << "assignment,stack,layer,grad_norm\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%s,%zu,%.17g\n", r.assignment.c_str(), r.stack.c_str(), r.layer, r.grad_norm);
    out << line;
  }
  return out.str();
}

double discreteness_score(const gate::PosteriorTable& table) {
  double total = 0.0;
  for (std::size_t n = 0; n < table.num_tasks(); ++n) {
    for (std::size_t l = 0; l < table.num_layers(); ++l) {
      const double p = table.probability(n, l);
      if (p > 0.0) total -= p * std::log(p);
      if (p < 1.0) total -= (1.0 - p) * std::log(1.0 - p);
    }
  }
  return total / double(table.num_tasks() * table.num_layers());
}

namespace {

constexpr char kMagic[8] = {'L', 'D', 'H', 'I', 'S', 'T', '1', '\0'};

}  // namespace

void write_history(const std::vector<train::HistoryRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write history " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t count = history.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& h : history) {
    const std::uint64_t ids[3] = {h.step, h.task, h.layer};
    const double vals[3] = {h.pi, h.z, h.u};
    out.write(reinterpret_cast<const char*>(ids), sizeof ids);
    out.write(reinterpret_cast<const char*>(vals), sizeof vals);
  }
  if (!out) throw std::runtime_error("failed writing history " + path.string());
}

std::vector<train::HistoryRecord> read_history(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read history " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + " is not a utilization history file");
  }
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  std::vector<train::HistoryRecord> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t ids[3];
    double vals[3];
    in.read(reinterpret_cast<char*>(ids), sizeof ids);
    in.read(reinterpret_cast<char*>(vals), sizeof vals);
    if (!in) throw std::runtime_error("truncated history file " + path.string());
    out.push_back({ids[0], ids[1], ids[2], vals[0], vals[1], vals[2]});
  }
  return out;
}

void export_history(const std::vector<train::HistoryRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,task,layer,pi,z,u\n";
  char line[256];
  for (const auto& h : history) {
    std::snprintf(line, sizeof line, "%zu,%zu,%zu,%.9g,%.9g,%.9g\n", h.step, h.task, h.layer, h.pi, h.z, h.u);
    out << line;
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<train::HistoryRecord> parse_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,task,layer,pi,z,u") throw std::runtime_error("unexpected header in " + path.string());
  std::vector<train::HistoryRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    train::HistoryRecord h;
    if (std::sscanf(line.c_str(), "%zu,%zu,%zu,%lf,%lf,%lf", &h.step, &h.task, &h.layer, &h.pi, &h.z, &h.u) != 6) {
      throw std::runtime_error("malformed row in " + path.string() + ": " + line);
    }
    out.push_back(h);
  }
  return out;
}

}  // namespace latent_depth::diag
