// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace latent_depth::tasks {

using nlohmann::json;

Cipher Cipher::identity(std::size_t content_count) {
  Cipher c;
  c.permutation.resize(content_count);
  std::iota(c.permutation.begin(), c.permutation.end(), 0);
  return c;
}

Cipher Cipher::rotation(std::size_t content_count, int shift) {
  Cipher c;
  const int n = int(content_count);
  for (int i = 0; i < n; ++i) c.permutation.push_back(((i + shift) % n + n) % n);
  return c;
}

Cipher Cipher::random(std::size_t content_count, Rng& rng, bool reverse) {
  Cipher c = identity(content_count);
  for (std::size_t i = content_count; i > 1; --i) std::swap(c.permutation[i - 1], c.permutation[rng.below(i)]);
  c.reverse = reverse;
  return c;
}

void Cipher::validate(std::size_t content_count) const {
  if (permutation.size() != content_count) {
    throw ContractViolation("cipher covers " + std::to_string(permutation.size()) + " tokens, vocabulary has " +
                            std::to_string(content_count) + " content tokens");
  }
  std::vector<bool> seen(content_count, false);
  for (int p : permutation) {
    if (p < 0 || std::size_t(p) >= content_count || seen[std::size_t(p)]) {
      throw ContractViolation("cipher is not a permutation of the content tokens");
    }
    seen[std::size_t(p)] = true;
  }
}

std::vector<int> Cipher::apply(std::span<const int> tokens, const TokenLayout& layout) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  const int base = layout.content_begin();
  for (int t : tokens) {
    if (!layout.is_content(t)) {
      out.push_back(t);
      continue;
    }
    out.push_back(base + permutation.at(std::size_t(t - base)));
  }
  if (reverse) std::reverse(out.begin(), out.end());
  return out;
}

Cipher Cipher::inverse() const {
  Cipher c;
  c.permutation.assign(permutation.size(), 0);
  for (std::size_t i = 0; i < permutation.size(); ++i) c.permutation[std::size_t(permutation[i])] = int(i);
  c.reverse = reverse;
  return c;
}

std::string to_string(Direction d) { return d == Direction::ManyToOne ? "m2o" : "o2m"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "valid") return Split::Valid;
  if (text == "test") return Split::Test;
  throw ContractViolation("unknown split '" + text + "'");
}

const std::vector<Example>& examples(const TaskData& task, Split split) {
  switch (split) {
    case Split::Train: return task.train;
    case Split::Valid: return task.valid;
    case Split::Test: return task.test;
  }
  return task.train;
}

Corpus generate_corpus(const std::vector<TaskSpec>& specs, std::size_t vocab, std::uint64_t seed) {
  if (vocab < 16) throw ContractViolation("vocab must be >= 16, got " + std::to_string(vocab));
  if (specs.empty()) throw ContractViolation("corpus needs at least one task");
  const TokenLayout layout{vocab, specs.size()};
  if (vocab < 3 + specs.size() + 2) throw ContractViolation("vocab too small for the task tags");
  std::set<std::size_t> ids;
  for (const auto& s : specs) {
    if (!ids.insert(s.id).second) throw ContractViolation("duplicate task id " + std::to_string(s.id));
    if (s.min_len < 2 || s.max_len < s.min_len) throw ContractViolation("sequence lengths must satisfy 2 <= min <= max");
    if (s.volume == 0) throw ContractViolation("task volume must be positive");
    s.cipher.validate(layout.content_count());
  }

  Corpus corpus;
  corpus.vocab = vocab;
  corpus.seed = seed;
  for (std::size_t n = 0; n < specs.size(); ++n) {
    const TaskSpec& spec = specs[n];
    Rng rng(Rng::derive(seed, spec.id));
    const std::size_t train_n = spec.train_examples * spec.volume;
    const std::size_t wanted = train_n + spec.valid_examples + spec.test_examples;
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> canonical;
    std::size_t attempts = 0;
    while (canonical.size() < wanted) {
      if (++attempts > 50 * wanted + 1000) {
        throw ContractViolation("cannot draw " + std::to_string(wanted) + " distinct sequences for task " +
                                std::to_string(spec.id));
      }
      const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
      std::vector<int> s(len);
      for (auto& t : s) t = layout.content_begin() + int(rng.below(layout.content_count()));
      if (seen.insert(s).second) canonical.push_back(std::move(s));
    }

    TaskData data;
    data.spec = spec;
    for (std::size_t i = 0; i < canonical.size(); ++i) {
      Example e;
      const auto& c = canonical[i];
      if (spec.direction == Direction::ManyToOne) {
        e.source = spec.cipher.apply(c, layout);
        e.target = c;
      } else {
        e.source.push_back(layout.tag(n));
        e.source.insert(e.source.end(), c.begin(), c.end());
        e.target = spec.cipher.apply(c, layout);
      }
      if (i < spec.valid_examples) {
        data.valid.push_back(std::move(e));
      } else if (i < spec.valid_examples + spec.test_examples) {
        data.test.push_back(std::move(e));
      } else {
        data.train.push_back(std::move(e));
      }
    }
    corpus.tasks.push_back(std::move(data));
  }
  return corpus;
}

std::vector<std::string> preset_names() { return {"m2o-diverse4", "o2m-diverse4", "m2o-related4", "o2m-related4"}; }

std::vector<TaskSpec> preset_specs(const std::string& name, std::size_t vocab, std::uint64_t seed,
                                   const PresetOptions& options) {
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    throw ContractViolation("unknown task preset '" + name + "'");
  }
  const std::size_t tasks = 4;
  if (vocab < 16) throw ContractViolation("vocab must be >= 16, got " + std::to_string(vocab));
  const TokenLayout layout{vocab, tasks};
  const Direction dir = name.rfind("m2o", 0) == 0 ? Direction::ManyToOne : Direction::OneToMany;
  const bool diverse = name.find("diverse") != std::string::npos;

  Rng rng(Rng::derive(seed, 0x51ed));
  const Cipher shared = Cipher::random(layout.content_count(), rng);
  std::vector<TaskSpec> specs;
  for (std::size_t n = 0; n < tasks; ++n) {
    TaskSpec s;
    s.id = n;
    s.direction = dir;
    s.train_examples = options.train_examples;
    s.valid_examples = options.valid_examples;
    s.test_examples = options.test_examples;
    s.min_len = options.min_len;
    s.max_len = options.max_len;
    if (diverse) {
      // two low-resource permutation tasks, two high-resource permutation+reversal tasks
      const bool high = n >= 2;
      s.cipher = Cipher::random(layout.content_count(), rng, high);
      s.volume = high ? options.high_resource_volume : 1;
    } else {
      // a shared permutation perturbed by two transpositions per task
      s.cipher = shared;
      for (int k = 0; k < 2; ++k) {
        std::swap(s.cipher.permutation[rng.below(layout.content_count())],
                  s.cipher.permutation[rng.below(layout.content_count())]);
      }
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

model::Batch make_batch(std::span<const Example> examples) {
  std::vector<std::vector<int>> sources, targets;
  sources.reserve(examples.size());
  targets.reserve(examples.size());
  for (const auto& e : examples) {
    sources.push_back(e.source);
    targets.push_back(e.target);
  }
  return model::make_batch(sources, targets);
}

BatchStream::BatchStream(const Corpus& corpus, std::size_t task, std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed) {
  if (task >= corpus.tasks.size()) throw ContractViolation("no task " + std::to_string(task) + " in corpus");
  if (batch_size == 0) throw ContractViolation("batch size must be positive");
  data_ = &corpus.tasks[task].train;
  if (data_->empty()) throw ContractViolation("task " + std::to_string(task) + " has no training examples");
  reshuffle();
}

void BatchStream::reshuffle() {
  state_.order.resize(data_->size());
  std::iota(state_.order.begin(), state_.order.end(), std::size_t{0});
  for (std::size_t i = state_.order.size(); i > 1; --i) std::swap(state_.order[i - 1], state_.order[rng_.below(i)]);
  state_.cursor = 0;
}

std::size_t BatchStream::batches_per_epoch() const noexcept { return (data_->size() + batch_size_ - 1) / batch_size_; }

model::Batch BatchStream::next() {
  if (state_.cursor >= data_->size()) {
    ++state_.epoch;
    reshuffle();
  }
  const std::size_t end = std::min(data_->size(), state_.cursor + batch_size_);
  std::vector<Example> chunk;
  chunk.reserve(end - state_.cursor);
  for (std::size_t i = state_.cursor; i < end; ++i) chunk.push_back((*data_)[state_.order[i]]);
  state_.cursor = end;
  return make_batch(chunk);
}

BatchStream::State BatchStream::state() const {
  State s = state_;
  s.rng = rng_.state();
  return s;
}

void BatchStream::restore(const State& state) {
  if (state.order.size() != data_->size()) throw ContractViolation("batch stream state does not match the corpus");
  state_ = state;
  rng_.restore(state.rng);
}

AccuracyCount token_accuracy(const Predictor& predict, std::span<const Example> examples, std::size_t batch_size) {
  AccuracyCount count;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const auto chunk = examples.subspan(begin, std::min(batch_size, examples.size() - begin));
    const auto batch = make_batch(chunk);
    const auto predicted = predict(batch);
    if (predicted.size() != batch.target_out.size()) throw ContractViolation("prediction shape does not match batch");
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      if (batch.target_out[i] == model::kPadId) continue;
      ++count.total;
      if (predicted[i] == batch.target_out[i]) ++count.correct;
    }
  }
  return count;
}

AccuracyCount token_accuracy(const model::ModelParameters& params, std::span<const Example> examples,
                             const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates,
                             std::size_t batch_size) {
  return token_accuracy(
      [&](const model::Batch& b) { return model::greedy_decode(params, b, encoder_gates, decoder_gates); }, examples,
      batch_size);
}

namespace {

json spec_to_json(const TaskSpec& s) {
  return {{"id", s.id},
          {"direction", to_string(s.direction)},
          {"permutation", s.cipher.permutation},
          {"reverse", s.cipher.reverse},
          {"train_examples", s.train_examples},
          {"valid_examples", s.valid_examples},
          {"test_examples", s.test_examples},
          {"min_len", s.min_len},
          {"max_len", s.max_len},
          {"volume", s.volume}};
}

TaskSpec spec_from_json(const json& j) {
  TaskSpec s;
  s.id = j.at("id").get<std::size_t>();
  const auto dir = j.at("direction").get<std::string>();
  if (dir != "m2o" && dir != "o2m") throw ContractViolation("unknown task direction '" + dir + "'");
  s.direction = dir == "m2o" ? Direction::ManyToOne : Direction::OneToMany;
  s.cipher.permutation = j.at("permutation").get<std::vector<int>>();
  s.cipher.reverse = j.at("reverse").get<bool>();
  s.train_examples = j.at("train_examples").get<std::size_t>();
  s.valid_examples = j.at("valid_examples").get<std::size_t>();
  s.test_examples = j.at("test_examples").get<std::size_t>();
  s.min_len = j.at("min_len").get<std::size_t>();
  s.max_len = j.at("max_len").get<std::size_t>();
  s.volume = j.at("volume").get<std::size_t>();
  return s;
}

std::string join(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<int> parse_ids(const std::string& text) {
  std::istringstream in(text);
  std::vector<int> ids;
  int v;
  while (in >> v) ids.push_back(v);
  return ids;
}

std::filesystem::path split_file(const std::filesystem::path& dir, std::size_t id, Split split) {
  return dir / ("task" + std::to_string(id) + "." + to_string(split) + ".txt");
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json specs = json::array();
  for (const auto& t : corpus.tasks) specs.push_back(spec_to_json(t.spec));
  const json meta{{"vocab", corpus.vocab}, {"seed", corpus.seed}, {"tasks", specs}};
  {
    std::ofstream out(dir / "corpus.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / "corpus.json").string());
    out << meta.dump(2) << '\n';
  }
  for (const auto& t : corpus.tasks) {
    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
      const auto path = split_file(dir, t.spec.id, s);
      std::ofstream out(path, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write " + path.string());
      for (const auto& e : examples(t, s)) out << join(e.source) << '\t' << join(e.target) << '\n';
    }
  }
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "corpus.json");
  if (!meta_in) throw std::runtime_error("cannot read " + (dir / "corpus.json").string());
  const json meta = json::parse(meta_in);
  Corpus corpus;
  corpus.vocab = meta.at("vocab").get<std::size_t>();
  corpus.seed = meta.at("seed").get<std::uint64_t>();
  for (const auto& j : meta.at("tasks")) {
    TaskData t;
    t.spec = spec_from_json(j);
    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
      const auto path = split_file(dir, t.spec.id, s);
      std::ifstream in(path);
      if (!in) throw std::runtime_error("cannot read " + path.string());
      auto& list = s == Split::Train ? t.train : s == Split::Valid ? t.valid : t.test;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ContractViolation("missing tab in " + path.string());
        Example e{parse_ids(line.substr(0, tab)), parse_ids(line.substr(tab + 1))};
        for (const auto* seq : {&e.source, &e.target}) {
          for (int id : *seq) {
            if (id < 0 || std::size_t(id) >= corpus.vocab) {
              throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary in " + path.string());
            }
          }
        }
        list.push_back(std::move(e));
      }
    }
    corpus.tasks.push_back(std::move(t));
  }
  return corpus;
}

}  // namespace latent_depth::tasks
