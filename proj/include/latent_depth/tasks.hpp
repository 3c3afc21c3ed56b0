// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task transduction corpora. Each task is a "language"
// given by a permutation of the content tokens, optionally followed by
// reversing the sequence.
//
// Token layout: 0 pad, 1 bos, 2 eos, 3 .. 3+N-1 task tags, then content.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "latent_depth/random.hpp"
#include "latent_depth/transformer.hpp"

namespace latent_depth::tasks {

struct TokenLayout {
  std::size_t vocab = 0;
  std::size_t num_tasks = 0;

  int tag(std::size_t task) const { return int(3 + task); }
  int content_begin() const { return int(3 + num_tasks); }
  std::size_t content_count() const { return vocab - 3 - num_tasks; }
  bool is_content(int token) const { return token >= content_begin() && token < int(vocab); }
};

/// Bijection on content tokens (indices relative to the first content
/// token); special tokens are fixed points.
struct Cipher {
  std::vector<int> permutation;
  bool reverse = false;

  static Cipher identity(std::size_t content_count);
  static Cipher rotation(std::size_t content_count, int shift);
  static Cipher random(std::size_t content_count, Rng& rng, bool reverse = false);

  std::vector<int> apply(std::span<const int> tokens, const TokenLayout& layout) const;
  Cipher inverse() const;
  void validate(std::size_t content_count) const;
};

enum class Direction { ManyToOne, OneToMany };

struct TaskSpec {
  std::size_t id = 0;
  Direction direction = Direction::ManyToOne;
  Cipher cipher;
  std::size_t train_examples = 256;
  std::size_t valid_examples = 64;
  std::size_t test_examples = 64;
  std::size_t min_len = 3;
  std::size_t max_len = 6;
  /// Training-set multiplier emulating low / high resource tasks.
  std::size_t volume = 1;
};

struct Example {
  std::vector<int> source;
  std::vector<int> target;
  friend bool operator==(const Example&, const Example&) = default;
};

struct TaskData {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

struct Corpus {
  std::size_t vocab = 0;
  std::uint64_t seed = 0;
  std::vector<TaskData> tasks;

  TokenLayout layout() const { return {vocab, tasks.size()}; }
};

enum class Split { Train, Valid, Test };

std::string to_string(Direction d);
std::string to_string(Split s);
Split parse_split(const std::string& text);

const std::vector<Example>& examples(const TaskData& task, Split split);

/// M2O: source = cipher(canonical), target = canonical.
/// O2M: source = tag + canonical, target = cipher(canonical).
Corpus generate_corpus(const std::vector<TaskSpec>& specs, std::size_t vocab, std::uint64_t seed);

/// Benchmark presets: m2o-diverse4, o2m-diverse4, m2o-related4, o2m-related4.
struct PresetOptions {
  std::size_t train_examples = 256;
  std::size_t valid_examples = 64;
  std::size_t test_examples = 64;
  std::size_t min_len = 3;
  std::size_t max_len = 6;
  std::size_t high_resource_volume = 8;
};

std::vector<std::string> preset_names();
std::vector<TaskSpec> preset_specs(const std::string& name, std::size_t vocab, std::uint64_t seed,
                                   const PresetOptions& options = {});

/// Shuffled-per-epoch batch iterator over one task's training split.
class BatchStream {
 public:
  struct State {
    std::string rng;
    std::size_t epoch = 0;
    std::size_t cursor = 0;
    std::vector<std::size_t> order;
  };

  BatchStream(const Corpus& corpus, std::size_t task, std::size_t batch_size, std::uint64_t seed);

  model::Batch next();
  /// Number of completed passes over the split.
  std::size_t epoch() const noexcept { return state_.epoch; }
  std::size_t examples_per_epoch() const noexcept { return data_->size(); }
  std::size_t batches_per_epoch() const noexcept;

  State state() const;
  void restore(const State& state);

 private:
  void reshuffle();

  const std::vector<Example>* data_;
  std::size_t batch_size_;
  Rng rng_;
  State state_;
};

/// Pads a list of examples into a batch.
model::Batch make_batch(std::span<const Example> examples);

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : double(correct) / double(total); }
};

/// Predicts target_out tokens for a batch, row-major [size, target_len].
using Predictor = std::function<std::vector<int>(const model::Batch&)>;

/// Exact-match rate over non-pad target positions (EOS included).
AccuracyCount token_accuracy(const Predictor& predict, std::span<const Example> examples,
                             std::size_t batch_size = 64);

/// Greedy-decoding accuracy of a model with fixed gate values.
AccuracyCount token_accuracy(const model::ModelParameters& params, std::span<const Example> examples,
                             const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates,
                             std::size_t batch_size = 64);

/// Line-oriented text export: one file per task and split, lines are
/// "src ids<TAB>tgt ids"; specs go to corpus.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace latent_depth::tasks
