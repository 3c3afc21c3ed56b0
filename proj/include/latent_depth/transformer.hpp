// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm (or norm-free) Transformer encoder/decoder in which every
// sub-layer residual of layer l is scaled by one gate scalar z_l:
//   h <- h + z_l * SubLayer(Norm(h))
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "latent_depth/autodiff.hpp"
#include "latent_depth/random.hpp"
#include "latent_depth/tensor.hpp"

namespace latent_depth::model {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

enum class NormMode { PreNorm, NoNorm };

struct Gating {
  enum class Kind { Static, LayerDrop, Latent };
  Kind kind = Kind::Static;
  double drop_prob = 0.5;

  static Gating static_depth() { return {}; }
  static Gating layer_drop(double p) { return {Kind::LayerDrop, p}; }
  static Gating latent() { return {Kind::Latent, 0.5}; }
};

struct StackConfig {
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t heads = 4;
  std::size_t vocab_size = 32;
  NormMode norm = NormMode::PreNorm;
  Gating encoder_gating;
  Gating decoder_gating;
  double dropout = 0.0;

  void validate() const;
};

std::string to_string(NormMode mode);
std::string to_string(Gating::Kind kind);
NormMode parse_norm_mode(const std::string& text);
Gating::Kind parse_gating_kind(const std::string& text);

struct NormParams {
  std::size_t gamma = 0, beta = 0;
};

struct AttentionParams {
  std::size_t wq = 0, bq = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
};

struct FeedForwardParams {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

/// Indices into ModelParameters::tensors for one layer.
struct LayerParams {
  std::optional<NormParams> self_norm;
  AttentionParams self_attn;
  std::optional<NormParams> cross_norm;
  std::optional<AttentionParams> cross_attn;
  std::optional<NormParams> ffn_norm;
  FeedForwardParams ffn;
  std::vector<std::size_t> all;
};

/// Theta: every weight of the network, flat, with a structured index.
struct ModelParameters {
  StackConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t embedding = 0;
  std::size_t output_w = 0;
  std::size_t output_b = 0;
  std::optional<NormParams> encoder_final_norm;
  std::optional<NormParams> decoder_final_norm;
  std::vector<LayerParams> encoder;
  std::vector<LayerParams> decoder;

  /// Xavier-uniform projections with residual-branch outputs (wo, ffn.w2)
  /// scaled by 1/sqrt(branches in the stack), N(0, 1/d) embeddings, unit
  /// norms, zero biases.
  static ModelParameters initialize(const StackConfig& config, std::uint64_t seed);
  /// Structured index for `config` with zero-filled tensors.
  static ModelParameters layout(const StackConfig& config);

  std::size_t scalar_count() const;
  std::size_t index_of(const std::string& name) const;

  /// Copy with only the listed encoder / decoder layers, renumbered in order.
  ModelParameters with_layers(const std::vector<std::size_t>& encoder_keep,
                              const std::vector<std::size_t>& decoder_keep) const;
};

/// Padded batch of (source, target) pairs. target_in starts with BOS,
/// target_out ends with EOS; all three are row-major [size, len].
struct Batch {
  std::size_t size = 0;
  std::size_t source_len = 0;
  std::size_t target_len = 0;
  std::vector<int> source;
  std::vector<int> target_in;
  std::vector<int> target_out;

  std::size_t target_tokens() const;
};

Batch make_batch(const std::vector<std::vector<int>>& sources, const std::vector<std::vector<int>>& targets);

/// Graph leaves for every tensor of a ModelParameters, same order.
struct BoundParameters {
  std::vector<ad::Var> vars;
  ad::Var operator[](std::size_t i) const { return vars[i]; }
};

BoundParameters bind(ad::Graph& g, const ModelParameters& params, bool requires_grad = true);

/// One scalar node per layer; constant nodes for fixed gate values.
std::vector<ad::Var> constant_gates(ad::Graph& g, const std::vector<double>& values);
/// Splits a [layers] node into per-layer scalar nodes.
std::vector<ad::Var> split_gates(ad::Graph& g, ad::Var gates, std::size_t layers);

/// Hidden states x_0 .. x_L of one stack (x_L is before any final norm).
struct StackTrace {
  std::vector<ad::Var> states;
};

struct ForwardResult {
  ad::Var logits;  // [size * target_len, vocab]
  ad::Var memory;  // encoder output after final norm
  StackTrace encoder;
  StackTrace decoder;
};

/// Dropout noise; null or zero rate disables dropout.
struct DropoutContext {
  Rng* rng = nullptr;
  double rate = 0.0;
};

/// One layer: self-attention [, encoder attention], feed-forward, each
/// residual branch scaled by `gate`. Decoder layers need `memory` and
/// `cross_mask`.
ad::Var gated_layer_forward(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound,
                            const LayerParams& layer, ad::Var x, ad::Var gate,
                            std::shared_ptr<const ad::AttentionMask> self_mask, std::optional<ad::Var> memory,
                            std::shared_ptr<const ad::AttentionMask> cross_mask, DropoutContext dropout = {});

ad::Var encode(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound, const Batch& batch,
               const std::vector<ad::Var>& gates, StackTrace* trace = nullptr, DropoutContext dropout = {});

ad::Var decode(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound, const Batch& batch,
               ad::Var memory, const std::vector<ad::Var>& gates, StackTrace* trace = nullptr,
               DropoutContext dropout = {});

ForwardResult forward_seq2seq(ad::Graph& g, const ModelParameters& params, const BoundParameters& bound,
                              const Batch& batch, const std::vector<ad::Var>& encoder_gates,
                              const std::vector<ad::Var>& decoder_gates, DropoutContext dropout = {});

/// Mean negative log-likelihood over non-pad target tokens.
ad::Var sequence_nll(ad::Graph& g, ad::Var logits, const std::vector<int>& targets, int pad_id = kPadId);

/// Gates supplied by a non-latent gating mode. LayerDrop draws i.i.d.
/// Bernoulli(1 - p) hard gates in training and uses all ones otherwise.
std::vector<double> fixed_gate_values(const Gating& gating, std::size_t layers, bool training, Rng* rng);

/// Greedy decoding of batch.target_len tokens per row with fixed gates;
/// returns [size, target_len] token ids. Pad and BOS are never emitted.
std::vector<int> greedy_decode(const ModelParameters& params, const Batch& batch,
                               const std::vector<double>& encoder_gates, const std::vector<double>& decoder_gates);

struct LayerGradientNorms {
  std::vector<double> encoder_params;
  std::vector<double> decoder_params;
  /// ||dL/dx_l|| for l = 0..L (index L is the stack output).
  std::vector<double> encoder_states;
  std::vector<double> decoder_states;
  double loss = 0.0;
};

/// One forward/backward pass of the NLL with fixed gate values.
LayerGradientNorms layer_gradient_norms(const ModelParameters& params, const Batch& batch,
                                        const std::vector<double>& encoder_gates,
                                        const std::vector<double>& decoder_gates);

}  // namespace latent_depth::model
