// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense double tensors. A Graph
// records every primitive application in topological order together with its
// forward and backward rules, so the same record can be differentiated,
// replayed after changing leaf values, or probed by finite differences.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latent_depth/tensor.hpp"

namespace latent_depth::ad {

enum class Primitive : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Linear,
  Add,
  Sub,
  Mul,
  Scale,
  AddConstant,
  MulScalar,
  GatedResidual,
  Relu,
  Log,
  Abs,
  Softmax,
  MaskedSoftmax,
  LayerNorm,
  Embedding,
  CrossEntropy,
  Concat,
  Reshape,
  Select,
  Sum,
  BernoulliKl,
  AttentionScores,
  AttentionContext,
  Dropout,
};

std::string_view primitive_name(Primitive p) noexcept;

/// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
  friend bool operator==(Var, Var) = default;
};

/// Attention mask shared across heads: layout [batch, queries, keys], 1 = attend.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allow;
};

class Graph;

/// Gradients of one scalar with respect to every node that requires them.
class Gradients {
 public:
  /// Gradient of the loss w.r.t. `v`; a zero tensor of v's shape when the
  /// loss does not depend on v.
  Tensor of(Var v) const;
  bool reached(Var v) const;

 private:
  friend class Graph;
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

class Graph {
 public:
  using Inputs = std::span<const Tensor* const>;
  using GradInputs = std::span<Tensor* const>;
  using ForwardFn = std::function<Tensor(Inputs)>;
  /// Accumulates into grad_in[i] (nullptr when input i needs no gradient).
  using BackwardFn = std::function<void(Inputs in, const Tensor& out, const Tensor& grad_out, GradInputs grad_in)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  Primitive primitive(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records a custom primitive. Shape checks belong inside `forward`.
  Var record(Primitive op, std::span<const Var> inputs, ForwardFn forward, BackwardFn backward);

  /// Dispatch for the attribute-free primitives (MatMul, Linear, Add, Sub,
  /// Mul, Relu, Log, Abs, Softmax, LayerNorm, Concat, Sum).
  Var apply(Primitive op, std::span<const Var> inputs);

  // [m,k] x [k,n]
  Var matmul(Var a, Var b);
  // x[..., in] * w[in, out] + b[out]
  Var linear(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var add_constant(Var x, double offset);
  // x * s where s is a one-element node
  Var mul_scalar(Var x, Var s);
  // h + z * f with z a one-element node
  Var gated_residual(Var h, Var f, Var z);
  Var relu(Var x);
  Var log(Var x);
  Var abs(Var x);
  // over the trailing axis
  Var softmax(Var x);
  // scores [batch, heads, queries, keys]
  Var masked_softmax(Var scores, std::shared_ptr<const AttentionMask> mask);
  // over the trailing axis with affine gamma/beta, epsilon 1e-5
  Var layer_norm(Var x, Var gamma, Var beta);
  Var embedding(Var table, std::vector<int> ids, Shape index_shape);
  // mean over non-pad targets of -log softmax(logits)[target]
  Var cross_entropy(Var logits, std::vector<int> targets, int pad_id);
  // along the trailing axis; leading extents must agree
  Var concat(std::span<const Var> parts);
  Var reshape(Var x, Shape shape);
  // picks index `k` of the trailing axis: [..., n] -> [...]; [n] -> [1]
  Var select(Var x, std::size_t k);
  // all elements to a [1] tensor
  Var sum(Var x);
  // elementwise Bernoulli KL(pi || prior) with probabilities clamped to
  // [1e-6, 1 - 1e-6]; prior is a constant tensor of pi's shape
  Var bernoulli_kl(Var pi, Tensor prior);
  // q, k [batch, T, d] -> [batch, heads, Tq, Tk] scaled by 1/sqrt(d/heads)
  Var attention_scores(Var q, Var k, std::size_t heads);
  // probs [batch, heads, Tq, Tk], v [batch, Tk, d] -> [batch, Tq, d]
  Var attention_context(Var probs, Var v);
  // inverted dropout with a fixed keep mask (1 keep, 0 drop)
  Var dropout(Var x, std::vector<std::uint8_t> keep, double drop_prob);

  /// Reverse sweep from a one-element node.
  Gradients backward(Var loss) const;

  /// Replaces a leaf value (same shape) without recomputing dependents.
  void set_leaf(Var v, Tensor value);
  /// Recomputes every non-leaf node in record order from current leaves.
  void replay();

 private:
  struct Node {
    Primitive op = Primitive::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

/// Central-difference estimate (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)
/// for every coordinate of x.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

}  // namespace latent_depth::ad
