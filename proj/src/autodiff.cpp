// SPDX-License-Identifier: Apache-2.0
#include "latent_depth/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <mutex>

namespace latent_depth::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using Vector = Eigen::Matrix<double, Eigen::Dynamic, 1>;
using VectorMap = Eigen::Map<Vector>;
using ConstVectorMap = Eigen::Map<const Vector>;

constexpr double kLayerNormEps = 1e-5;
constexpr double kProbabilityClamp = 1e-6;

[[noreturn]] void fail(Primitive p, const std::string& detail) {
  throw ContractViolation(std::string(primitive_name(p)) + ": " + detail);
}

void require_same_shape(Primitive p, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) fail(p, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void require_one_element(Primitive p, const Tensor& s) {
  if (s.size() != 1) fail(p, "expected a one-element operand, got " + shape_string(s.shape()));
}

ConstMatrixMap as_matrix(const Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }
MatrixMap as_matrix(Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }

template <class F>
Tensor map_unary(const Tensor& x, F&& f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

void note_clamped_probability() {
  static std::once_flag once;
  std::call_once(once, [] { std::clog << "[latent-depth] probability clamped to [1e-6, 1-1e-6] in KL term\n"; });
}

}  // namespace

std::string_view primitive_name(Primitive p) noexcept {
  switch (p) {
    case Primitive::Leaf: return "leaf";
    case Primitive::Constant: return "constant";
    case Primitive::MatMul: return "matmul";
    case Primitive::Linear: return "linear";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Mul: return "mul";
    case Primitive::Scale: return "scale";
    case Primitive::AddConstant: return "add_constant";
    case Primitive::MulScalar: return "mul_scalar";
    case Primitive::GatedResidual: return "gated_residual";
    case Primitive::Relu: return "relu";
    case Primitive::Log: return "log";
    case Primitive::Abs: return "abs";
    case Primitive::Softmax: return "softmax";
    case Primitive::MaskedSoftmax: return "masked_softmax";
    case Primitive::LayerNorm: return "layer_norm";
    case Primitive::Embedding: return "embedding";
    case Primitive::CrossEntropy: return "cross_entropy";
    case Primitive::Concat: return "concat";
    case Primitive::Reshape: return "reshape";
    case Primitive::Select: return "select";
    case Primitive::Sum: return "sum";
    case Primitive::BernoulliKl: return "bernoulli_kl";
    case Primitive::AttentionScores: return "attention_scores";
    case Primitive::AttentionContext: return "attention_context";
    case Primitive::Dropout: return "dropout";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Gradients

Tensor Gradients::of(Var v) const {
  if (v.id >= shapes_.size()) throw ContractViolation("gradient requested for a node outside the record");
  if (grads_[v.id].empty()) return Tensor(shapes_[v.id]);
  return grads_[v.id];
}

bool Gradients::reached(Var v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

// ---------------------------------------------------------------------------
// Graph bookkeeping

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = requires_grad ? Primitive::Leaf : Primitive::Constant;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::record(Primitive op, std::span<const Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  n.op = op;
  n.inputs.reserve(inputs.size());
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (Var v : inputs) {
    if (v.id >= nodes_.size()) fail(op, "input refers to a node outside the record");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    in.push_back(&nodes_[v.id].value);
  }
  n.value = forward(in);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Graph::set_leaf(Var v, Tensor value) {
  auto& node = nodes_.at(v.id);
  if (node.op != Primitive::Leaf && node.op != Primitive::Constant) {
    throw ContractViolation("set_leaf on a non-leaf node");
  }
  if (node.value.shape() != value.shape()) {
    throw ContractViolation("set_leaf shape " + shape_string(value.shape()) + " vs " + shape_string(node.value.shape()));
  }
  node.value = std::move(value);
}

void Graph::replay() {
  std::vector<const Tensor*> in;
  for (auto& node : nodes_) {
    if (!node.forward) continue;
    in.clear();
    for (auto id : node.inputs) in.push_back(&nodes_[id].value);
    node.value = node.forward(in);
  }
}

Gradients Graph::backward(Var loss) const {
  const auto& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ContractViolation("backward: loss must be a one-element node, got " + shape_string(root.value.shape()));
  }
  Gradients g;
  g.grads_.resize(nodes_.size());
  g.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) g.shapes_.push_back(n.value.shape());
  if (!root.requires_grad) return g;

  g.grads_[loss.id] = Tensor(root.value.shape(), 1.0);
  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const auto& node = nodes_[i];
    if (g.grads_[i].empty() || !node.backward) continue;
    in.clear();
    gin.clear();
    for (auto id : node.inputs) {
      in.push_back(&nodes_[id].value);
      if (nodes_[id].requires_grad) {
        if (g.grads_[id].empty()) g.grads_[id] = Tensor(nodes_[id].value.shape());
        gin.push_back(&g.grads_[id]);
      } else {
        gin.push_back(nullptr);
      }
    }
    node.backward(in, node.value, g.grads_[i], gin);
  }
  return g;
}

Var Graph::apply(Primitive op, std::span<const Var> inputs) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      fail(op, "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (op) {
    case Primitive::MatMul: arity(2); return matmul(inputs[0], inputs[1]);
    case Primitive::Linear: arity(3); return linear(inputs[0], inputs[1], inputs[2]);
    case Primitive::Add: arity(2); return add(inputs[0], inputs[1]);
    case Primitive::Sub: arity(2); return sub(inputs[0], inputs[1]);
    case Primitive::Mul: arity(2); return mul(inputs[0], inputs[1]);
    case Primitive::Relu: arity(1); return relu(inputs[0]);
    case Primitive::Log: arity(1); return log(inputs[0]);
    case Primitive::Abs: arity(1); return abs(inputs[0]);
    case Primitive::Softmax: arity(1); return softmax(inputs[0]);
    case Primitive::LayerNorm: arity(3); return layer_norm(inputs[0], inputs[1], inputs[2]);
    case Primitive::Concat: return concat(inputs);
    case Primitive::Sum: arity(1); return sum(inputs[0]);
    default: fail(op, "primitive needs attributes; use the typed builder");
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Var Graph::matmul(Var a, Var b) {
  auto fwd = [](Inputs in) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
      fail(Primitive::MatMul, "cannot multiply " + shape_string(x.shape()) + " by " + shape_string(y.shape()));
    }
    Tensor out({x.dim(0), y.dim(1)});
    as_matrix(out).noalias() = as_matrix(x) * as_matrix(y);
    return out;
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    if (gin[0]) as_matrix(*gin[0]).noalias() += as_matrix(g) * as_matrix(*in[1]).transpose();
    if (gin[1]) as_matrix(*gin[1]).noalias() += as_matrix(*in[0]).transpose() * as_matrix(g);
  };
  const Var ins[] = {a, b};
  return record(Primitive::MatMul, ins, fwd, bwd);
}

Var Graph::linear(Var x, Var w, Var b) {
  auto fwd = [](Inputs in) {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    if (w.rank() != 2 || x.cols() != w.dim(0) || b.size() != w.dim(1)) {
      fail(Primitive::Linear, "input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()) + " bias " +
                                  shape_string(b.shape()));
    }
    Shape shape = x.shape();
    shape.back() = w.dim(1);
    Tensor out(shape);
    auto o = as_matrix(out);
    o.noalias() = as_matrix(x) * as_matrix(w);
    o.rowwise() += ConstVectorMap(b.data(), Eigen::Index(b.size())).transpose();
    return out;
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    auto gm = as_matrix(g);
    if (gin[0]) as_matrix(*gin[0]).noalias() += gm * as_matrix(*in[1]).transpose();
    if (gin[1]) as_matrix(*gin[1]).noalias() += as_matrix(*in[0]).transpose() * gm;
    if (gin[2]) VectorMap(gin[2]->data(), Eigen::Index(gin[2]->size())) += gm.colwise().sum().transpose();
  };
  const Var ins[] = {x, w, b};
  return record(Primitive::Linear, ins, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Elementwise

Var Graph::add(Var a, Var b) {
  auto fwd = [](Inputs in) {
    require_same_shape(Primitive::Add, *in[0], *in[1]);
    Tensor out = *in[0];
    out += *in[1];
    return out;
  };
  auto bwd = [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
    if (gin[0]) *gin[0] += g;
    if (gin[1]) *gin[1] += g;
  };
  const Var ins[] = {a, b};
  return record(Primitive::Add, ins, fwd, bwd);
}

Var Graph::sub(Var a, Var b) {
  auto fwd = [](Inputs in) {
    require_same_shape(Primitive::Sub, *in[0], *in[1]);
    Tensor out = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= (*in[1])[i];
    return out;
  };
  auto bwd = [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
    if (gin[0]) *gin[0] += g;
    if (gin[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
    }
  };
  const Var ins[] = {a, b};
  return record(Primitive::Sub, ins, fwd, bwd);
}

Var Graph::mul(Var a, Var b) {
  auto fwd = [](Inputs in) {
    require_same_shape(Primitive::Mul, *in[0], *in[1]);
    Tensor out = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
    return out;
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * (*in[1])[i];
      if (gin[1]) (*gin[1])[i] += g[i] * (*in[0])[i];
    }
  };
  const Var ins[] = {a, b};
  return record(Primitive::Mul, ins, fwd, bwd);
}

Var Graph::scale(Var x, double factor) {
  auto fwd = [factor](Inputs in) { return map_unary(*in[0], [factor](double v) { return v * factor; }); };
  auto bwd = [factor](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
  };
  const Var ins[] = {x};
  return record(Primitive::Scale, ins, fwd, bwd);
}

Var Graph::add_constant(Var x, double offset) {
  auto fwd = [offset](Inputs in) { return map_unary(*in[0], [offset](double v) { return v + offset; }); };
  auto bwd = [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) { *gin[0] += g; };
  const Var ins[] = {x};
  return record(Primitive::AddConstant, ins, fwd, bwd);
}

Var Graph::mul_scalar(Var x, Var s) {
  auto fwd = [](Inputs in) {
    require_one_element(Primitive::MulScalar, *in[1]);
    const double k = (*in[1])[0];
    return map_unary(*in[0], [k](double v) { return v * k; });
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& x = *in[0];
    const double k = (*in[1])[0];
    if (gin[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += k * g[i];
    }
    if (gin[1]) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      (*gin[1])[0] += acc;
    }
  };
  const Var ins[] = {x, s};
  return record(Primitive::MulScalar, ins, fwd, bwd);
}

Var Graph::gated_residual(Var h, Var f, Var z) {
  auto fwd = [](Inputs in) {
    require_same_shape(Primitive::GatedResidual, *in[0], *in[1]);
    require_one_element(Primitive::GatedResidual, *in[2]);
    const Tensor& f = *in[1];
    const double gate = (*in[2])[0];
    Tensor out = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += gate * f[i];
    return out;
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& f = *in[1];
    const double gate = (*in[2])[0];
    if (gin[0]) *gin[0] += g;
    if (gin[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += gate * g[i];
    }
    if (gin[2]) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * f[i];
      (*gin[2])[0] += acc;
    }
  };
  const Var ins[] = {h, f, z};
  return record(Primitive::GatedResidual, ins, fwd, bwd);
}

Var Graph::relu(Var x) {
  auto fwd = [](Inputs in) { return map_unary(*in[0], [](double v) { return v > 0.0 ? v : 0.0; }); };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) (*gin[0])[i] += g[i];
    }
  };
  const Var ins[] = {x};
  return record(Primitive::Relu, ins, fwd, bwd);
}

Var Graph::log(Var x) {
  auto fwd = [](Inputs in) {
    for (double v : in[0]->values()) {
      if (!(v > 0.0)) fail(Primitive::Log, "argument must be positive");
    }
    return map_unary(*in[0], [](double v) { return std::log(v); });
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / (*in[0])[i];
  };
  const Var ins[] = {x};
  return record(Primitive::Log, ins, fwd, bwd);
}

Var Graph::abs(Var x) {
  auto fwd = [](Inputs in) { return map_unary(*in[0], [](double v) { return std::fabs(v); }); };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      // subgradient 0 at the kink
      if (x[i] > 0.0) {
        (*gin[0])[i] += g[i];
      } else if (x[i] < 0.0) {
        (*gin[0])[i] -= g[i];
      }
    }
  };
  const Var ins[] = {x};
  return record(Primitive::Abs, ins, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Normalizations

namespace {

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    const double inv = 1.0 / total;
    for (std::size_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
}

void softmax_rows_backward(const double* y, const double* g, double* gx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* gr = g + r * cols;
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
    double* out = gx + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += yr[c] * (gr[c] - dot);
  }
}

}  // namespace

Var Graph::softmax(Var x) {
  auto fwd = [](Inputs in) {
    Tensor out(in[0]->shape());
    softmax_rows(in[0]->data(), out.data(), in[0]->rows(), in[0]->cols());
    return out;
  };
  auto bwd = [](Inputs, const Tensor& y, const Tensor& g, GradInputs gin) {
    softmax_rows_backward(y.data(), g.data(), gin[0]->data(), y.rows(), y.cols());
  };
  const Var ins[] = {x};
  return record(Primitive::Softmax, ins, fwd, bwd);
}

Var Graph::masked_softmax(Var scores, std::shared_ptr<const AttentionMask> mask) {
  if (!mask) fail(Primitive::MaskedSoftmax, "null mask");
  auto fwd = [mask](Inputs in) {
    const Tensor& s = *in[0];
    if (s.rank() != 4 || s.dim(0) != mask->batch || s.dim(2) != mask->queries || s.dim(3) != mask->keys ||
        mask->allow.size() != mask->batch * mask->queries * mask->keys) {
      fail(Primitive::MaskedSoftmax, "scores " + shape_string(s.shape()) + " vs mask [" + std::to_string(mask->batch) +
                                         "x" + std::to_string(mask->queries) + "x" + std::to_string(mask->keys) + "]");
    }
    const std::size_t heads = s.dim(1);
    const std::size_t tq = mask->queries;
    const std::size_t tk = mask->keys;
    Tensor out(s.shape());
    for (std::size_t b = 0; b < mask->batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < tq; ++q) {
          const double* row = s.data() + ((b * heads + h) * tq + q) * tk;
          double* dst = out.data() + ((b * heads + h) * tq + q) * tk;
          const std::uint8_t* allow = mask->allow.data() + (b * tq + q) * tk;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < tk; ++k) {
            if (allow[k]) mx = std::max(mx, row[k]);
          }
          if (!std::isfinite(mx)) continue;  // fully masked row stays zero
          double total = 0.0;
          for (std::size_t k = 0; k < tk; ++k) {
            dst[k] = allow[k] ? std::exp(row[k] - mx) : 0.0;
            total += dst[k];
          }
          const double inv = 1.0 / total;
          for (std::size_t k = 0; k < tk; ++k) dst[k] *= inv;
        }
      }
    }
    return out;
  };
  auto bwd = [](Inputs, const Tensor& y, const Tensor& g, GradInputs gin) {
    softmax_rows_backward(y.data(), g.data(), gin[0]->data(), y.rows(), y.cols());
  };
  const Var ins[] = {scores};
  return record(Primitive::MaskedSoftmax, ins, fwd, bwd);
}

Var Graph::layer_norm(Var x, Var gamma, Var beta) {
  auto fwd = [](Inputs in) {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const Tensor& beta = *in[2];
    const std::size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d) {
      fail(Primitive::LayerNorm, "input " + shape_string(x.shape()) + " with affine " + shape_string(gamma.shape()) +
                                     "/" + shape_string(beta.shape()));
    }
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double* xr = x.data() + r * d;
      double* yr = out.data() + r * d;
      double mean = 0.0;
      for (std::size_t c = 0; c < d; ++c) mean += xr[c];
      mean /= double(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
      var /= double(d);
      const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t c = 0; c < d; ++c) yr[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
    }
    return out;
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const std::size_t d = x.cols();
    std::vector<double> xhat(d);
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double* xr = x.data() + r * d;
      const double* gr = g.data() + r * d;
      double mean = 0.0;
      for (std::size_t c = 0; c < d; ++c) mean += xr[c];
      mean /= double(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
      var /= double(d);
      const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
      double mean_dxhat = 0.0;
      double mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        xhat[c] = (xr[c] - mean) * rstd;
        dxhat[c] = gr[c] * gamma[c];
        mean_dxhat += dxhat[c];
        mean_dxhat_xhat += dxhat[c] * xhat[c];
        if (gin[1]) (*gin[1])[c] += gr[c] * xhat[c];
        if (gin[2]) (*gin[2])[c] += gr[c];
      }
      if (gin[0]) {
        mean_dxhat /= double(d);
        mean_dxhat_xhat /= double(d);
        double* gx = gin[0]->data() + r * d;
        for (std::size_t c = 0; c < d; ++c) gx[c] += rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
      }
    }
  };
  const Var ins[] = {x, gamma, beta};
  return record(Primitive::LayerNorm, ins, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Indexing and losses

Var Graph::embedding(Var table, std::vector<int> ids, Shape index_shape) {
  if (shape_count(index_shape) != ids.size()) {
    fail(Primitive::Embedding, "index shape " + shape_string(index_shape) + " does not hold " +
                                   std::to_string(ids.size()) + " ids");
  }
  auto shared_ids = std::make_shared<const std::vector<int>>(std::move(ids));
  auto fwd = [shared_ids, index_shape](Inputs in) {
    const Tensor& t = *in[0];
    if (t.rank() != 2) fail(Primitive::Embedding, "table must be rank 2, got " + shape_string(t.shape()));
    const std::size_t vocab = t.dim(0);
    const std::size_t d = t.dim(1);
    Shape shape = index_shape;
    shape.push_back(d);
    Tensor out(shape);
    for (std::size_t i = 0; i < shared_ids->size(); ++i) {
      const int id = (*shared_ids)[i];
      if (id < 0 || std::size_t(id) >= vocab) {
        fail(Primitive::Embedding, "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
      }
      std::copy_n(t.data() + std::size_t(id) * d, d, out.data() + i * d);
    }
    return out;
  };
  auto bwd = [shared_ids](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const std::size_t d = in[0]->dim(1);
    for (std::size_t i = 0; i < shared_ids->size(); ++i) {
      double* dst = gin[0]->data() + std::size_t((*shared_ids)[i]) * d;
      const double* src = g.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  };
  const Var ins[] = {table};
  return record(Primitive::Embedding, ins, fwd, bwd);
}

Var Graph::cross_entropy(Var logits, std::vector<int> targets, int pad_id) {
  auto shared = std::make_shared<const std::vector<int>>(std::move(targets));
  auto count_real = [shared, pad_id] {
    std::size_t n = 0;
    for (int t : *shared) n += (t != pad_id);
    return n;
  };
  const std::size_t real = count_real();
  if (real == 0) fail(Primitive::CrossEntropy, "every target position is padding");
  auto fwd = [shared, pad_id, real](Inputs in) {
    const Tensor& x = *in[0];
    const std::size_t v = x.cols();
    if (x.rows() != shared->size()) {
      fail(Primitive::CrossEntropy, "logits " + shape_string(x.shape()) + " vs " + std::to_string(shared->size()) +
                                        " targets");
    }
    double total = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const int t = (*shared)[r];
      if (t == pad_id) continue;
      if (t < 0 || std::size_t(t) >= v) fail(Primitive::CrossEntropy, "target " + std::to_string(t) + " out of range");
      const double* row = x.data() + r * v;
      double mx = row[0];
      for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
      double s = 0.0;
      for (std::size_t c = 0; c < v; ++c) s += std::exp(row[c] - mx);
      total += mx + std::log(s) - row[t];
    }
    return Tensor::scalar(total / double(real));
  };
  auto bwd = [shared, pad_id, real](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& x = *in[0];
    const std::size_t v = x.cols();
    const double scale = g[0] / double(real);
    std::vector<double> p(v);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const int t = (*shared)[r];
      if (t == pad_id) continue;
      softmax_rows(x.data() + r * v, p.data(), 1, v);
      double* dst = gin[0]->data() + r * v;
      for (std::size_t c = 0; c < v; ++c) dst[c] += scale * p[c];
      dst[t] -= scale;
    }
  };
  const Var ins[] = {logits};
  return record(Primitive::CrossEntropy, ins, fwd, bwd);
}

Var Graph::concat(std::span<const Var> parts) {
  if (parts.empty()) fail(Primitive::Concat, "no inputs");
  auto fwd = [](Inputs in) {
    const std::size_t rows = in[0]->rows();
    Shape shape = in[0]->shape();
    std::size_t total = 0;
    for (const Tensor* t : in) {
      Shape lead(t->shape().begin(), t->shape().end() - 1);
      if (t->rank() != shape.size() || !std::equal(lead.begin(), lead.end(), shape.begin())) {
        fail(Primitive::Concat, "leading extents differ: " + shape_string(t->shape()) + " vs " + shape_string(shape));
      }
      total += t->cols();
    }
    shape.back() = total;
    Tensor out(shape);
    for (std::size_t r = 0; r < rows; ++r) {
      double* dst = out.data() + r * total;
      for (const Tensor* t : in) {
        dst = std::copy_n(t->data() + r * t->cols(), t->cols(), dst);
      }
    }
    return out;
  };
  auto bwd = [](Inputs in, const Tensor& out, const Tensor& g, GradInputs gin) {
    const std::size_t total = out.cols();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t w = in[i]->cols();
      if (gin[i]) {
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const double* src = g.data() + r * total + offset;
          double* dst = gin[i]->data() + r * w;
          for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
        }
      }
      offset += w;
    }
  };
  return record(Primitive::Concat, parts, fwd, bwd);
}

Var Graph::reshape(Var x, Shape shape) {
  auto fwd = [shape](Inputs in) {
    if (shape_count(shape) != in[0]->size()) {
      fail(Primitive::Reshape, "cannot view " + shape_string(in[0]->shape()) + " as " + shape_string(shape));
    }
    return in[0]->reshaped(shape);
  };
  auto bwd = [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  };
  const Var ins[] = {x};
  return record(Primitive::Reshape, ins, fwd, bwd);
}

Var Graph::select(Var x, std::size_t k) {
  auto fwd = [k](Inputs in) {
    const Tensor& t = *in[0];
    if (k >= t.cols()) {
      fail(Primitive::Select, "index " + std::to_string(k) + " outside trailing extent of " + shape_string(t.shape()));
    }
    Shape shape(t.shape().begin(), t.shape().end() - 1);
    if (shape.empty()) shape = {1};
    Tensor out(shape);
    for (std::size_t r = 0; r < t.rows(); ++r) out[r] = t[r * t.cols() + k];
    return out;
  };
  auto bwd = [k](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const std::size_t cols = in[0]->cols();
    for (std::size_t r = 0; r < g.size(); ++r) (*gin[0])[r * cols + k] += g[r];
  };
  const Var ins[] = {x};
  return record(Primitive::Select, ins, fwd, bwd);
}

Var Graph::sum(Var x) {
  auto fwd = [](Inputs in) {
    double total = 0.0;
    for (double v : in[0]->values()) total += v;
    return Tensor::scalar(total);
  };
  auto bwd = [](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
    for (auto& v : gin[0]->values()) v += g[0];
  };
  const Var ins[] = {x};
  return record(Primitive::Sum, ins, fwd, bwd);
}

Var Graph::bernoulli_kl(Var pi, Tensor prior) {
  auto p = std::make_shared<const Tensor>(std::move(prior));
  auto fwd = [p](Inputs in) {
    const Tensor& q = *in[0];
    require_same_shape(Primitive::BernoulliKl, q, *p);
    Tensor out(q.shape());
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double a = clamp_probability(q[i]);
      const double b = clamp_probability((*p)[i]);
      if (a != q[i] || b != (*p)[i]) note_clamped_probability();
      out[i] = a * std::log(a / b) + (1.0 - a) * std::log((1.0 - a) / (1.0 - b));
    }
    return out;
  };
  auto bwd = [p](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& q = *in[0];
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double a = clamp_probability(q[i]);
      if (a != q[i]) continue;  // clamped: locally constant
      const double b = clamp_probability((*p)[i]);
      (*gin[0])[i] += g[i] * (std::log(a / b) - std::log((1.0 - a) / (1.0 - b)));
    }
  };
  const Var ins[] = {pi};
  return record(Primitive::BernoulliKl, ins, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Multi-head attention products

Var Graph::attention_scores(Var q, Var k, std::size_t heads) {
  auto fwd = [heads](Inputs in) {
    const Tensor& q = *in[0];
    const Tensor& k = *in[1];
    if (q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2) || heads == 0 ||
        q.dim(2) % heads != 0) {
      fail(Primitive::AttentionScores, "queries " + shape_string(q.shape()) + " keys " + shape_string(k.shape()) +
                                           " heads " + std::to_string(heads));
    }
    const std::size_t batch = q.dim(0), tq = q.dim(1), tk = k.dim(1), d = q.dim(2), dh = d / heads;
    const double scale = 1.0 / std::sqrt(double(dh));
    Tensor out({batch, heads, tq, tk});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        ConstStridedMap qh(q.data() + b * tq * d + h * dh, Eigen::Index(tq), Eigen::Index(dh), Eigen::OuterStride<>(d));
        ConstStridedMap kh(k.data() + b * tk * d + h * dh, Eigen::Index(tk), Eigen::Index(dh), Eigen::OuterStride<>(d));
        MatrixMap s(out.data() + (b * heads + h) * tq * tk, Eigen::Index(tq), Eigen::Index(tk));
        s.noalias() = scale * (qh * kh.transpose());
      }
    }
    return out;
  };
  auto bwd = [heads](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& q = *in[0];
    const Tensor& k = *in[1];
    const std::size_t batch = q.dim(0), tq = q.dim(1), tk = k.dim(1), d = q.dim(2), dh = d / heads;
    const double scale = 1.0 / std::sqrt(double(dh));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        ConstMatrixMap gs(g.data() + (b * heads + h) * tq * tk, Eigen::Index(tq), Eigen::Index(tk));
        if (gin[0]) {
          ConstStridedMap kh(k.data() + b * tk * d + h * dh, Eigen::Index(tk), Eigen::Index(dh), Eigen::OuterStride<>(d));
          StridedMap gq(gin[0]->data() + b * tq * d + h * dh, Eigen::Index(tq), Eigen::Index(dh), Eigen::OuterStride<>(d));
          gq.noalias() += scale * (gs * kh);
        }
        if (gin[1]) {
          ConstStridedMap qh(q.data() + b * tq * d + h * dh, Eigen::Index(tq), Eigen::Index(dh), Eigen::OuterStride<>(d));
          StridedMap gk(gin[1]->data() + b * tk * d + h * dh, Eigen::Index(tk), Eigen::Index(dh), Eigen::OuterStride<>(d));
          gk.noalias() += scale * (gs.transpose() * qh);
        }
      }
    }
  };
  const Var ins[] = {q, k};
  return record(Primitive::AttentionScores, ins, fwd, bwd);
}

Var Graph::attention_context(Var probs, Var v) {
  auto fwd = [](Inputs in) {
    const Tensor& p = *in[0];
    const Tensor& v = *in[1];
    if (p.rank() != 4 || v.rank() != 3 || p.dim(0) != v.dim(0) || p.dim(3) != v.dim(1) || v.dim(2) % p.dim(1) != 0) {
      fail(Primitive::AttentionContext, "probabilities " + shape_string(p.shape()) + " values " + shape_string(v.shape()));
    }
    const std::size_t batch = p.dim(0), heads = p.dim(1), tq = p.dim(2), tk = p.dim(3), d = v.dim(2), dh = d / heads;
    Tensor out({batch, tq, d});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        ConstMatrixMap ph(p.data() + (b * heads + h) * tq * tk, Eigen::Index(tq), Eigen::Index(tk));
        ConstStridedMap vh(v.data() + b * tk * d + h * dh, Eigen::Index(tk), Eigen::Index(dh), Eigen::OuterStride<>(d));
        StridedMap oh(out.data() + b * tq * d + h * dh, Eigen::Index(tq), Eigen::Index(dh), Eigen::OuterStride<>(d));
        oh.noalias() = ph * vh;
      }
    }
    return out;
  };
  auto bwd = [](Inputs in, const Tensor&, const Tensor& g, GradInputs gin) {
    const Tensor& p = *in[0];
    const Tensor& v = *in[1];
    const std::size_t batch = p.dim(0), heads = p.dim(1), tq = p.dim(2), tk = p.dim(3), d = v.dim(2), dh = d / heads;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        ConstStridedMap go(g.data() + b * tq * d + h * dh, Eigen::Index(tq), Eigen::Index(dh), Eigen::OuterStride<>(d));
        if (gin[0]) {
          ConstStridedMap vh(v.data() + b * tk * d + h * dh, Eigen::Index(tk), Eigen::Index(dh), Eigen::OuterStride<>(d));
          MatrixMap gp(gin[0]->data() + (b * heads + h) * tq * tk, Eigen::Index(tq), Eigen::Index(tk));
          gp.noalias() += go * vh.transpose();
        }
        if (gin[1]) {
          ConstMatrixMap ph(p.data() + (b * heads + h) * tq * tk, Eigen::Index(tq), Eigen::Index(tk));
          StridedMap gv(gin[1]->data() + b * tk * d + h * dh, Eigen::Index(tk), Eigen::Index(dh), Eigen::OuterStride<>(d));
          gv.noalias() += ph.transpose() * go;
        }
      }
    }
  };
  const Var ins[] = {probs, v};
  return record(Primitive::AttentionContext, ins, fwd, bwd);
}

Var Graph::dropout(Var x, std::vector<std::uint8_t> keep, double drop_prob) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) fail(Primitive::Dropout, "drop probability must lie in [0, 1)");
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(keep));
  const double scale = 1.0 / (1.0 - drop_prob);
  auto fwd = [mask, scale](Inputs in) {
    if (mask->size() != in[0]->size()) fail(Primitive::Dropout, "mask size does not match " + shape_string(in[0]->shape()));
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*mask)[i] ? (*in[0])[i] * scale : 0.0;
    return out;
  };
  auto bwd = [mask, scale](Inputs, const Tensor&, const Tensor& g, GradInputs gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*mask)[i]) (*gin[0])[i] += g[i] * scale;
    }
  };
  const Var ins[] = {x};
  return record(Primitive::Dropout, ins, fwd, bwd);
}

// ---------------------------------------------------------------------------

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractViolation("finite_difference_gradient: eps must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace latent_depth::ad
