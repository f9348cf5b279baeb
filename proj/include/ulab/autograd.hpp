#pragma once

// Tape-based reverse-mode differentiation over ulab::Tensor.
//
// A Tape owns every value produced while building a computation. Ops take
// and return Var handles (tape + node index). Nodes whose inputs do not
// require gradients record no backward closure, so a tape built entirely
// from constants and frozen parameters is a plain forward evaluator.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "ulab/tensor.hpp"

namespace ulab {

using ParamId = std::size_t;
using TokenId = std::int32_t;

// Gradient per parameter, same shape as the parameter.
using GradientMap = std::map<ParamId, Tensor>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a caller-owned parameter tensor. The tensor must outlive
  // the tape and stay unchanged until backward has run.
  Var parameter(ParamId id, const Tensor& value, bool requires_grad);

  // Records an op result. `backward` is dropped if no input requires grad.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Adds g into the gradient buffer of node `id` (no-op if it needs none).
  void accumulate(std::size_t id, const Tensor& g);
  // Mutable gradient buffer for node `id`, zero-initialized on first use.
  Tensor& grad_buffer(std::size_t id);

  // Runs the reverse sweep from a scalar loss and returns the gradient of
  // every reachable parameter leaf that requires grad. Consumes the tape.
  GradientMap backward(Var loss);
  // Same sweep, seeded with `seed` instead of 1, adding each parameter
  // gradient into `into` (missing entries are created).
  void backward_into(Var loss, GradientMap& into, double seed = 1.0);

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_param = false;
    ParamId param = 0;
  };

  void sweep(Var loss, double seed);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> reachable_;
  bool consumed_ = false;
};

// Differentiable primitives. Shapes are checked and violations raise
// ContractViolation.
namespace ops {

Var matmul(Var a, Var b);           // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);        // [m,k] x [n,k]^T
Var add(Var a, Var b);              // same shape
Var sub(Var a, Var b);              // same shape
Var mul(Var a, Var b);              // elementwise, same shape
Var add_bias(Var x, Var bias);      // [m,n] + [n] broadcast over rows
Var scale(Var x, double s);
Var gelu(Var x);
Var layer_norm(Var x, Var gamma, Var beta);
Var softmax(Var x, bool causal = false);  // row-wise
Var embedding(Var table, std::span<const TokenId> ids);
Var slice_cols(Var x, std::size_t start, std::size_t width);
Var concat_cols(std::span<const Var> parts);
Var set_row(Var x, std::size_t row, std::span<const double> values);
Var sum(Var x);

// Sum over masked rows of -log softmax(logits)[target]. Needs >= 1 true mask entry.
Var masked_cross_entropy(Var logits, std::span<const TokenId> targets,
                         std::span<const bool> mask);

// Sum over rows of weight_i * -log softmax(logits)[target_i]; rows with zero
// weight are skipped. Needs >= 1 nonzero weight.
Var weighted_cross_entropy(Var logits, std::span<const TokenId> targets,
                           std::span<const double> weights);

// Sum over masked rows of KL(softmax(logits) || reference), with the
// reference distribution given as log-probabilities [T,V].
Var masked_kl(Var logits, const Tensor& reference_log_probs, std::span<const bool> mask);
Var weighted_kl(Var logits, const Tensor& reference_log_probs, std::span<const double> weights);

// Multi-head causal self-attention over q, k, v [n, d] (heads are column
// blocks). Rows are split into consecutive segments of the given lengths
// (empty: one segment) and attend only within their own segment.
Var causal_attention(Var q, Var k, Var v, std::size_t num_heads,
                     std::span<const std::size_t> segments = {});

}  // namespace ops

// Row-wise log-softmax of a plain tensor.
Tensor log_softmax_rows(const Tensor& logits);

}  // namespace ulab
