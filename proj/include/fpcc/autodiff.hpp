// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fpcc/tensor.hpp"

namespace fpcc {

using NodeId = std::size_t;

enum class OpKind {
  matmul,
  conv2d,
  channel_bias,
  avgpool2,
  relu,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  abs,
  sqrt,
  exp,
  log,
  sum_axis,
  mean_axis,
  sum_all,
  reshape,
  gather_rows,
  softmax_cross_entropy,
  feature_pattern,
};

std::string_view op_name(OpKind kind);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Receives the output gradient and accumulates into the input gradients.
/// Entries of `grad_inputs` are null for inputs that need no gradient.
using BackwardFn =
    std::function<void(const Tensor& grad_output, std::span<Tensor* const> grad_inputs)>;

/// Gradients produced by one reverse pass, indexed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}

  bool has(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  /// Gradient of `v`; a zero tensor if the node was not reached.
  Tensor of(const Var& v) const;
  const Tensor* find(NodeId id) const { return has(id) ? &*grads_[id] : nullptr; }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in execution order, so every record's inputs precede
/// it and a single reverse sweep over the records yields exact gradients.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameter, image batch under attack, ...).
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  /// Appends a primitive. The output is checked for non-finite values.
  Var record(OpKind kind, std::vector<NodeId> inputs, Tensor output, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }
  OpKind record_kind(std::size_t i) const { return records_[i].kind; }

  /// Reverse pass seeded with d(loss)/d(loss) = 1. `loss` must hold one element.
  Gradients backward(const Var& loss);

  /// Number of records visited by the most recent backward().
  std::size_t last_visit_count() const { return last_visits_; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
  };
  struct Record {
    OpKind kind;
    std::vector<NodeId> inputs;
    NodeId output;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable references across appends
  std::vector<Record> records_;
  std::size_t last_visits_ = 0;
};

// ---- primitives -----------------------------------------------------------

/// [M,K] x [K,N] -> [M,N].
Var matmul(const Var& a, const Var& b);

/// Valid cross-correlation: input [B,C,H,W], kernel [F,C,kH,kW] -> [B,F,H',W'],
/// H' = (H - kH) / stride + 1.
Var conv2d(const Var& input, const Var& kernel, std::size_t stride = 1);

/// Adds bias [C] to every spatial position of channel c of [B,C,H,W].
Var add_channel_bias(const Var& input, const Var& bias);

/// Non-overlapping 2x2 mean pooling of [B,C,H,W]; H and W must be even.
Var avgpool2(const Var& input);

Var relu(const Var& x);

// Binary elementwise ops. `b` may equal `a`'s shape, be a suffix of it
// (bias-style, e.g. [N] against [M,N]), keep `a`'s leading dims with
// trailing size-1 axes (e.g. [M,1] against [M,N]), or hold a single element.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// Throws NumericError if any |denominator| < 1e-12.
Var div(const Var& a, const Var& b);

Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
/// Subgradient at 0 is 0.
Var abs(const Var& x);
/// Throws NumericError for negative inputs.
Var sqrt(const Var& x);
Var exp(const Var& x);
/// Throws NumericError for non-positive inputs.
Var log(const Var& x);

Var sum_axis(const Var& x, std::size_t axis, bool keepdim = false);
Var mean_axis(const Var& x, std::size_t axis, bool keepdim = false);
/// Sum of every element, rank-0 result.
Var sum(const Var& x);
Var mean(const Var& x);

Var reshape(const Var& x, Shape shape);

/// Rows of table [K,D] selected by `indices` -> [B,D]; gradients scatter-add.
Var gather_rows(const Var& table, std::span<const std::size_t> indices);

enum class Reduction { mean, sum };

struct CrossEntropyResult {
  Var loss;             ///< rank-0
  Tensor probabilities; ///< [B,K] softmax of the logits
};

/// -log softmax(z_i)[y_i] reduced over the batch, max-subtracted for
/// stability. Throws IndexError for labels outside [0,K).
CrossEntropyResult softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels,
                                         Reduction reduction = Reduction::mean);

/// Row-wise softmax of a [B,K] tensor without touching any tape.
Tensor softmax(const Tensor& logits);

// ---- gradient checking ----------------------------------------------------

struct GradientReport {
  double max_rel_error = 0.0;
  double step = 0.0;
  std::vector<std::size_t> coordinates;  ///< checked coordinates
  std::vector<double> rel_errors;        ///< per coordinate
  std::vector<double> analytic;
  std::vector<double> numeric;
  /// Coordinates where f is not smooth within +-h (one-sided slopes differ).
  std::vector<std::size_t> kinks;
  /// Largest error over coordinates not flagged as kinks.
  double max_rel_error_smooth = 0.0;
};

/// |a - f| / max(|a|, |f|, 1e-8).
double relative_error(double analytic, double numeric);

/// Scalar function of one tensor, built on a fresh tape per call.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Central differences (f(x+h e) - f(x-h e)) / 2h against the reverse-mode
/// gradient. Checks every coordinate when `coordinates` is empty.
GradientReport grad_check(const ScalarFn& f, const Tensor& point, double h = 1e-5,
                          std::vector<std::size_t> coordinates = {});

}  // namespace fpcc
