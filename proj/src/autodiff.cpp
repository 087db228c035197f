// SPDX-License-Identifier: Apache-2.0
#include "fpcc/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "fpcc/errors.hpp"

namespace fpcc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

MutMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank)
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_string(v.shape()));
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

// How the second operand of a binary op maps onto the first.
struct Broadcast {
  enum Kind { same, scalar, suffix, keepdim } kind;
  std::size_t inner = 1;  // keepdim: elements of a per element of b

  std::size_t index(std::size_t i, std::size_t b_size) const {
    switch (kind) {
      case same: return i;
      case scalar: return 0;
      case suffix: return i % b_size;
      case keepdim: return i / inner;
    }
    return 0;
  }
};

Broadcast classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return {Broadcast::same};
  if (shape_size(b) == 1) return {Broadcast::scalar};
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin()))
    return {Broadcast::suffix};
  if (b.size() == a.size()) {
    std::size_t k = 0;
    while (k < a.size() && a[k] == b[k]) ++k;
    bool trailing_ones = k < a.size();
    for (std::size_t j = k; j < b.size(); ++j) trailing_ones = trailing_ones && b[j] == 1;
    if (trailing_ones) {
      std::size_t inner = 1;
      for (std::size_t j = k; j < a.size(); ++j) inner *= a[j];
      return {Broadcast::keepdim, inner};
    }
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b) + " onto " +
                       shape_string(a));
}

template <typename Fwd, typename GradA, typename GradB>
Var binary(OpKind kind, const Var& a, const Var& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  require_same_tape(a, b);
  const auto name = std::string(op_name(kind));
  const Broadcast bc = classify(a.shape(), b.shape(), name.c_str());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[bc.index(i, nb)]);
  Tape* tape = &a.tape();
  const NodeId ia = a.id(), ib = b.id();
  return tape->record(kind, {ia, ib}, std::move(out),
                      [tape, ia, ib, bc, grad_a, grad_b](const Tensor& g,
                                                         std::span<Tensor* const> gin) {
                        const Tensor& x = tape->value(ia);
                        const Tensor& y = tape->value(ib);
                        const std::size_t n = y.size();
                        if (gin[0]) {
                          Tensor& ga = *gin[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            ga[i] += grad_a(g[i], x[i], y[bc.index(i, n)]);
                        }
                        if (gin[1]) {
                          Tensor& gb = *gin[1];
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const std::size_t j = bc.index(i, n);
                            gb[j] += grad_b(g[i], x[i], y[j]);
                          }
                        }
                      });
}

template <typename Fwd, typename Grad>
Var unary(OpKind kind, const Var& x, Fwd fwd, Grad grad) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  Tape* tape = &x.tape();
  const NodeId ix = x.id();
  const NodeId io = tape->node_count();  // id the output will receive
  return tape->record(kind, {ix}, std::move(out),
                      [tape, ix, io, grad](const Tensor& g, std::span<Tensor* const> gin) {
                        if (!gin[0]) return;
                        const Tensor& xv = tape->value(ix);
                        const Tensor& yv = tape->value(io);
                        Tensor& gx = *gin[0];
                        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += grad(g[i], xv[i], yv[i]);
                      });
}

// Splits a shape around `axis` into (outer, n, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Var reduce_axis(OpKind kind, const Var& x, std::size_t axis, bool keepdim, double factor) {
  const Shape& in = x.shape();
  const AxisSplit sp = split_axis(in, axis);
  Shape out_shape = in;
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) acc += xv[(o * sp.n + k) * sp.inner + i];
      out[o * sp.inner + i] = acc * factor;
    }
  return x.tape().record(kind, {x.id()}, std::move(out),
                         [sp, factor](const Tensor& g, std::span<Tensor* const> gin) {
                           if (!gin[0]) return;
                           Tensor& gx = *gin[0];
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t i = 0; i < sp.inner; ++i) {
                               const double v = g[o * sp.inner + i] * factor;
                               for (std::size_t k = 0; k < sp.n; ++k)
                                 gx[(o * sp.n + k) * sp.inner + i] += v;
                             }
                         });
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::channel_bias: return "channel_bias";
    case OpKind::avgpool2: return "avgpool2";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::abs: return "abs";
    case OpKind::sqrt: return "sqrt";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::mean_axis: return "mean_axis";
    case OpKind::sum_all: return "sum";
    case OpKind::reshape: return "reshape";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::feature_pattern: return "feature_pattern";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Gradients::of(const Var& v) const {
  if (const Tensor* g = find(v.id())) return *g;
  return Tensor(v.shape());
}

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  nodes_.push_back({std::move(value), true});
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  nodes_.push_back({std::move(value), false});
  return {this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, std::vector<NodeId> inputs, Tensor output, BackwardFn backward) {
  require_finite(output, std::string(op_name(kind)) + " output");
  bool needs_grad = false;
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw ContractError("record input refers to a future node");
    needs_grad = needs_grad || nodes_[in].requires_grad;
  }
  nodes_.push_back({std::move(output), needs_grad});
  const NodeId out = nodes_.size() - 1;
  records_.push_back({kind, std::move(inputs), out, std::move(backward)});
  return {this, out};
}

Gradients Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
  if (loss.value().size() != 1)
    throw ContractError("backward seed must be a scalar, got " + shape_string(loss.shape()));
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[loss.id()] = Tensor(loss.shape(), 1.0);
  last_visits_ = 0;
  std::vector<Tensor*> gin;
  for (auto r = records_.rbegin(); r != records_.rend(); ++r) {
    ++last_visits_;
    if (!grads[r->output] || !nodes_[r->output].requires_grad) continue;
    gin.assign(r->inputs.size(), nullptr);
    for (std::size_t k = 0; k < r->inputs.size(); ++k) {
      const NodeId in = r->inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape());
      gin[k] = &*grads[in];
    }
    r->backward(*grads[r->output], gin);
  }
  for (auto& g : grads)
    if (g) require_finite(*g, "gradient");
  return Gradients(std::move(grads));
}

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  Tensor out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  Tape* tape = &a.tape();
  const NodeId ia = a.id(), ib = b.id();
  return tape->record(OpKind::matmul, {ia, ib}, std::move(out),
                      [tape, ia, ib, m, k, n](const Tensor& g, std::span<Tensor* const> gin) {
                        const auto gm = as_matrix(g, m, n);
                        if (gin[0])
                          as_matrix(*gin[0], m, k).noalias() +=
                              gm * as_matrix(tape->value(ib), k, n).transpose();
                        if (gin[1])
                          as_matrix(*gin[1], k, n).noalias() +=
                              as_matrix(tape->value(ia), m, k).transpose() * gm;
                      });
}

Var conv2d(const Var& input, const Var& kernel, std::size_t stride) {
  require_same_tape(input, kernel);
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t F = ks[0], kh = ks[2], kw = ks[3];
  if (ks[1] != C)
    throw DimensionError("conv2d channel mismatch: input " + shape_string(xs) + ", kernel " +
                         shape_string(ks));
  if (kh > H || kw > W)
    throw DimensionError("conv2d kernel " + shape_string(ks) + " larger than input " +
                         shape_string(xs));
  const std::size_t Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  const std::size_t P = Ho * Wo, Q = C * kh * kw, cols_n = B * P;

  // cols[q, b*P + p] = x[b, c, oh*stride + i, ow*stride + j]
  auto cols = std::make_shared<Tensor>(Shape{Q, cols_n});
  const Tensor& xv = input.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = cols->data().data() + ((c * kh + i) * kw + j) * cols_n;
        for (std::size_t b = 0; b < B; ++b) {
          const double* plane = xv.data().data() + (b * C + c) * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const double* src = plane + (oh * stride + i) * W + j;
            double* dst = row + b * P + oh * Wo;
            for (std::size_t ow = 0; ow < Wo; ++ow) dst[ow] = src[ow * stride];
          }
        }
      }

  Tensor prod({F, cols_n});
  as_matrix(prod, F, cols_n).noalias() =
      as_matrix(kernel.value(), F, Q) * as_matrix(*cols, Q, cols_n);
  Tensor out({B, F, Ho, Wo});
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(prod.data().data() + f * cols_n + b * P, P,
                  out.data().data() + (b * F + f) * P);

  Tape* tape = &input.tape();
  const NodeId ix = input.id(), ik = kernel.id();
  return tape->record(
      OpKind::conv2d, {ix, ik}, std::move(out),
      [tape, ik, cols, B, C, H, W, F, kh, kw, stride, Ho, Wo, P, Q, cols_n](
          const Tensor& g, std::span<Tensor* const> gin) {
        Tensor gm({F, cols_n});
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t b = 0; b < B; ++b)
            std::copy_n(g.data().data() + (b * F + f) * P, P,
                        gm.data().data() + f * cols_n + b * P);
        if (gin[1])
          as_matrix(*gin[1], F, Q).noalias() +=
              as_matrix(gm, F, cols_n) * as_matrix(*cols, Q, cols_n).transpose();
        if (gin[0]) {
          Tensor dcols({Q, cols_n});
          as_matrix(dcols, Q, cols_n).noalias() =
              as_matrix(tape->value(ik), F, Q).transpose() * as_matrix(gm, F, cols_n);
          Tensor& gx = *gin[0];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const double* row = dcols.data().data() + ((c * kh + i) * kw + j) * cols_n;
                for (std::size_t b = 0; b < B; ++b) {
                  double* plane = gx.data().data() + (b * C + c) * H * W;
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    double* dst = plane + (oh * stride + i) * W + j;
                    const double* src = row + b * P + oh * Wo;
                    for (std::size_t ow = 0; ow < Wo; ++ow) dst[ow * stride] += src[ow];
                  }
                }
              }
        }
      });
}

Var add_channel_bias(const Var& input, const Var& bias) {
  require_same_tape(input, bias);
  require_rank(input, 4, "add_channel_bias");
  const Shape& xs = input.shape();
  const std::size_t B = xs[0], C = xs[1], P = xs[2] * xs[3];
  if (bias.value().size() != C)
    throw DimensionError("channel bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(xs));
  Tensor out = input.value();
  const Tensor& bv = bias.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data().data() + (b * C + c) * P;
      for (std::size_t k = 0; k < P; ++k) p[k] += bv[c];
    }
  return input.tape().record(OpKind::channel_bias, {input.id(), bias.id()}, std::move(out),
                             [B, C, P](const Tensor& g, std::span<Tensor* const> gin) {
                               if (gin[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                               if (gin[1])
                                 for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t c = 0; c < C; ++c) {
                                     const double* p = g.data().data() + (b * C + c) * P;
                                     double acc = 0.0;
                                     for (std::size_t k = 0; k < P; ++k) acc += p[k];
                                     (*gin[1])[c] += acc;
                                   }
                             });
}

Var avgpool2(const Var& input) {
  require_rank(input, 4, "avgpool2");
  const Shape& xs = input.shape();
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw DimensionError("avgpool2 needs even spatial dims, got " + shape_string(xs));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({B, C, Ho, Wo});
  const Tensor& xv = input.value();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = xv.data().data() + bc * H * W;
    double* dst = out.data().data() + bc * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const double* s = src + 2 * i * W + 2 * j;
        dst[i * Wo + j] = (s[0] + s[1] + s[W] + s[W + 1]) * 0.25;
      }
  }
  return input.tape().record(OpKind::avgpool2, {input.id()}, std::move(out),
                             [B, C, H, W, Ho, Wo](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (std::size_t bc = 0; bc < B * C; ++bc) {
                                 const double* src = g.data().data() + bc * Ho * Wo;
                                 double* dst = gin[0]->data().data() + bc * H * W;
                                 for (std::size_t i = 0; i < Ho; ++i)
                                   for (std::size_t j = 0; j < Wo; ++j) {
                                     const double v = src[i * Wo + j] * 0.25;
                                     double* d = dst + 2 * i * W + 2 * j;
                                     d[0] += v;
                                     d[1] += v;
                                     d[W] += v;
                                     d[W + 1] += v;
                                   }
                               }
                             });
}

Var relu(const Var& x) {
  return unary(
      OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

Var add(const Var& a, const Var& b) {
  return binary(
      OpKind::add, a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      OpKind::sub, a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      OpKind::mul, a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var div(const Var& a, const Var& b) {
  for (double d : b.value().data())
    if (std::abs(d) < 1e-12) throw NumericError("division by a value with magnitude < 1e-12");
  return binary(
      OpKind::div, a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Var scale(const Var& x, double factor) {
  return unary(
      OpKind::scale, x, [factor](double v) { return v * factor; },
      [factor](double g, double, double) { return g * factor; });
}

Var add_scalar(const Var& x, double offset) {
  return unary(
      OpKind::add_scalar, x, [offset](double v) { return v + offset; },
      [](double g, double, double) { return g; });
}

Var abs(const Var& x) {
  return unary(
      OpKind::abs, x, [](double v) { return std::abs(v); },
      [](double g, double v, double) { return v > 0.0 ? g : (v < 0.0 ? -g : 0.0); });
}

Var sqrt(const Var& x) {
  for (double v : x.value().data())
    if (v < 0.0) throw NumericError("sqrt of a negative value");
  return unary(
      OpKind::sqrt, x, [](double v) { return std::sqrt(v); },
      [](double g, double, double y) { return g * 0.5 / y; });
}

Var exp(const Var& x) {
  return unary(
      OpKind::exp, x, [](double v) { return std::exp(v); },
      [](double g, double, double y) { return g * y; });
}

Var log(const Var& x) {
  for (double v : x.value().data())
    if (v <= 0.0) throw NumericError("log of a non-positive value");
  return unary(
      OpKind::log, x, [](double v) { return std::log(v); },
      [](double g, double v, double) { return g / v; });
}

Var sum_axis(const Var& x, std::size_t axis, bool keepdim) {
  return reduce_axis(OpKind::sum_axis, x, axis, keepdim, 1.0);
}

Var mean_axis(const Var& x, std::size_t axis, bool keepdim) {
  const double n = static_cast<double>(split_axis(x.shape(), axis).n);
  return reduce_axis(OpKind::mean_axis, x, axis, keepdim, 1.0 / n);
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.tape().record(OpKind::sum_all, {x.id()}, Tensor::scalar(acc),
                         [](const Tensor& g, std::span<Tensor* const> gin) {
                           if (!gin[0]) return;
                           const double v = g[0];
                           for (double& d : gin[0]->data()) d += v;
                         });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(OpKind::reshape, {x.id()}, std::move(out),
                         [](const Tensor& g, std::span<Tensor* const> gin) {
                           if (!gin[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                         });
}

Var gather_rows(const Var& table, std::span<const std::size_t> indices) {
  require_rank(table, 2, "gather_rows");
  const std::size_t K = table.shape()[0], D = table.shape()[1], B = indices.size();
  if (B == 0) throw DimensionError("gather_rows with no indices");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor out({B, D});
  const Tensor& tv = table.value();
  for (std::size_t b = 0; b < B; ++b) {
    if (idx[b] >= K)
      throw IndexError("row index " + std::to_string(idx[b]) + " outside [0," +
                       std::to_string(K) + ")");
    std::copy_n(tv.data().data() + idx[b] * D, D, out.data().data() + b * D);
  }
  return table.tape().record(OpKind::gather_rows, {table.id()}, std::move(out),
                             [idx = std::move(idx), D](const Tensor& g,
                                                       std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (std::size_t b = 0; b < idx.size(); ++b) {
                                 double* dst = gin[0]->data().data() + idx[b] * D;
                                 const double* src = g.data().data() + b * D;
                                 for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                               }
                             });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects [B,K]");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  Tensor p({B, K});
  for (std::size_t b = 0; b < B; ++b) {
    const double* z = logits.data().data() + b * K;
    double* q = p.data().data() + b * K;
    const double mx = *std::max_element(z, z + K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += (q[k] = std::exp(z[k] - mx));
    for (std::size_t k = 0; k < K; ++k) q[k] /= total;
  }
  return p;
}

CrossEntropyResult softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels,
                                         Reduction reduction) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  if (labels.size() != B)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
  for (std::size_t y : labels)
    if (y >= K)
      throw IndexError("label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");

  const Tensor& z = logits.value();
  auto probs = std::make_shared<Tensor>(softmax(z));
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = z.data().data() + b * K;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + K) - row);
    // log-sum-exp relative to the max; log1p keeps precision for confident rows
    double rest = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      if (k != arg) rest += std::exp(row[k] - row[arg]);
    total += std::log1p(rest) - (row[labels[b]] - row[arg]);
  }
  const double factor = reduction == Reduction::mean ? 1.0 / static_cast<double>(B) : 1.0;
  std::vector<std::size_t> y(labels.begin(), labels.end());
  Var loss = logits.tape().record(
      OpKind::softmax_cross_entropy, {logits.id()}, Tensor::scalar(total * factor),
      [probs, y = std::move(y), K, factor](const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const double s = g[0] * factor;
        Tensor& gz = *gin[0];
        for (std::size_t b = 0; b < y.size(); ++b) {
          for (std::size_t k = 0; k < K; ++k) gz[b * K + k] += s * (*probs)[b * K + k];
          gz[b * K + y[b]] -= s;
        }
      });
  return {loss, *probs};
}

// ---- gradient checking ----------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradientReport grad_check(const ScalarFn& f, const Tensor& point, double h,
                          std::vector<std::size_t> coordinates) {
  if (coordinates.empty()) {
    coordinates.resize(point.size());
    std::iota(coordinates.begin(), coordinates.end(), std::size_t{0});
  }
  Tensor analytic;
  double f0 = 0.0;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var y = f(tape, x);
    f0 = y.value().item();
    analytic = tape.backward(y).of(x);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    return f(tape, tape.constant(at)).value().item();
  };

  GradientReport report;
  report.step = h;
  for (std::size_t c : coordinates) {
    if (c >= point.size()) throw IndexError("grad_check coordinate out of range");
    Tensor plus = point, minus = point;
    plus[c] += h;
    minus[c] -= h;
    const double fp = eval(plus), fm = eval(minus);
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = relative_error(analytic[c], numeric);
    const double right = (fp - f0) / h, left = (f0 - fm) / h;
    const bool kink = std::abs(right - left) > 1e-3 * std::max({1.0, std::abs(right), std::abs(left)});
    report.coordinates.push_back(c);
    report.analytic.push_back(analytic[c]);
    report.numeric.push_back(numeric);
    report.rel_errors.push_back(err);
    report.max_rel_error = std::max(report.max_rel_error, err);
    if (kink)
      report.kinks.push_back(c);
    else
      report.max_rel_error_smooth = std::max(report.max_rel_error_smooth, err);
  }
  return report;
}

}  // namespace fpcc
