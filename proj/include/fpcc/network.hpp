// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fpcc/autodiff.hpp"
#include "fpcc/plan.hpp"
#include "fpcc/rng.hpp"

namespace fpcc {

enum class LayerKind { dense, conv, relu, avgpool2, flatten };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;   ///< dense: output width; conv: filter count
  std::size_t kernel = 0;  ///< conv: square kernel size
  std::size_t stride = 1;  ///< conv
  std::string hook;        ///< optional hook-site name exporting this layer's output

  static LayerSpec dense(std::size_t units, std::string hook = {});
  static LayerSpec conv(std::size_t filters, std::size_t kernel, std::size_t stride = 1,
                        std::string hook = {});
  static LayerSpec relu(std::string hook = {});
  static LayerSpec avgpool2(std::string hook = {});
  static LayerSpec flatten(std::string hook = {});

  bool parametric() const { return kind == LayerKind::dense || kind == LayerKind::conv; }
};

std::string layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Shape input_shape;  ///< per-sample shape, e.g. {1, 28, 28}
  std::size_t classes = 0;

  /// flatten-784-256-128-64-K with hook sites after each hidden ReLU.
  static NetworkSpec desk_mlp(std::size_t classes = 10, Shape input_shape = {1, 28, 28});
  /// conv5x5(16)-relu-pool-conv3x3(32)-relu-pool-flatten-dense128-relu-dense K,
  /// hooks after each conv block and after dense128.
  static NetworkSpec desk_cnn(std::size_t classes = 10, Shape input_shape = {1, 28, 28});

  /// Throws ConfigError/DimensionError if shapes do not chain, the output
  /// width differs from `classes`, or hook names repeat.
  void validate() const;

  /// Per-sample output shape of every layer.
  std::vector<Shape> layer_shapes() const;
  /// Hook-site names, shallow to deep.
  std::vector<std::string> hook_sites() const;
  std::size_t hook_layer(const std::string& site) const;
  /// Width D of the latent feature exported at `site` (channels for conv maps).
  std::size_t feature_dim(const std::string& site) const;
};

/// Weights and biases of every parametric layer, in layer order
/// (weight then bias). Dense weights are [in, out]; conv kernels [F, C, k, k].
struct Params {
  std::vector<Tensor> tensors;
  std::vector<std::string> names;

  std::size_t count() const;
  friend bool operator==(const Params&, const Params&) = default;
};

/// Fan-in scaled normal weights (std sqrt(2 / fan_in)), zero biases.
Params init_params(const NetworkSpec& net, std::uint64_t seed);

/// Bernoulli selection mask over D entries: each kept (1) with probability
/// 1 - gamma, else 0. No rescaling.
Tensor cfs_mask(std::size_t dim, double gamma, Rng& rng);

/// cfs_mask scaled by 1 / (1 - gamma), i.e. classic dropout. gamma < 1.
Tensor dropout_scaled(std::size_t dim, double gamma, Rng& rng);

enum class MaskKind { select, dropout };

/// Stochastic training hooks for one forward pass.
struct TrainHooks {
  const InsertionPlan* plan = nullptr;
  double gamma = 0.2;
  MaskKind kind = MaskKind::select;
  Rng* rng = nullptr;
};

struct ForwardRecord {
  Var logits;
  /// Latent features [B, D] per exported site (spatially averaged for conv maps).
  std::map<std::string, Var> features;
};

/// Binds parameters onto `tape`, as leaves when `trainable`, else constants.
std::vector<Var> bind_params(Tape& tape, const Params& params, bool trainable);

/// Runs the network on `batch` [B, input_shape...].
///
/// With `hooks.plan` set (train mode) each entry's selection mask is applied
/// at its CFS location and the paired PRO site's features are exported.
/// Without a plan the plain network runs; `export_sites` then chooses which
/// hook features to record.
ForwardRecord forward(const NetworkSpec& net, std::span<const Var> params, const Var& batch,
                      const TrainHooks& hooks = {},
                      const std::vector<std::string>& export_sites = {});

/// Mean over H and W of a [B, D, H, W] map -> [B, D].
Var spatial_mean(const Var& feature_map);

/// Gradient of the mean cross-entropy with respect to the input images.
struct InputGradient {
  Tensor gradient;
  double loss = 0.0;
  Tensor logits;
};

InputGradient input_gradient(const NetworkSpec& net, const Params& params, const Tensor& batch,
                             std::span<const std::size_t> labels, const TrainHooks& hooks = {});

/// Eval-mode logits without gradients, evaluated in chunks.
Tensor predict_logits(const NetworkSpec& net, const Params& params, const Tensor& images,
                      std::size_t chunk = 256);

/// Rows [begin, end) of a batch-major tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);

std::vector<std::size_t> argmax_rows(const Tensor& logits);

}  // namespace fpcc
