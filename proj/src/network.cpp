// SPDX-License-Identifier: Apache-2.0
#include "fpcc/network.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fpcc/errors.hpp"

namespace fpcc {

std::vector<std::string> InsertionPlan::pro_sites() const {
  std::vector<std::string> out;
  for (const auto& e : entries) out.push_back(e.pro_site);
  return out;
}

InsertionPlan InsertionPlan::at_sites(const std::vector<std::string>& sites) {
  InsertionPlan plan;
  for (const auto& s : sites) plan.entries.push_back({s, 1, std::nullopt});
  return plan;
}

LayerSpec LayerSpec::dense(std::size_t units, std::string hook) {
  return {LayerKind::dense, units, 0, 1, std::move(hook)};
}
LayerSpec LayerSpec::conv(std::size_t filters, std::size_t kernel, std::size_t stride,
                          std::string hook) {
  return {LayerKind::conv, filters, kernel, stride, std::move(hook)};
}
LayerSpec LayerSpec::relu(std::string hook) { return {LayerKind::relu, 0, 0, 1, std::move(hook)}; }
LayerSpec LayerSpec::avgpool2(std::string hook) {
  return {LayerKind::avgpool2, 0, 0, 1, std::move(hook)};
}
LayerSpec LayerSpec::flatten(std::string hook) {
  return {LayerKind::flatten, 0, 0, 1, std::move(hook)};
}

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool2: return "avgpool2";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (LayerKind k : {LayerKind::dense, LayerKind::conv, LayerKind::relu, LayerKind::avgpool2,
                      LayerKind::flatten})
    if (layer_kind_name(k) == name) return k;
  throw ConfigError("unknown layer kind '" + name + "'");
}

NetworkSpec NetworkSpec::desk_mlp(std::size_t classes, Shape input_shape) {
  NetworkSpec n;
  n.input_shape = std::move(input_shape);
  n.classes = classes;
  n.layers = {LayerSpec::flatten(),     LayerSpec::dense(256), LayerSpec::relu("h1"),
              LayerSpec::dense(128),    LayerSpec::relu("h2"), LayerSpec::dense(64),
              LayerSpec::relu("h3"),    LayerSpec::dense(classes)};
  return n;
}

NetworkSpec NetworkSpec::desk_cnn(std::size_t classes, Shape input_shape) {
  NetworkSpec n;
  n.input_shape = std::move(input_shape);
  n.classes = classes;
  n.layers = {LayerSpec::conv(16, 5),      LayerSpec::relu(), LayerSpec::avgpool2("block1"),
              LayerSpec::conv(32, 3),      LayerSpec::relu(), LayerSpec::avgpool2("block2"),
              LayerSpec::flatten(),        LayerSpec::dense(128), LayerSpec::relu("fc1"),
              LayerSpec::dense(classes)};
  return n;
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
  if (input_shape.empty()) throw ConfigError("network input shape is empty");
  std::vector<Shape> shapes;
  Shape s = input_shape;
  for (const auto& layer : layers) {
    switch (layer.kind) {
      case LayerKind::dense:
        if (s.size() != 1)
          throw DimensionError("dense layer needs a flat input, got " + shape_string(s));
        if (layer.units == 0) throw ConfigError("dense layer with zero units");
        s = {layer.units};
        break;
      case LayerKind::conv: {
        if (s.size() != 3)
          throw DimensionError("conv layer needs a [C,H,W] input, got " + shape_string(s));
        if (layer.units == 0 || layer.kernel == 0 || layer.stride == 0)
          throw ConfigError("conv layer with zero filters, kernel or stride");
        if (layer.kernel > s[1] || layer.kernel > s[2])
          throw DimensionError("conv kernel larger than input " + shape_string(s));
        s = {layer.units, (s[1] - layer.kernel) / layer.stride + 1,
             (s[2] - layer.kernel) / layer.stride + 1};
        break;
      }
      case LayerKind::avgpool2:
        if (s.size() != 3 || s[1] % 2 || s[2] % 2)
          throw DimensionError("avgpool2 needs an even [C,H,W] input, got " + shape_string(s));
        s = {s[0], s[1] / 2, s[2] / 2};
        break;
      case LayerKind::flatten: s = {shape_size(s)}; break;
      case LayerKind::relu: break;
    }
    shapes.push_back(s);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  if (classes < 2) throw ConfigError("a classifier needs at least two classes");
  const auto shapes = layer_shapes();
  if (shapes.empty() || shapes.back() != Shape{classes})
    throw ConfigError("network output " + (shapes.empty() ? "[]" : shape_string(shapes.back())) +
                      " does not match class count " + std::to_string(classes));
  std::set<std::string> seen;
  for (const auto& layer : layers)
    if (!layer.hook.empty() && !seen.insert(layer.hook).second)
      throw ConfigError("duplicate hook site '" + layer.hook + "'");
}

std::vector<std::string> NetworkSpec::hook_sites() const {
  std::vector<std::string> out;
  for (const auto& layer : layers)
    if (!layer.hook.empty()) out.push_back(layer.hook);
  return out;
}

std::size_t NetworkSpec::hook_layer(const std::string& site) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].hook == site) return i;
  throw ConfigError("unknown hook site '" + site + "'");
}

std::size_t NetworkSpec::feature_dim(const std::string& site) const {
  return layer_shapes()[hook_layer(site)][0];
}

std::size_t Params::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

Params init_params(const NetworkSpec& net, std::uint64_t seed) {
  net.validate();
  Rng rng(seed);
  Params p;
  Shape s = net.input_shape;
  const auto shapes = net.layer_shapes();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& layer = net.layers[i];
    if (layer.parametric()) {
      Shape wshape;
      std::size_t fan_in = 0;
      if (layer.kind == LayerKind::dense) {
        wshape = {s[0], layer.units};
        fan_in = s[0];
      } else {
        wshape = {layer.units, s[0], layer.kernel, layer.kernel};
        fan_in = s[0] * layer.kernel * layer.kernel;
      }
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      Tensor w(wshape);
      for (double& v : w.data()) v = normal(rng);
      const std::string stem = "layer" + std::to_string(i) + "." + layer_kind_name(layer.kind);
      p.tensors.push_back(std::move(w));
      p.names.push_back(stem + ".weight");
      p.tensors.emplace_back(Shape{layer.units});
      p.names.push_back(stem + ".bias");
    }
    s = shapes[i];
  }
  return p;
}

Tensor cfs_mask(std::size_t dim, double gamma, Rng& rng) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
  if (dim == 0) throw DimensionError("mask dimension must be positive");
  Tensor m({dim});
  std::bernoulli_distribution keep(1.0 - gamma);
  for (double& v : m.data()) v = keep(rng) ? 1.0 : 0.0;
  return m;
}

Tensor dropout_scaled(std::size_t dim, double gamma, Rng& rng) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("dropout needs gamma in [0,1)");
  Tensor m = cfs_mask(dim, gamma, rng);
  const double s = 1.0 / (1.0 - gamma);
  for (double& v : m.data()) v *= s;
  return m;
}

std::vector<Var> bind_params(Tape& tape, const Params& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(trainable ? tape.leaf(t) : tape.constant(t));
  return vars;
}

Var spatial_mean(const Var& feature_map) {
  const Shape& s = feature_map.shape();
  if (s.size() != 4)
    throw DimensionError("spatial_mean expects [B,D,H,W], got " + shape_string(s));
  return mean_axis(reshape(feature_map, {s[0], s[1], s[2] * s[3]}), 2);
}

namespace {

struct ResolvedEntry {
  std::string site;
  std::size_t cfs_layer;
  double gamma;
};

std::vector<ResolvedEntry> resolve(const NetworkSpec& net, const TrainHooks& hooks) {
  std::vector<ResolvedEntry> out;
  if (!hooks.plan) return out;
  std::set<std::string> seen;
  for (const auto& e : hooks.plan->entries) {
    if (!seen.insert(e.pro_site).second)
      throw ConfigError("plan pairs share the PRO site '" + e.pro_site + "'");
    if (e.gap == 0) throw ConfigError("CFS gap must be at least 1");
    const std::size_t hook = net.hook_layer(e.pro_site);
    std::size_t remaining = e.gap;
    std::size_t layer = hook + 1;
    while (layer > 0 && remaining > 0) {
      --layer;
      if (net.layers[layer].parametric()) --remaining;
    }
    if (remaining > 0)
      throw ConfigError("site '" + e.pro_site + "' has fewer than " + std::to_string(e.gap) +
                        " parametric layers before it");
    const double g = e.gamma.value_or(hooks.gamma);
    if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
    out.push_back({e.pro_site, layer, g});
  }
  return out;
}

// Per-sample mask over the feature dimensions of `x`: one entry per channel
// for multi-channel maps, one per element otherwise.
Tensor batch_mask(const Shape& x, double gamma, MaskKind kind, Rng& rng) {
  const std::size_t B = x[0];
  Shape ms;
  std::size_t dim = 0;
  if (x.size() == 4 && x[1] > 1) {
    ms = {B, x[1], 1, 1};
    dim = x[1];
  } else {
    ms = x;
    dim = shape_size(x) / B;
  }
  Tensor m(ms);
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor row = kind == MaskKind::select ? cfs_mask(dim, gamma, rng)
                                                : dropout_scaled(dim, gamma, rng);
    std::copy(row.data().begin(), row.data().end(), m.data().begin() + b * dim);
  }
  return m;
}

}  // namespace

ForwardRecord forward(const NetworkSpec& net, std::span<const Var> params, const Var& batch,
                      const TrainHooks& hooks, const std::vector<std::string>& export_sites) {
  const Shape& bs = batch.shape();
  if (bs.size() != net.input_shape.size() + 1 ||
      !std::equal(net.input_shape.begin(), net.input_shape.end(), bs.begin() + 1))
    throw DimensionError("batch " + shape_string(bs) + " does not match network input " +
                         shape_string(net.input_shape));
  const auto entries = resolve(net, hooks);
  if (!entries.empty() && !hooks.rng) throw ConfigError("train-mode forward needs an RNG");

  std::set<std::string> exports;
  if (hooks.plan)
    for (const auto& e : entries) exports.insert(e.site);
  else
    for (const auto& s : export_sites) {
      net.hook_layer(s);
      exports.insert(s);
    }

  Tape& tape = batch.tape();
  ForwardRecord rec;
  Var h = batch;
  std::size_t p = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& layer = net.layers[i];
    for (const auto& e : entries)
      if (e.cfs_layer == i) h = mul(h, tape.constant(batch_mask(h.shape(), e.gamma, hooks.kind,
                                                                 *hooks.rng)));
    switch (layer.kind) {
      case LayerKind::dense:
        h = add(matmul(h, params[p]), params[p + 1]);
        p += 2;
        break;
      case LayerKind::conv:
        h = add_channel_bias(conv2d(h, params[p], layer.stride), params[p + 1]);
        p += 2;
        break;
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::avgpool2: h = avgpool2(h); break;
      case LayerKind::flatten: h = reshape(h, {h.shape()[0], shape_size(h.shape()) / h.shape()[0]}); break;
    }
    if (!layer.hook.empty() && exports.count(layer.hook))
      rec.features[layer.hook] = h.shape().size() == 4 ? spatial_mean(h) : h;
  }
  if (p != params.size()) throw ConfigError("parameter count does not match the network");
  rec.logits = h;
  return rec;
}

InputGradient input_gradient(const NetworkSpec& net, const Params& params, const Tensor& batch,
                             std::span<const std::size_t> labels, const TrainHooks& hooks) {
  Tape tape;
  auto pv = bind_params(tape, params, false);
  Var x = tape.leaf(batch);
  auto rec = forward(net, pv, x, hooks);
  auto ce = softmax_cross_entropy(rec.logits, labels);
  auto grads = tape.backward(ce.loss);
  return {grads.of(x), ce.loss.value().item(), rec.logits.value()};
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin >= end || end > t.dim(0))
    throw DimensionError("bad row slice of " + shape_string(t.shape()));
  Shape s = t.shape();
  const std::size_t row = t.size() / s[0];
  s[0] = end - begin;
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                           t.data().begin() + static_cast<std::ptrdiff_t>(end * row));
  return Tensor(std::move(s), std::move(data));
}

Tensor predict_logits(const NetworkSpec& net, const Params& params, const Tensor& images,
                      std::size_t chunk) {
  const std::size_t n = images.dim(0);
  std::vector<double> out;
  out.reserve(n * net.classes);
  for (std::size_t b = 0; b < n; b += chunk) {
    Tape tape;
    auto pv = bind_params(tape, params, false);
    auto rec = forward(net, pv, tape.constant(slice_rows(images, b, std::min(n, b + chunk))));
    const auto& d = rec.logits.value().data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return Tensor({n, net.classes}, std::move(out));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = logits.data().data() + b * K;
    out[b] = static_cast<std::size_t>(std::max_element(row, row + K) - row);
  }
  return out;
}

}  // namespace fpcc
