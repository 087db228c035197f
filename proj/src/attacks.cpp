// SPDX-License-Identifier: Apache-2.0
#include "fpcc/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "fpcc/errors.hpp"

namespace fpcc {
namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::size_t sample_size(const Tensor& batch) { return batch.size() / batch.dim(0); }

void check_batch(const Classifier& model, const Tensor& batch,
                 std::span<const std::size_t> labels) {
  if (batch.rank() < 2) throw DimensionError("attack batch must be batch-major");
  Shape per(batch.shape().begin() + 1, batch.shape().end());
  if (per != model.input_shape())
    throw DimensionError("attack batch sample shape " + shape_string(per) + " != model input " +
                         shape_string(model.input_shape()));
  if (labels.size() != batch.dim(0)) throw DimensionError("attack label count != batch size");
  for (auto y : labels)
    if (y >= model.classes()) throw IndexError("attack label out of range");
}

double row_norm(std::span<const double> row, Norm norm) {
  double acc = 0.0;
  for (double v : row) acc = norm == Norm::linf ? std::max(acc, std::abs(v)) : acc + v * v;
  return norm == Norm::linf ? acc : std::sqrt(acc);
}

std::vector<double> perturbation_norms(const Tensor& x, const Tensor& adv, Norm norm) {
  const std::size_t B = x.dim(0), n = sample_size(x);
  std::vector<double> out(B);
  std::vector<double> d(n);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n; ++i) d[i] = adv[b * n + i] - x[b * n + i];
    out[b] = row_norm(d, norm);
  }
  return out;
}

/// Projects adv onto the eps-ball around x, then onto the [0, 1] box.
/// l-inf clamps against x +- eps directly, so an exact eps step survives bit for bit.
void project(const Tensor& x, Tensor& adv, double eps, Norm norm) {
  const std::size_t B = x.dim(0), n = sample_size(x);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t o = b * n;
    if (norm == Norm::linf) {
      for (std::size_t i = o; i < o + n; ++i) adv[i] = std::clamp(adv[i], x[i] - eps, x[i] + eps);
    } else {
      double sq = 0.0;
      for (std::size_t i = o; i < o + n; ++i) sq += (adv[i] - x[i]) * (adv[i] - x[i]);
      const double len = std::sqrt(sq);
      if (len > eps) {
        const double s = eps / len;
        for (std::size_t i = o; i < o + n; ++i) adv[i] = x[i] + (adv[i] - x[i]) * s;
      }
    }
    for (std::size_t i = o; i < o + n; ++i) adv[i] = std::clamp(adv[i], 0.0, 1.0);
  }
}

Tensor random_start(const Tensor& x, double eps, Norm norm, Rng& rng) {
  Tensor adv = x;
  const std::size_t B = x.dim(0), n = sample_size(x);
  if (norm == Norm::linf) {
    std::uniform_real_distribution<double> u(-eps, eps);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += u(rng);
  } else {
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> d(n);
    for (std::size_t b = 0; b < B; ++b) {
      for (auto& v : d) v = g(rng);
      const double len = row_norm(d, Norm::l2);
      const double r = eps * u(rng) / std::max(len, 1e-12);
      for (std::size_t i = 0; i < n; ++i) adv[b * n + i] += d[i] * r;
    }
  }
  project(x, adv, eps, norm);
  return adv;
}

struct Gradient {
  Tensor value;
  double loss = 0.0;
};

/// Mean of the loss gradient over `samples` passes (one pass for deterministic models).
Gradient expected_gradient(const Classifier& model, const Tensor& adv,
                           std::span<const std::size_t> labels, std::size_t samples, Rng& rng) {
  const std::size_t passes = model.stochastic() ? samples : 1;
  auto first = model.loss_gradient(adv, labels, rng);
  Gradient g{std::move(first.gradient), first.loss};
  for (std::size_t s = 1; s < passes; ++s) {
    auto next = model.loss_gradient(adv, labels, rng);
    for (std::size_t i = 0; i < g.value.size(); ++i) g.value[i] += next.gradient[i];
    g.loss += next.loss;
  }
  if (passes > 1) {
    const double inv = 1.0 / static_cast<double>(passes);
    for (auto& v : g.value.data()) v *= inv;
    g.loss *= inv;
  }
  return g;
}

enum class StepRule { sign, l2, momentum };

AttackResult iterate(const Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                     const AttackConfig& cfg, Norm norm, StepRule rule, std::size_t samples) {
  check_batch(model, x, labels);
  cfg.validate();
  Rng rng = make_rng(cfg.seed, "attacks");
  Tensor adv = cfg.random_start ? random_start(x, cfg.epsilon, norm, rng) : x;
  const std::size_t B = x.dim(0), n = sample_size(x);
  std::vector<double> velocity(rule == StepRule::momentum ? x.size() : 0, 0.0);

  AttackResult res;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto g = expected_gradient(model, adv, labels, samples, rng);
    res.loss_trace.push_back(g.loss);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t o = b * n;
      std::span<const double> row(g.value.data().subspan(o, n));
      switch (rule) {
        case StepRule::sign:
          for (std::size_t i = o; i < o + n; ++i) adv[i] = adv[i] + cfg.alpha * sign(g.value[i]);
          break;
        case StepRule::l2: {
          const double len = row_norm(row, Norm::l2);
          if (len > 0.0)
            for (std::size_t i = o; i < o + n; ++i) adv[i] += cfg.alpha * g.value[i] / len;
          break;
        }
        case StepRule::momentum: {
          double l1 = 0.0;
          for (double v : row) l1 += std::abs(v);
          const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
          for (std::size_t i = o; i < o + n; ++i) {
            velocity[i] = cfg.decay * velocity[i] + g.value[i] * inv;
            adv[i] += cfg.alpha * sign(velocity[i]);
          }
          break;
        }
      }
    }
    project(x, adv, cfg.epsilon, norm);
    auto norms = perturbation_norms(x, adv, norm);
    res.step_max_norm.push_back(*std::max_element(norms.begin(), norms.end()));
  }
  res.perturbation_norm = perturbation_norms(x, adv, norm);
  res.predictions = argmax_rows(model.logits(adv));
  res.success.resize(B);
  for (std::size_t b = 0; b < B; ++b) res.success[b] = res.predictions[b] != labels[b];
  res.adversarial = std::move(adv);
  return res;
}

}  // namespace

std::string attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::mim: return "mim";
    case AttackKind::pgd_linf: return "pgd-linf";
    case AttackKind::pgd_l2: return "pgd-l2";
    case AttackKind::eot_pgd: return "eot-pgd";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& name) {
  static const std::map<std::string, AttackKind> kinds = {
      {"fgsm", AttackKind::fgsm},         {"bim", AttackKind::bim},
      {"mim", AttackKind::mim},           {"pgd", AttackKind::pgd_linf},
      {"pgd-linf", AttackKind::pgd_linf}, {"pgd-l2", AttackKind::pgd_l2},
      {"eot-pgd", AttackKind::eot_pgd},   {"eot", AttackKind::eot_pgd}};
  auto it = kinds.find(name);
  if (it == kinds.end()) throw ConfigError("unknown attack '" + name + "'");
  return it->second;
}

AttackConfig AttackConfig::defaults(AttackKind kind, double epsilon) {
  AttackConfig c;
  c.kind = kind;
  c.epsilon = epsilon;
  switch (kind) {
    case AttackKind::fgsm:
      c.steps = 1;
      c.alpha = epsilon;
      c.random_start = false;
      break;
    case AttackKind::bim:
      c.steps = 10;
      c.alpha = 2.0 * epsilon / static_cast<double>(c.steps);
      c.random_start = false;
      break;
    case AttackKind::mim:
      c.steps = 10;
      c.alpha = epsilon / static_cast<double>(c.steps);
      c.random_start = false;
      c.decay = 1.0;
      break;
    case AttackKind::pgd_linf:
    case AttackKind::eot_pgd:
      c.steps = 20;
      c.alpha = epsilon / 8.0;
      break;
    case AttackKind::pgd_l2:
      c.steps = 20;
      c.alpha = epsilon / 8.0;
      c.norm = Norm::l2;
      break;
  }
  return c;
}

Norm AttackConfig::effective_norm() const {
  if (kind == AttackKind::pgd_l2) return Norm::l2;
  if (kind == AttackKind::eot_pgd) return norm;
  return Norm::linf;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("attack step size must be >= 0");
  if (steps == 0) throw ConfigError("attack needs at least one step");
  if (eot_samples == 0) throw ConfigError("eot_samples must be positive");
  if (!(decay >= 0.0)) throw ConfigError("momentum decay must be >= 0");
}

double AttackResult::robust_accuracy() const {
  if (success.empty()) return 0.0;
  const auto held = std::count(success.begin(), success.end(), false);
  return static_cast<double>(held) / static_cast<double>(success.size());
}

NetworkClassifier::NetworkClassifier(const NetworkSpec& net, const Params& params)
    : net_(&net), params_(&params) {}

NetworkClassifier::NetworkClassifier(const NetworkSpec& net, const Params& params,
                                     InsertionPlan stochastic_plan, double gamma, MaskKind kind)
    : net_(&net), params_(&params), plan_(std::move(stochastic_plan)), gamma_(gamma), kind_(kind) {
  if (plan_->empty()) plan_.reset();
}

Tensor NetworkClassifier::logits(const Tensor& batch) const {
  return predict_logits(*net_, *params_, batch);
}

InputGradient NetworkClassifier::loss_gradient(const Tensor& batch,
                                               std::span<const std::size_t> labels,
                                               Rng& rng) const {
  if (!plan_) return input_gradient(*net_, *params_, batch, labels);
  TrainHooks hooks{&*plan_, gamma_, kind_, &rng};
  return input_gradient(*net_, *params_, batch, labels, hooks);
}

AttackResult fgsm(const Classifier& model, const Tensor& batch,
                  std::span<const std::size_t> labels, const AttackConfig& cfg) {
  AttackConfig c = cfg;
  c.steps = 1;
  c.alpha = cfg.epsilon;
  c.random_start = false;
  return iterate(model, batch, labels, c, Norm::linf, StepRule::sign, 1);
}

AttackResult pgd(const Classifier& model, const Tensor& batch, std::span<const std::size_t> labels,
                 const AttackConfig& cfg, Norm norm) {
  return iterate(model, batch, labels, cfg, norm, norm == Norm::linf ? StepRule::sign : StepRule::l2,
                 1);
}

AttackResult bim(const Classifier& model, const Tensor& batch, std::span<const std::size_t> labels,
                 const AttackConfig& cfg) {
  AttackConfig c = cfg;
  c.random_start = false;
  return iterate(model, batch, labels, c, Norm::linf, StepRule::sign, 1);
}

AttackResult mim(const Classifier& model, const Tensor& batch, std::span<const std::size_t> labels,
                 const AttackConfig& cfg) {
  return iterate(model, batch, labels, cfg, Norm::linf, StepRule::momentum, 1);
}

AttackResult eot_pgd(const Classifier& model, const Tensor& batch,
                     std::span<const std::size_t> labels, const AttackConfig& cfg) {
  return iterate(model, batch, labels, cfg, cfg.norm,
                 cfg.norm == Norm::linf ? StepRule::sign : StepRule::l2, cfg.eot_samples);
}

AttackResult run_attack(const Classifier& model, const Tensor& batch,
                        std::span<const std::size_t> labels, const AttackConfig& cfg) {
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(model, batch, labels, cfg);
    case AttackKind::bim: return bim(model, batch, labels, cfg);
    case AttackKind::mim: return mim(model, batch, labels, cfg);
    case AttackKind::pgd_linf: return pgd(model, batch, labels, cfg, Norm::linf);
    case AttackKind::pgd_l2: return pgd(model, batch, labels, cfg, Norm::l2);
    case AttackKind::eot_pgd: return eot_pgd(model, batch, labels, cfg);
  }
  throw ConfigError("unknown attack kind");
}

AttackResult transfer_attack(const Classifier& source, const Classifier& target,
                             const Tensor& batch, std::span<const std::size_t> labels,
                             const AttackConfig& cfg) {
  if (source.classes() != target.classes())
    throw ConfigError("transfer source and target disagree on class count");
  if (source.input_shape() != target.input_shape())
    throw ConfigError("transfer source and target disagree on input shape");
  auto res = run_attack(source, batch, labels, cfg);
  res.predictions = argmax_rows(target.logits(res.adversarial));
  for (std::size_t b = 0; b < labels.size(); ++b) res.success[b] = res.predictions[b] != labels[b];
  return res;
}

double input_gradient_norm(const Classifier& model, const Tensor& images,
                           std::span<const std::size_t> labels, std::size_t chunk) {
  check_batch(model, images, labels);
  if (chunk == 0) throw ConfigError("chunk must be positive");
  Rng rng = make_rng(0, "gradient-norm");
  const std::size_t N = images.dim(0), n = sample_size(images);
  double total = 0.0;
  for (std::size_t lo = 0; lo < N; lo += chunk) {
    const std::size_t hi = std::min(N, lo + chunk);
    auto g = model.loss_gradient(slice_rows(images, lo, hi), labels.subspan(lo, hi - lo), rng);
    // The batch gradient is of the mean loss; each row scales back by B.
    const double B = static_cast<double>(hi - lo);
    for (std::size_t b = 0; b < hi - lo; ++b)
      total += B * row_norm(g.gradient.data().subspan(b * n, n), Norm::l2);
  }
  return total / static_cast<double>(N);
}

double accuracy(const Classifier& model, const Tensor& images,
                std::span<const std::size_t> labels) {
  check_batch(model, images, labels);
  auto pred = argmax_rows(model.logits(images));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

AttackSummary evaluate_attack(const Classifier& target, const Tensor& images,
                              std::span<const std::size_t> labels, const AttackConfig& cfg,
                              std::size_t chunk, const Classifier* source) {
  check_batch(target, images, labels);
  if (chunk == 0) throw ConfigError("chunk must be positive");
  AttackSummary s;
  s.attack = attack_name(cfg.kind);
  s.epsilon = cfg.epsilon;
  s.clean_accuracy = accuracy(target, images, labels);
  const std::size_t N = images.dim(0);
  std::size_t robust = 0;
  for (std::size_t lo = 0; lo < N; lo += chunk) {
    const std::size_t hi = std::min(N, lo + chunk);
    AttackConfig c = cfg;
    c.seed = derive_seed(cfg.seed, "chunk" + std::to_string(lo));
    auto x = slice_rows(images, lo, hi);
    auto y = labels.subspan(lo, hi - lo);
    auto r = source ? transfer_attack(*source, target, x, y, c) : run_attack(target, x, y, c);
    robust += std::count(r.success.begin(), r.success.end(), false);
    for (double v : r.perturbation_norm) s.max_perturbation = std::max(s.max_perturbation, v);
  }
  s.robust_accuracy = static_cast<double>(robust) / static_cast<double>(N);
  return s;
}

}  // namespace fpcc
