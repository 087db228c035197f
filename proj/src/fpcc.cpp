// SPDX-License-Identifier: Apache-2.0
#include "fpcc/fpcc.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "fpcc/errors.hpp"

namespace fpcc {

void FpccConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
  if (!(sfm_epsilon >= 0.0)) throw ConfigError("SFM epsilon must be non-negative");
  if (!(z_epsilon > 0.0)) throw ConfigError("z-score epsilon must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(bank_lr >= 0.0)) throw ConfigError("bank learning rate must be non-negative");
  if (!(bank_init_std >= 0.0)) throw ConfigError("bank init std must be non-negative");
  for (const auto& e : plan.entries)
    if (e.gamma && !(*e.gamma >= 0.0 && *e.gamma <= 1.0))
      throw ConfigError("plan gamma override must lie in [0,1]");
}

namespace {

struct RowStats {
  std::vector<double> sigma;
  std::vector<double> denom;
};

RowStats zscore_rows(const Tensor& x, double eps, Tensor& out) {
  const std::size_t B = x.dim(0), D = x.dim(1);
  RowStats st{std::vector<double>(B), std::vector<double>(B)};
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = x.data().data() + b * D;
    double mean = 0.0;
    for (std::size_t d = 0; d < D; ++d) mean += row[d];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
    var /= static_cast<double>(D);
    const double sigma = std::sqrt(var);
    const double denom = sigma + eps;
    double* o = out.data().data() + b * D;
    for (std::size_t d = 0; d < D; ++d) o[d] = (row[d] - mean) / denom;
    st.sigma[b] = sigma;
    st.denom[b] = denom;
  }
  return st;
}

void require_pattern_input(const Shape& s) {
  if (s.size() != 2) throw DimensionError("feature_pattern expects [B,D], got " + shape_string(s));
  if (s[1] < 2) throw DimensionError("feature_pattern needs D >= 2");
}

}  // namespace

Tensor feature_pattern_value(const Tensor& x, double z_epsilon) {
  require_pattern_input(x.shape());
  Tensor out(x.shape());
  zscore_rows(x, z_epsilon, out);
  return out;
}

Var feature_pattern(const Var& x, double z_epsilon) {
  require_pattern_input(x.shape());
  if (!(z_epsilon > 0.0)) throw ConfigError("z-score epsilon must be positive");
  Tensor out(x.shape());
  auto stats = std::make_shared<RowStats>(zscore_rows(x.value(), z_epsilon, out));
  Tape* tape = &x.tape();
  const NodeId ix = x.id();
  const NodeId io = tape->node_count();
  return tape->record(
      OpKind::feature_pattern, {ix}, std::move(out),
      [tape, io, stats](const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& p = tape->value(io);
        const std::size_t B = p.dim(0), D = p.dim(1);
        const double inv_d = 1.0 / static_cast<double>(D);
        for (std::size_t b = 0; b < B; ++b) {
          const double* gr = g.data().data() + b * D;
          const double* pr = p.data().data() + b * D;
          double* dx = gin[0]->data().data() + b * D;
          const double s = stats->denom[b], sigma = stats->sigma[b];
          double gbar = 0.0, gp = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            gbar += gr[d];
            gp += gr[d] * pr[d];
          }
          gbar *= inv_d;
          // centered row c = p * s; the sigma term vanishes with sigma
          const double k = sigma > 0.0 ? gp * s * inv_d / sigma : 0.0;
          for (std::size_t d = 0; d < D; ++d) dx[d] += (gr[d] - gbar - k * pr[d]) / s;
        }
      });
}

Var feature_pattern_composite(const Var& x, double z_epsilon) {
  require_pattern_input(x.shape());
  Var centered = sub(x, mean_axis(x, 1, true));
  Var sigma = sqrt(mean_axis(mul(centered, centered), 1, true));
  return div(centered, add_scalar(sigma, z_epsilon));
}

PatternBank PatternBank::init(const std::vector<std::string>& sites,
                              const std::vector<std::size_t>& dims, std::size_t classes,
                              double init_std, std::uint64_t seed) {
  if (sites.size() != dims.size()) throw DimensionError("one dimension per bank site required");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, init_std > 0.0 ? init_std : 1.0);
  PatternBank bank;
  bank.sites = sites;
  for (std::size_t d : dims) {
    Tensor t({classes, d});
    if (init_std > 0.0)
      for (double& v : t.data()) v = normal(rng);
    bank.rows.push_back(std::move(t));
  }
  return bank;
}

std::size_t PatternBank::index(const std::string& site) const {
  for (std::size_t i = 0; i < sites.size(); ++i)
    if (sites[i] == site) return i;
  throw ConfigError("pattern bank has no site '" + site + "'");
}

Var pro_loss(const Var& pattern, const Var& bank, std::span<const std::size_t> labels) {
  const Shape& ps = pattern.shape();
  if (ps.size() != 2 || bank.shape().size() != 2 || bank.shape()[1] != ps[1])
    throw DimensionError("pattern " + shape_string(ps) + " does not match bank " +
                         shape_string(bank.shape()));
  Var diff = sub(pattern, gather_rows(bank, labels));
  return scale(sum(abs(diff)), 1.0 / static_cast<double>(ps[0]));
}

Var center_loss(const Var& latent, const Var& centers, std::span<const std::size_t> labels) {
  const Shape& ls = latent.shape();
  if (ls.size() != 2 || centers.shape().size() != 2 || centers.shape()[1] != ls[1])
    throw DimensionError("latent " + shape_string(ls) + " does not match centers " +
                         shape_string(centers.shape()));
  Var diff = sub(latent, gather_rows(centers, labels));
  return scale(sum(mul(diff, diff)), 0.5 / static_cast<double>(ls[0]));
}

LossParts total_loss(const Var& logits, std::span<const std::size_t> labels,
                     const std::map<std::string, Var>& patterns,
                     const std::map<std::string, Var>& bank_vars, double lambda) {
  LossParts parts;
  parts.cross_entropy = softmax_cross_entropy(logits, labels).loss;
  parts.total = parts.cross_entropy;
  if (bank_vars.empty()) return parts;
  Var penalty;
  bool first = true;
  for (const auto& [site, bank] : bank_vars) {
    auto it = patterns.find(site);
    if (it == patterns.end()) throw ContractError("no pattern supplied for PRO site '" + site + "'");
    Var l = pro_loss(it->second, bank, labels);
    parts.pattern[site] = l;
    penalty = first ? l : add(penalty, l);
    first = false;
  }
  parts.total = add(parts.cross_entropy, scale(penalty, lambda));
  return parts;
}

Tensor sfm_augment(const Tensor& x, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0)) throw ConfigError("SFM epsilon must be non-negative");
  Tensor out = x;
  if (epsilon == 0.0) return out;
  std::uniform_real_distribution<double> noise(-epsilon, epsilon);
  for (double& v : out.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return out;
}

void update_pattern_bank(PatternBank& bank, const std::map<std::string, Tensor>& gradients,
                         double lr) {
  for (const auto& [site, g] : gradients) {
    Tensor& rows = bank.at(site);
    if (g.shape() != rows.shape())
      throw DimensionError("bank gradient " + shape_string(g.shape()) + " does not match " +
                           shape_string(rows.shape()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] -= lr * g[i];
  }
}

Tensor fgsm_adversarial_batch(const NetworkSpec& net, const Params& params, const Tensor& batch,
                              std::span<const std::size_t> labels, double epsilon) {
  if (!(epsilon >= 0.0)) throw ConfigError("FGSM epsilon must be non-negative");
  Tensor out = batch;
  if (epsilon == 0.0) return out;
  const auto ig = input_gradient(net, params, batch, labels);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = ig.gradient[i];
    const double step = g > 0.0 ? epsilon : (g < 0.0 ? -epsilon : 0.0);
    out[i] = std::clamp(out[i] + step, 0.0, 1.0);
  }
  return out;
}

std::vector<std::size_t> nearest_rows_l1(const Tensor& patterns, const Tensor& bank_rows) {
  const std::size_t B = patterns.dim(0), D = patterns.dim(1), K = bank_rows.dim(0);
  if (bank_rows.dim(1) != D) throw DimensionError("pattern width does not match bank");
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double dist = 0.0;
      for (std::size_t d = 0; d < D; ++d)
        dist += std::abs(patterns[b * D + d] - bank_rows[k * D + d]);
      if (dist < best) {
        best = dist;
        out[b] = k;
      }
    }
  }
  return out;
}

PatternDiagnostic pattern_correctness_diagnostic(const NetworkSpec& net, const Params& params,
                                                 const Tensor& images,
                                                 std::span<const std::size_t> labels,
                                                 const PatternBank& bank, double z_epsilon) {
  const std::size_t n = images.dim(0), K = net.classes;
  if (labels.size() != n) throw DimensionError("one label per image required");
  constexpr std::size_t kChunk = 256;
  std::vector<double> confidence(n);
  std::vector<std::size_t> predicted(n);
  std::map<std::string, std::vector<double>> patterns;
  for (std::size_t b = 0; b < n; b += kChunk) {
    const std::size_t e = std::min(n, b + kChunk);
    Tape tape;
    auto pv = bind_params(tape, params, false);
    auto rec = forward(net, pv, tape.constant(slice_rows(images, b, e)), {}, bank.sites);
    const Tensor probs = softmax(rec.logits.value());
    const auto pred = argmax_rows(probs);
    for (std::size_t i = 0; i < e - b; ++i) {
      predicted[b + i] = pred[i];
      confidence[b + i] = probs[i * K + pred[i]];
    }
    for (const auto& site : bank.sites) {
      const Tensor p = feature_pattern_value(rec.features.at(site).value(), z_epsilon);
      auto& dst = patterns[site];
      dst.insert(dst.end(), p.data().begin(), p.data().end());
    }
  }

  PatternDiagnostic report;
  report.samples = n;
  for (std::size_t i = 0; i < n; ++i) report.correct += predicted[i] == labels[i];

  for (const auto& site : bank.sites) {
    const Tensor& rows = bank.at(site);
    const std::size_t D = rows.dim(1);
    const Tensor pats({n, D}, std::move(patterns[site]));
    const auto nearest = nearest_rows_l1(pats, rows);
    SiteDiagnostic sd;
    sd.site = site;
    std::size_t ok_n = 0, ok_hit = 0, bad_n = 0, bad_hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool hit = nearest[i] == labels[i];
      if (predicted[i] == labels[i]) {
        ++ok_n;
        ok_hit += hit;
      } else {
        ++bad_n;
        bad_hit += hit;
      }
    }
    if (ok_n) sd.correct_nearest_true = static_cast<double>(ok_hit) / static_cast<double>(ok_n);
    if (bad_n) sd.wrong_nearest_true = static_cast<double>(bad_hit) / static_cast<double>(bad_n);

    sd.class_patterns.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == k && predicted[i] == k) members.push_back(i);
      if (members.empty()) continue;
      std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
        return confidence[a] > confidence[b];
      });
      members.resize(std::min<std::size_t>(members.size(), 10));
      std::vector<double> mean(D, 0.0);
      for (std::size_t i : members)
        for (std::size_t d = 0; d < D; ++d) mean[d] += pats[i * D + d];
      for (double& v : mean) v /= static_cast<double>(members.size());
      sd.class_patterns[k] = std::move(mean);
    }
    report.sites.push_back(std::move(sd));
  }
  return report;
}

}  // namespace fpcc
