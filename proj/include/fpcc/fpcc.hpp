// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fpcc/autodiff.hpp"
#include "fpcc/network.hpp"
#include "fpcc/plan.hpp"
#include "fpcc/rng.hpp"

namespace fpcc {

struct FpccConfig {
  double sfm_epsilon = 8.0 / 255.0;  ///< SFM noise budget, input units
  double gamma = 0.2;                ///< CFS drop probability
  double lambda = 0.1;               ///< weight of the pattern loss
  double z_epsilon = 1e-5;           ///< z-score stabilizer
  InsertionPlan plan;
  double bank_lr = 0.01;
  double bank_init_std = 0.1;

  void validate() const;
};

/// Row-wise z-score: (x - mean(x)) / (sigma(x) + eps), sigma the population
/// standard deviation. x is [B, D] with D >= 2.
///
/// Single fused primitive whose reverse pass stays finite for constant rows
/// (sigma = 0), which dead ReLU layers and heavy masking produce routinely.
Var feature_pattern(const Var& x, double z_epsilon);

/// The same z-score composed from mean_axis/sub/mul/sqrt/div primitives.
/// Reference route only: its reverse pass is undefined for constant rows.
Var feature_pattern_composite(const Var& x, double z_epsilon);

/// Tape-free z-score of a [B, D] tensor.
Tensor feature_pattern_value(const Tensor& x, double z_epsilon);

/// Learnable per-class reference patterns, one K x D(l) matrix per PRO site.
struct PatternBank {
  std::vector<std::string> sites;
  std::vector<Tensor> rows;

  /// i.i.d. normal(0, init_std) entries, one matrix per site in `dims`.
  static PatternBank init(const std::vector<std::string>& sites,
                          const std::vector<std::size_t>& dims, std::size_t classes,
                          double init_std, std::uint64_t seed);

  std::size_t index(const std::string& site) const;
  const Tensor& at(const std::string& site) const { return rows[index(site)]; }
  Tensor& at(const std::string& site) { return rows[index(site)]; }
  std::size_t classes() const { return rows.empty() ? 0 : rows.front().dim(0); }

  friend bool operator==(const PatternBank&, const PatternBank&) = default;
};

/// Mean over the batch of ||p_i - d_{y_i}||_1. `bank` is the K x D matrix of
/// one site; rows are selected by `labels`.
Var pro_loss(const Var& pattern, const Var& bank, std::span<const std::size_t> labels);

/// Mean over the batch of 0.5 * ||x_i - c_{y_i}||_2^2.
Var center_loss(const Var& latent, const Var& centers, std::span<const std::size_t> labels);

struct LossParts {
  Var total;
  Var cross_entropy;
  std::map<std::string, Var> pattern;  ///< per-site L_PT
};

/// L = L_CE + lambda * sum over sites of L_PT. Every site of `bank_vars`
/// must have a pattern in `patterns`; throws ContractError otherwise.
LossParts total_loss(const Var& logits, std::span<const std::size_t> labels,
                     const std::map<std::string, Var>& patterns,
                     const std::map<std::string, Var>& bank_vars, double lambda);

/// x + delta, delta i.i.d. uniform on (-eps, eps), clamped to [0, 1].
Tensor sfm_augment(const Tensor& x, double epsilon, Rng& rng);

/// One plain gradient-descent step on every site's bank matrix. Rows without
/// gradient (classes absent from the batch) stay bit-identical.
void update_pattern_bank(PatternBank& bank, const std::map<std::string, Tensor>& gradients,
                         double lr);

/// x + eps * sign(dL_CE/dx), clamped to [0, 1].
Tensor fgsm_adversarial_batch(const NetworkSpec& net, const Params& params, const Tensor& batch,
                              std::span<const std::size_t> labels, double epsilon);

struct SiteDiagnostic {
  std::string site;
  /// Fraction of correctly predicted samples whose L1-nearest bank row is
  /// the true class. Empty when no sample was correct.
  std::optional<double> correct_nearest_true;
  /// Same for misclassified samples.
  std::optional<double> wrong_nearest_true;
  /// Per class: mean pattern of its (up to) ten most confident correct
  /// predictions; absent when the class has none.
  std::vector<std::optional<std::vector<double>>> class_patterns;
};

struct PatternDiagnostic {
  std::size_t samples = 0;
  std::size_t correct = 0;
  std::vector<SiteDiagnostic> sites;
};

PatternDiagnostic pattern_correctness_diagnostic(const NetworkSpec& net, const Params& params,
                                                 const Tensor& images,
                                                 std::span<const std::size_t> labels,
                                                 const PatternBank& bank, double z_epsilon);

/// Nearest-row classification of precomputed patterns; exposed for tests.
std::vector<std::size_t> nearest_rows_l1(const Tensor& patterns, const Tensor& bank_rows);

}  // namespace fpcc
