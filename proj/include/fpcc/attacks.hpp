// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fpcc/network.hpp"
#include "fpcc/plan.hpp"
#include "fpcc/rng.hpp"

namespace fpcc {

enum class AttackKind { fgsm, bim, mim, pgd_linf, pgd_l2, eot_pgd };
enum class Norm { linf, l2 };

std::string attack_name(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::pgd_linf;
  double epsilon = 8.0 / 255.0;
  double alpha = 0.0;  ///< step size
  std::size_t steps = 20;
  std::size_t eot_samples = 10;
  bool random_start = true;
  double decay = 1.0;     ///< MIM momentum decay
  Norm norm = Norm::linf; ///< used by eot_pgd
  std::uint64_t seed = 0;

  /// Standard settings per kind: FGSM one step of size eps; PGD 20 steps,
  /// alpha eps/8, random start; BIM alpha 2 eps/steps without random start;
  /// MIM alpha eps/steps with decay 1; EOT-PGD as PGD with 10 samples.
  static AttackConfig defaults(AttackKind kind, double epsilon);

  Norm effective_norm() const;
  void validate() const;
};

struct AttackResult {
  Tensor adversarial;
  std::vector<bool> success;  ///< true label no longer predicted
  std::vector<std::size_t> predictions;
  std::vector<double> perturbation_norm;  ///< in the attack's norm
  std::vector<double> loss_trace;         ///< mean CE before each step
  std::vector<double> step_max_norm;      ///< max perturbation after each step

  double robust_accuracy() const;
};

/// A model under attack. Implementations return the mean cross-entropy over
/// the batch and its gradient with respect to the inputs.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t classes() const = 0;
  virtual Shape input_shape() const = 0;
  virtual Tensor logits(const Tensor& batch) const = 0;
  /// `rng` drives stochastic forward passes; deterministic models ignore it.
  virtual InputGradient loss_gradient(const Tensor& batch, std::span<const std::size_t> labels,
                                      Rng& rng) const = 0;
  virtual bool stochastic() const { return false; }
};

/// Eval-mode network, or a stochastic variant running its train-time
/// selection hooks on every pass (for EOT against randomized defenses).
class NetworkClassifier : public Classifier {
 public:
  NetworkClassifier(const NetworkSpec& net, const Params& params);
  NetworkClassifier(const NetworkSpec& net, const Params& params, InsertionPlan stochastic_plan,
                    double gamma, MaskKind kind = MaskKind::select);

  std::size_t classes() const override { return net_->classes; }
  Shape input_shape() const override { return net_->input_shape; }
  Tensor logits(const Tensor& batch) const override;
  InputGradient loss_gradient(const Tensor& batch, std::span<const std::size_t> labels,
                              Rng& rng) const override;
  bool stochastic() const override { return plan_.has_value(); }

 private:
  const NetworkSpec* net_;
  const Params* params_;
  std::optional<InsertionPlan> plan_;
  double gamma_ = 0.0;
  MaskKind kind_ = MaskKind::select;
};

AttackResult fgsm(const Classifier& model, const Tensor& batch,
                  std::span<const std::size_t> labels, const AttackConfig& cfg);
/// Projected gradient ascent in the l-inf (sign step) or l2 (normalized step) ball.
AttackResult pgd(const Classifier& model, const Tensor& batch, std::span<const std::size_t> labels,
                 const AttackConfig& cfg, Norm norm);
AttackResult bim(const Classifier& model, const Tensor& batch, std::span<const std::size_t> labels,
                 const AttackConfig& cfg);
/// Momentum on l1-normalized gradients, sign step.
AttackResult mim(const Classifier& model, const Tensor& batch, std::span<const std::size_t> labels,
                 const AttackConfig& cfg);
/// PGD whose every step averages the gradient over eot_samples passes.
AttackResult eot_pgd(const Classifier& model, const Tensor& batch,
                     std::span<const std::size_t> labels, const AttackConfig& cfg);

/// Dispatches on cfg.kind.
AttackResult run_attack(const Classifier& model, const Tensor& batch,
                        std::span<const std::size_t> labels, const AttackConfig& cfg);

/// Crafts on `source`, scores on `target`. Throws ConfigError if the models
/// disagree on class count or input shape.
AttackResult transfer_attack(const Classifier& source, const Classifier& target,
                             const Tensor& batch, std::span<const std::size_t> labels,
                             const AttackConfig& cfg);

/// Mean over samples of ||grad_x L_CE(x_i, y_i)||_2.
double input_gradient_norm(const Classifier& model, const Tensor& images,
                           std::span<const std::size_t> labels, std::size_t chunk = 200);

struct AttackSummary {
  std::string attack;
  double epsilon = 0.0;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  double max_perturbation = 0.0;
};

/// Runs an attack over a whole image set in chunks. With `source` set the
/// examples are crafted there and scored on `target` (black-box transfer).
AttackSummary evaluate_attack(const Classifier& target, const Tensor& images,
                              std::span<const std::size_t> labels, const AttackConfig& cfg,
                              std::size_t chunk = 200, const Classifier* source = nullptr);

double accuracy(const Classifier& model, const Tensor& images,
                std::span<const std::size_t> labels);

}  // namespace fpcc
