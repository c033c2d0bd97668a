#pragma once
// Cross-level semantic alignment loss stack.
//
//   ce          = -log softmax(p^K)_y                       (top level only)
//   soften(p,T) = softmax(p / T)
//   clsa(s)     = KL( soften(p^K,T) || soften(p^s,T) ),  s = 1..K-1
//   total       = ce + T^2 * sum_s clsa(s)
//
// Levels are indexed 0..K-1 in code; index K-1 is the top (teacher) level.
// Logarithms are natural. Inside logs, probabilities are floored at
// kProbabilityFloor so extreme logits cannot produce log(0).

#include <span>
#include <vector>

namespace clsa {

inline constexpr double kProbabilityFloor = 1e-12;

struct LossConfig {
  double temperature = 3.0;
  int level_count = 3;
  int class_count = 2;
  bool teacher_gradient_blocked = true;
  // false trains the top level with CE only (the plain in-network pyramid).
  bool alignment_enabled = true;

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  std::vector<double> clsa_per_level;  // entry s-1 holds clsa(s)
  double total = 0.0;
};

// Per-level logits p^k and their softened distributions.
struct SoftPrediction {
  std::vector<std::vector<double>> logits_per_level;
  double temperature = 1.0;
  std::vector<std::vector<double>> softened_per_level;
};

SoftPrediction make_soft_prediction(std::vector<std::vector<double>> logits, double temperature);

double cross_entropy(std::span<const double> logits, int label);

std::vector<double> soften(std::span<const double> logits, double temperature);

// KL(teacher || student). Throws ContractError on length mismatch and
// DomainError when a student entry is not positive.
double clsa_kl(std::span<const double> teacher, std::span<const double> student);

LossBreakdown total_loss(const SoftPrediction& prediction, int label, const LossConfig& config);

// Loss for one sample plus d(total)/d(logits) for every level.
//
// With config.teacher_gradient_blocked the softened top-level distribution
// is a constant for differentiation, so alignment terms send no gradient to
// level K. `frozen_teacher`, when given, replaces soften(p^K, T) in the
// alignment terms; finite-difference checks use it to evaluate exactly the
// function whose gradient the blocked mode computes.
LossBreakdown loss_and_logit_gradients(std::span<const std::vector<double>> logits, int label,
                                       const LossConfig& config,
                                       std::vector<std::vector<double>>* logit_grads,
                                       const std::vector<double>* frozen_teacher = nullptr);

// Shannon entropy in nats.
double entropy(std::span<const double> distribution);

}  // namespace clsa
