#include "clsa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clsa/errors.hpp"

namespace clsa {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError(std::string(what) + ": non-finite logit");
  }
}

double floored_log(double p) { return std::log(std::max(p, kProbabilityFloor)); }

// KL with the log floor and 0 log 0 = 0; no domain checks.
double kl_unchecked(std::span<const double> teacher, std::span<const double> student) {
  double total = 0.0;
  for (std::size_t j = 0; j < teacher.size(); ++j) {
    if (teacher[j] > 0.0) total += teacher[j] * (floored_log(teacher[j]) - floored_log(student[j]));
  }
  return total;
}

}  // namespace

void LossConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ContractError("LossConfig: temperature must be positive");
  }
  if (level_count < 1) throw ContractError("LossConfig: level_count must be >= 1");
  if (class_count < 2) throw ContractError("LossConfig: class_count must be >= 2");
}

double cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside class range");
  }
  require_finite(logits, "cross_entropy");
  const auto top = std::max_element(logits.begin(), logits.end());
  const double peak = *top;
  // log-sum-exp as log1p of the non-maximal mass keeps precision near zero loss
  double rest = 0.0;
  for (auto it = logits.begin(); it != logits.end(); ++it) {
    if (it != top) rest += std::exp(*it - peak);
  }
  return std::log1p(rest) - (logits[static_cast<std::size_t>(label)] - peak);
}

std::vector<double> soften(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("soften: temperature must be positive");
  require_finite(logits, "soften");
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp((logits[j] - peak) / temperature);
    total += out[j];
  }
  for (double& v : out) v /= total;
  return out;
}

double clsa_kl(std::span<const double> teacher, std::span<const double> student) {
  if (teacher.size() != student.size()) throw ContractError("clsa_kl: length mismatch");
  for (double q : student) {
    if (!(q > 0.0)) throw DomainError("clsa_kl: student probability must be positive");
  }
  return std::max(0.0, kl_unchecked(teacher, student));
}

SoftPrediction make_soft_prediction(std::vector<std::vector<double>> logits, double temperature) {
  SoftPrediction prediction;
  prediction.temperature = temperature;
  prediction.softened_per_level.reserve(logits.size());
  for (const auto& level : logits) prediction.softened_per_level.push_back(soften(level, temperature));
  prediction.logits_per_level = std::move(logits);
  return prediction;
}

LossBreakdown loss_and_logit_gradients(std::span<const std::vector<double>> logits, int label,
                                       const LossConfig& config,
                                       std::vector<std::vector<double>>* logit_grads,
                                       const std::vector<double>* frozen_teacher) {
  config.validate();
  const auto levels = static_cast<int>(logits.size());
  if (levels != config.level_count) {
    throw ContractError("total_loss: expected " + std::to_string(config.level_count) +
                        " levels, got " + std::to_string(levels));
  }
  for (const auto& level : logits) {
    if (static_cast<int>(level.size()) != config.class_count) {
      throw ContractError("total_loss: logit vector length differs from class_count");
    }
  }
  const double t = config.temperature;
  const auto& top_logits = logits[static_cast<std::size_t>(levels - 1)];

  LossBreakdown out;
  out.ce = cross_entropy(top_logits, label);
  if (logit_grads) {
    logit_grads->assign(static_cast<std::size_t>(levels),
                        std::vector<double>(static_cast<std::size_t>(config.class_count), 0.0));
    auto& top_grad = logit_grads->back();
    top_grad = soften(top_logits, 1.0);
    top_grad[static_cast<std::size_t>(label)] -= 1.0;
  }

  double alignment = 0.0;
  if (config.alignment_enabled && levels > 1) {
    const std::vector<double> teacher = frozen_teacher ? *frozen_teacher : soften(top_logits, t);
    const bool teacher_is_constant = config.teacher_gradient_blocked || frozen_teacher != nullptr;
    for (int s = 0; s + 1 < levels; ++s) {
      const auto student = soften(logits[static_cast<std::size_t>(s)], t);
      const double kl = kl_unchecked(teacher, student);
      out.clsa_per_level.push_back(kl);
      alignment += kl;
      if (!logit_grads) continue;
      // d(T^2 KL)/d p^s = T (q - t)
      auto& g = (*logit_grads)[static_cast<std::size_t>(s)];
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += t * (student[j] - teacher[j]);
      if (!teacher_is_constant) {
        // d(T^2 KL)/d p^K = T t_j (log t_j - log q_j - KL)
        auto& top_grad = logit_grads->back();
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (teacher[j] <= 0.0) continue;
          top_grad[j] += t * teacher[j] * (floored_log(teacher[j]) - floored_log(student[j]) - kl);
        }
      }
    }
  } else if (levels > 1) {
    out.clsa_per_level.assign(static_cast<std::size_t>(levels - 1), 0.0);
  }
  out.total = out.ce + t * t * alignment;
  return out;
}

LossBreakdown total_loss(const SoftPrediction& prediction, int label, const LossConfig& config) {
  if (prediction.temperature != config.temperature) {
    throw ContractError("total_loss: prediction temperature differs from LossConfig");
  }
  return loss_and_logit_gradients(prediction.logits_per_level, label, config, nullptr);
}

double entropy(std::span<const double> distribution) {
  double h = 0.0;
  for (double p : distribution) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace clsa
