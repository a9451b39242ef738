#include "rlfr/reward.hpp"

#include <algorithm>
#include <stdexcept>

#include "rlfr/error.hpp"

namespace rlfr::reward {

void LagrangeState::validate() const {
  if (!(lambda_max >= 0)) throw ConfigError("lagrange: lambda_max must be >= 0");
  if (!(lambda >= 0 && lambda <= lambda_max)) throw ConfigError("lagrange: lambda must lie in [0, lambda_max]");
  if (!(gamma >= 0)) throw ConfigError("lagrange: gamma must be >= 0");
  if (!(target_rate >= 0 && target_rate <= 1)) throw ConfigError("lagrange: target rate must lie in [0,1]");
}

std::string_view to_string(RewardPath p) {
  switch (p) {
    case RewardPath::Illegible: return "illegible";
    case RewardPath::Insubstantive: return "insubstantive";
    case RewardPath::OffAction: return "off-action";
    case RewardPath::ProbeScored: return "probe-scored";
    case RewardPath::Maintain: return "maintain";
  }
  return "?";
}

namespace {

// Shared gate prefix; returns a breakdown when a gate short-circuits.
std::optional<RewardBreakdown> gate_prefix(const world::GateRecord& g, Action intended, const RewardCaps& caps) {
  RewardBreakdown b;
  if (!g.legible || !g.format_ok) {
    b.path = RewardPath::Illegible;
    b.reward = caps.illegible_penalty;
    return b;
  }
  if (g.meta || !g.substantive) {
    b.path = RewardPath::Insubstantive;
    return b;
  }
  if (g.predicted_action != intended) {
    b.path = RewardPath::OffAction;
    return b;
  }
  return std::nullopt;
}

}  // namespace

RewardBreakdown correction_reward(const world::GateRecord& gates, double fixed_prob, const RewardCaps& caps) {
  if (auto b = gate_prefix(gates, Action::Correct, caps)) {
    b->raw_score = fixed_prob;
    return *b;
  }
  RewardBreakdown b;
  b.raw_score = fixed_prob;
  b.clip_low = caps.clip_low;
  b.clip_high = caps.clip_high;
  b.reward = std::clamp(fixed_prob, caps.clip_low, caps.clip_high);
  if (!gates.strict_substantive) {
    b.cap = caps.retraction_cap;
    b.reward = std::min(b.reward, caps.retraction_cap);
  }
  return b;
}

RewardBreakdown retraction_reward(const world::GateRecord& gates, double correct_retract_prob, double lambda,
                                  const RewardCaps& caps) {
  if (auto b = gate_prefix(gates, Action::Retract, caps)) {
    b->raw_score = correct_retract_prob;
    b->lambda = lambda;
    return *b;
  }
  RewardBreakdown b;
  b.raw_score = correct_retract_prob;
  b.lambda = lambda;
  b.clip_low = caps.clip_low;
  b.clip_high = caps.clip_high;
  b.cap = caps.retraction_cap;
  b.reward = caps.retraction_cap * std::clamp(correct_retract_prob - lambda, caps.clip_low, caps.clip_high);
  return b;
}

RewardBreakdown maintain_reward(const world::GateRecord& gates, const RewardCaps& caps) {
  RewardBreakdown b;
  if (!gates.legible || !gates.format_ok) {
    b.path = RewardPath::Illegible;
    b.reward = caps.illegible_penalty;
    return b;
  }
  b.path = RewardPath::Maintain;
  return b;
}

RewardBreakdown assign_reward(Action intended, const world::GateRecord& gates, double score, double lambda,
                              const RewardCaps& caps) {
  switch (intended) {
    case Action::Correct: return correction_reward(gates, score, caps);
    case Action::Retract: return retraction_reward(gates, score, lambda, caps);
    case Action::Maintain: return maintain_reward(gates, caps);
  }
  throw std::logic_error("assign_reward: unknown action");
}

LagrangeState update_lambda(const LagrangeState& s, double r_hat) {
  if (!(r_hat >= 0 && r_hat <= 1)) throw std::invalid_argument("update_lambda: r_hat must lie in [0,1]");
  LagrangeState next = s;
  next.lambda = std::clamp(s.lambda + s.gamma * (r_hat - s.target_rate), 0.0, s.lambda_max);
  return next;
}

std::optional<double> empirical_retraction_rate(std::span<const JudgedIntervention> batch) {
  std::size_t retract = 0, correct = 0;
  for (const auto& j : batch) {
    if (!j.gates.legible || !j.gates.format_ok) continue;
    if (j.gates.predicted_action != j.intended) continue;
    if (j.intended == Action::Retract) ++retract;
    if (j.intended == Action::Correct) ++correct;
  }
  if (retract + correct == 0) return std::nullopt;
  return static_cast<double>(retract) / static_cast<double>(retract + correct);
}

}  // namespace rlfr::reward
