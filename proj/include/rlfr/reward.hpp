#pragma once

#include <optional>
#include <span>
#include <string_view>

#include "rlfr/labels.hpp"
#include "rlfr/world.hpp"

namespace rlfr::reward {

struct RewardCaps {
  double illegible_penalty = -0.2;
  double clip_low = 0.1;
  double clip_high = 0.95;
  double retraction_cap = 0.65;
};

struct LagrangeState {
  double lambda = 0.0;
  double gamma = 0.2;         // lambda learning rate
  double target_rate = 0.4;   // desired retraction rate r
  double lambda_max = 1.0;

  void validate() const;
};

enum class RewardPath { Illegible, Insubstantive, OffAction, ProbeScored, Maintain };
std::string_view to_string(RewardPath p);

struct RewardBreakdown {
  double reward = 0.0;
  RewardPath path = RewardPath::ProbeScored;
  double raw_score = 0.0;
  double clip_low = 0.0, clip_high = 0.0;
  double lambda = 0.0;
  std::optional<double> cap;  // strict right-clip (corrections) or scale (retractions)
};

RewardBreakdown correction_reward(const world::GateRecord& gates, double fixed_prob, const RewardCaps& caps = {});
RewardBreakdown retraction_reward(const world::GateRecord& gates, double correct_retract_prob, double lambda,
                                  const RewardCaps& caps = {});
// Maintain has no probe: format failures are penalised, everything else is 0.
RewardBreakdown maintain_reward(const world::GateRecord& gates, const RewardCaps& caps = {});

// Dispatches on the intended action. `score` is the action-appropriate probe
// probability and is ignored for Maintain.
RewardBreakdown assign_reward(Action intended, const world::GateRecord& gates, double score, double lambda,
                              const RewardCaps& caps = {});

LagrangeState update_lambda(const LagrangeState& s, double r_hat);

struct JudgedIntervention {
  Action intended = Action::Maintain;
  world::GateRecord gates;
};

// Retractions / (retractions + corrections) over interventions whose judged
// action matches the intended one and that pass the legibility and format
// gates. nullopt when that set is empty (no lambda update).
std::optional<double> empirical_retraction_rate(std::span<const JudgedIntervention> batch);

}  // namespace rlfr::reward
