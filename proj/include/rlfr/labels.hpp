#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace rlfr {

enum class VerificationLabel : std::uint8_t { Supported, NotSupported, InsufficientInformation };

enum class Action : std::uint8_t { Maintain, Correct, Retract };
inline constexpr std::size_t kNumActions = 3;

enum class RewardLabel : std::uint8_t {
  Stable,
  Unstable,
  IncorrectMaintain,
  Fixed,
  NewIncorrect,
  FailedFix,
  Retracted,
  CorrectRetract,
  IncorrectRetract,
  NotRetract,
};
inline constexpr std::size_t kNumRewardLabels = 10;

// Structured result of executing an intervention. The correction family
// only pairs with Action::Correct, the retraction family with Action::Retract,
// and None with Action::Maintain.
enum class Outcome : std::uint8_t {
  None,
  // correction family
  Fixed,          // resolves the error, nothing new wrong
  NewIncorrect,   // resolves the error but states something else false
  FailedFix,      // misses the core error
  Acknowledged,   // admits the error without supplying a replacement
  DoubledDown,    // restates the original claim
  // retraction family
  CleanRetract,   // withdraws exactly the flagged inaccuracy
  WrongAspect,    // withdraws something else
  NoRetract,      // no meaningful withdrawal
};
inline constexpr std::size_t kNumOutcomes = 9;

bool is_correction_outcome(Outcome o);
bool is_retraction_outcome(Outcome o);
bool outcome_matches_action(Outcome o, Action a);

std::string_view to_string(VerificationLabel v);
std::string_view to_string(Action a);
std::string_view to_string(RewardLabel r);
std::string_view to_string(Outcome o);

// Parsers return nullopt on unknown names.
std::optional<VerificationLabel> parse_verification(std::string_view s);
std::optional<Action> parse_action(std::string_view s);
std::optional<RewardLabel> parse_reward_label(std::string_view s);
std::optional<Outcome> parse_outcome(std::string_view s);

// Labels a grader may assign for a (truth, action) pair.
std::span<const RewardLabel> reachable_labels(VerificationLabel truth, Action action);
bool is_reachable(RewardLabel label, VerificationLabel truth, Action action);

inline std::size_t index_of(Action a) { return static_cast<std::size_t>(a); }
inline Action action_from_index(std::size_t i) { return static_cast<Action>(i); }

}  // namespace rlfr
