#include "rlfr/labels.hpp"

#include <algorithm>

namespace rlfr {

namespace {

constexpr std::array<std::string_view, 3> kVerificationNames = {"Supported", "NotSupported",
                                                                 "InsufficientInformation"};
constexpr std::array<std::string_view, kNumActions> kActionNames = {"Maintain", "Correct",
                                                                   "Retract"};
constexpr std::array<std::string_view, kNumRewardLabels> kRewardNames = {
    "Stable",    "Unstable",  "IncorrectMaintain", "Fixed",           "NewIncorrect",
    "FailedFix", "Retracted", "CorrectRetract",    "IncorrectRetract", "NotRetract"};
constexpr std::array<std::string_view, kNumOutcomes> kOutcomeNames = {
    "None",        "Fixed",        "NewIncorrect", "FailedFix", "Acknowledged",
    "DoubledDown", "CleanRetract", "WrongAspect",  "NoRetract"};

template <typename E, std::size_t N>
std::optional<E> parse_named(std::string_view s, const std::array<std::string_view, N>& names) {
  const auto it = std::find(names.begin(), names.end(), s);
  if (it == names.end()) return std::nullopt;
  return static_cast<E>(std::distance(names.begin(), it));
}

constexpr std::array kSupportedMaintain = {RewardLabel::Stable};
constexpr std::array kSupportedChange = {RewardLabel::Unstable};
constexpr std::array kNsMaintain = {RewardLabel::IncorrectMaintain};
constexpr std::array kNsCorrect = {RewardLabel::Fixed, RewardLabel::NewIncorrect,
                                   RewardLabel::FailedFix, RewardLabel::Retracted,
                                   RewardLabel::IncorrectMaintain};
constexpr std::array kNsRetract = {RewardLabel::CorrectRetract, RewardLabel::IncorrectRetract,
                                   RewardLabel::NotRetract};

}  // namespace

bool is_correction_outcome(Outcome o) {
  return o == Outcome::Fixed || o == Outcome::NewIncorrect || o == Outcome::FailedFix ||
         o == Outcome::Acknowledged || o == Outcome::DoubledDown;
}

bool is_retraction_outcome(Outcome o) {
  return o == Outcome::CleanRetract || o == Outcome::WrongAspect || o == Outcome::NoRetract;
}

bool outcome_matches_action(Outcome o, Action a) {
  switch (a) {
    case Action::Maintain: return o == Outcome::None;
    case Action::Correct: return is_correction_outcome(o);
    case Action::Retract: return is_retraction_outcome(o);
  }
  return false;
}

std::string_view to_string(VerificationLabel v) { return kVerificationNames.at(static_cast<std::size_t>(v)); }
std::string_view to_string(Action a) { return kActionNames.at(static_cast<std::size_t>(a)); }
std::string_view to_string(RewardLabel r) { return kRewardNames.at(static_cast<std::size_t>(r)); }
std::string_view to_string(Outcome o) { return kOutcomeNames.at(static_cast<std::size_t>(o)); }

std::optional<VerificationLabel> parse_verification(std::string_view s) {
  return parse_named<VerificationLabel>(s, kVerificationNames);
}
std::optional<Action> parse_action(std::string_view s) { return parse_named<Action>(s, kActionNames); }
std::optional<RewardLabel> parse_reward_label(std::string_view s) {
  return parse_named<RewardLabel>(s, kRewardNames);
}
std::optional<Outcome> parse_outcome(std::string_view s) { return parse_named<Outcome>(s, kOutcomeNames); }

std::span<const RewardLabel> reachable_labels(VerificationLabel truth, Action action) {
  if (truth == VerificationLabel::Supported) {
    if (action == Action::Maintain) return kSupportedMaintain;
    return kSupportedChange;
  }
  if (truth == VerificationLabel::NotSupported) {
    switch (action) {
      case Action::Maintain: return kNsMaintain;
      case Action::Correct: return kNsCorrect;
      case Action::Retract: return kNsRetract;
    }
  }
  // InsufficientInformation entities are never graded.
  return {};
}

bool is_reachable(RewardLabel label, VerificationLabel truth, Action action) {
  const auto labels = reachable_labels(truth, action);
  return std::find(labels.begin(), labels.end(), label) != labels.end();
}

}  // namespace rlfr
