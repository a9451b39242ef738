#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "rlfr/models.hpp"
#include "rlfr/rl.hpp"
#include "rlfr/world.hpp"

// Streaming detect-intervene loop.
namespace rlfr::infer {

enum class Strategy : std::uint8_t { Inline, NotInline };
enum class Sampling : std::uint8_t { Vanilla, BestOfN };
enum class Termination : std::uint8_t { NoDetection, MaxInterventions, TokenBudget };

std::string_view to_string(Strategy s);
std::string_view to_string(Sampling s);
std::string_view to_string(Termination t);
std::optional<Strategy> parse_strategy(std::string_view s);
std::optional<Sampling> parse_sampling(std::string_view s);
std::optional<Termination> parse_termination(std::string_view s);

using Priority = std::array<Action, kNumActions>;
inline constexpr Priority kDefaultPriority{Action::Correct, Action::Retract, Action::Maintain};

struct InferenceConfig {
  double threshold = 0.7;
  std::size_t max_interventions = 30;
  Strategy strategy = Strategy::Inline;
  Sampling sampling = Sampling::Vanilla;
  std::size_t n = 1;               // candidates per flagged span under best-of-N
  std::size_t token_budget = 64;   // generated tokens, not counting inserted text
  double boundary_threshold = 0.5;
  Priority priority = kDefaultPriority;

  std::size_t candidates() const { return sampling == Sampling::BestOfN ? n : 1; }
  void validate() const;
};

struct ScoredCandidate {
  Action action = Action::Maintain;
  double score = 0.0;
};

// Index of the selected candidate: modal action (ties by priority), then the
// highest score within it (ties by lowest index). Throws on an empty list.
std::size_t best_of_n(std::span<const ScoredCandidate> candidates, const Priority& priority = kDefaultPriority);

struct InlineResult {
  std::size_t insertion_point = 0;  // first inserted token
  std::size_t resume = 0;           // first token after the separator
};

// Splices the intervention text and a separator after `at`. Maintain is
// never inlined (std::invalid_argument).
InlineResult apply_inline(world::Generator& gen, const Span& at, const world::Intervention& iv);

struct CandidateRecord {
  std::uint64_t id = 0;
  Action action = Action::Maintain;
  int quality = 0;
  double score = 0.0;
};

struct InterventionRecord {
  std::size_t flagged_index = 0;    // into InferenceTranscript::flagged
  Span span;
  world::Claim target;
  std::vector<CandidateRecord> candidates;
  std::size_t selected = 0;
  world::Intervention intervention;  // the selected candidate, realized
  bool inlined = false;
  std::optional<InlineResult> insertion;
};

struct InferenceTranscript {
  std::uint64_t prompt_seed = 0;
  world::Completion completion;      // final completion
  std::vector<std::size_t> probe_starts;
  std::vector<probes::Detection> flagged;
  std::vector<InterventionRecord> interventions;
  Termination termination = Termination::NoDetection;
};

struct LoopModels {
  const world::World* world = nullptr;
  const rl::PolicyParams* policy = nullptr;
  const probes::DetectionModel* detector = nullptr;
  const probes::RewardModel* reward = nullptr;
};

InferenceTranscript run_loop(std::uint64_t prompt_seed, const LoopModels& m, const InferenceConfig& cfg);

// Independent prompts across `jobs` threads; output order follows `seeds`.
std::vector<InferenceTranscript> run_prompts(std::span<const std::uint64_t> seeds, const LoopModels& m,
                                             const InferenceConfig& cfg, std::size_t jobs = 1);

// ---- best-of-N selection study ----------------------------------------------

struct SelectionStudy {
  std::vector<std::size_t> n_values;
  std::vector<double> probe_success;   // per N: Fixed or CleanRetract after probe-scored selection
  std::vector<double> random_success;  // per N: same candidates, uniformly random pick
  std::size_t entities = 0;
};

// Draws N candidates per NotSupported flagged entity and compares probe-scored
// against uniform selection. Candidate pools are nested across N values.
SelectionStudy selection_study(const LoopModels& m, std::span<const std::size_t> n_values, std::size_t entities,
                               double threshold, std::uint64_t seed, const Priority& priority = kDefaultPriority);

}  // namespace rlfr::infer
