#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rlfr/kernel.hpp"
#include "rlfr/labels.hpp"
#include "rlfr/rng.hpp"
#include "rlfr/span.hpp"

// Synthetic generative world with planted ground truth. It stands in for the
// policy model (token generation + residual activations) and for the external
// grader (entity extraction, verification, intervention grading, judges).
namespace rlfr::world {

using kernel::Matrix;
using kernel::Vector;

inline constexpr int kSeparatorToken = 0;
inline constexpr std::size_t kQualityLevels = 3;

// Probabilities indexed by intervention quality level (0 = sloppy .. 2 = careful).
using PerQuality = std::array<double, kQualityLevels>;

struct OutcomeModel {
  PerQuality p_legible{0.85, 0.96, 0.99};
  PerQuality p_meta{0.12, 0.05, 0.02};
  PerQuality p_on_script{0.85, 0.95, 0.99};
  PerQuality p_substantive{0.55, 0.85, 0.95};
  PerQuality p_strict_given_substantive{0.3, 0.6, 0.9};
  PerQuality length_mean{240.0, 170.0, 200.0};
  double length_sd = 60.0;
  // Correct, policy knows the fact: Fixed with this probability, else NewIncorrect.
  PerQuality p_fixed_if_known{0.70, 0.85, 0.92};
  // Correct, policy does not know: FailedFix / Acknowledged / DoubledDown / NewIncorrect.
  std::array<double, 4> unknown_mix{0.70, 0.15, 0.10, 0.05};
  // Retract: CleanRetract with this probability, NoRetract with p_no_retract,
  // otherwise WrongAspect.
  PerQuality p_clean_retract{0.60, 0.75, 0.85};
  double p_no_retract = 0.03;
};

struct WorldParams {
  std::size_t feature_dim = 32;
  std::size_t vocab_size = 256;
  std::size_t max_tokens = 64;  // generation budget per completion
  std::size_t gap_min = 1, gap_max = 6;
  std::size_t claim_min = 2, claim_max = 5;
  std::size_t topics = 8;
  double truth_rate = 0.23;  // fraction of claims that are NotSupported
  double ii_rate = 0.0;      // fraction that are InsufficientInformation
  double alpha = 0.30;       // u_fact gain
  double beta = 4.0;         // u_bound gain
  double entity_gain = 4.0;  // entity-vocabulary content component
  double content_scale = 1.0;
  double sigma = 0.5;
  std::vector<int> layer_ids{20, 30};
  std::vector<double> layer_gains{1.0, 0.7};
  double resolution_gain = 1.5;  // u_fix / u_ret signal on intervention tokens
  std::size_t intervention_min = 3, intervention_max = 6;
  double icl_multiplier = 0.6;   // NS-rate multiplier per inline intervention
  double gate_flip_noise = 0.02;
  std::uint64_t direction_seed = 7;
  OutcomeModel outcomes{};

  // Throws ConfigError on invalid parameters.
  void validate() const;
  std::uint64_t fingerprint() const;
};

struct Claim {
  Span span;
  int topic = 0;
  VerificationLabel truth = VerificationLabel::Supported;
  double knowledge = 0.0;  // probability the policy can produce the correct fact
};

struct Completion {
  std::uint64_t id = 0;
  std::uint64_t prompt_seed = 0;
  std::vector<int> tokens;
  std::vector<Claim> claims;      // disjoint, sorted
  std::vector<Span> inserted;     // inline intervention text (incl. separator)
  std::uint64_t world_fingerprint = 0;

  std::size_t size() const { return tokens.size(); }
};

struct ActivationSheet {
  std::vector<int> layer_ids;
  std::vector<Matrix> layers;  // each tokens x feature_dim

  std::size_t tokens() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().rows()); }
  // Index of a layer id; throws if absent.
  std::size_t layer_index(int layer_id) const;
  const Matrix& layer(int layer_id) const { return layers[layer_index(layer_id)]; }
};

struct Intervention {
  std::uint64_t id = 0;
  Action action = Action::Maintain;
  int quality = 0;
  Outcome outcome = Outcome::None;
  bool legible = true;
  bool meta = false;
  bool on_script = true;
  bool substantive = true;
  bool strict_substantive = true;
  int length_units = 0;
  std::vector<int> tokens;
};

struct GateRecord {
  bool legible = true;
  bool format_ok = true;  // length within limit
  bool meta = false;
  Action predicted_action = Action::Maintain;
  bool substantive = true;
  bool strict_substantive = true;
};

inline constexpr int kMaxInterventionUnits = 384;

// Planted geometry and token embeddings for one parameter set.
class World {
 public:
  explicit World(WorldParams params);

  const WorldParams& params() const { return params_; }
  std::uint64_t fingerprint() const { return fingerprint_; }

  const Vector& u_fact() const { return dirs_[0]; }
  const Vector& u_bound() const { return dirs_[1]; }
  const Vector& u_fix() const { return dirs_[2]; }
  const Vector& u_ret() const { return dirs_[3]; }
  const Vector& u_entity() const { return dirs_[4]; }
  const Vector& content(int token) const { return embeddings_.at(static_cast<std::size_t>(token)); }

  bool is_entity_token(int token) const {
    return token >= static_cast<int>(params_.vocab_size / 2);
  }

 private:
  WorldParams params_;
  std::uint64_t fingerprint_;
  std::array<Vector, 5> dirs_;
  std::vector<Vector> embeddings_;
};

// Streaming generator. The raw completion for a seed is the result of a
// single extend(max_tokens); inline interventions truncate, splice and resume
// generation with a more cautious NS rate.
class Generator {
 public:
  Generator(const World& world, std::uint64_t prompt_seed);

  void extend(std::size_t budget);
  // Keeps tokens [0, cut), appends `text` and a separator, and returns the
  // first position after the inserted block.
  std::size_t insert_after(std::size_t cut, std::span<const int> text);

  const Completion& completion() const { return completion_; }
  std::size_t inline_count() const { return completion_.inserted.size(); }

 private:
  const World* world_;
  Completion completion_;
  Rng rng_;
};

Completion generate_completion(std::uint64_t seed, const World& world);
Completion generate_completion(std::uint64_t seed, const WorldParams& params);

// Residual activations for every token at the requested layer ids
// (all configured layers when empty).
ActivationSheet emit_activations(const Completion& c, const World& world,
                                 std::span<const int> layer_ids = {});

// Planted claims as (span, label) pairs.
std::vector<std::pair<Span, VerificationLabel>> oracle_extract_entities(const Completion& c);

// Ground-truth label of an arbitrary span: NotSupported iff the span holds
// claim tokens and at least half of them belong to NotSupported claims.
VerificationLabel oracle_verify_span(const Completion& c, const Span& span);

// Claim with the largest overlap (earliest on ties), if any.
std::optional<Claim> target_claim(const Completion& c, const Span& span);

// The claim an intervention on `span` resolves: the overlapping planted
// claim, or a Supported pseudo-claim with full knowledge for claim-free spans.
Claim resolve_target(const Completion& c, const Span& span);

// Samples outcome, judge-visible flags and text for an intervention.
Intervention realize_intervention(const World& world, const Claim& target, Action action,
                                  int quality, std::uint64_t id);

// Reward-label dispatch over (truth, action, outcome). Throws
// std::invalid_argument on inconsistent outcome fields or ungradeable truth.
RewardLabel oracle_grade(const Intervention& iv, const Claim& claim);
RewardLabel grade_with_truth(const Intervention& iv, VerificationLabel truth);
// Regrade of a correction labelled Retracted with the retraction rubric.
RewardLabel regrade_retracted(const Intervention& iv);

GateRecord judge_gates(const Intervention& iv, double flip_noise, std::uint64_t seed);
GateRecord judge_gates(const Intervention& iv, const World& world);

// Activation window read by the reward probes: the flagged span's rows
// followed by the intervention tokens carrying the resolution signal.
ActivationSheet emit_intervention_window(const World& world, const ActivationSheet& sheet,
                                         const Span& span, const Intervention& iv);

// Signal codes along u_fix / u_ret for an outcome.
std::pair<double, double> resolution_codes(Outcome o);

}  // namespace rlfr::world
