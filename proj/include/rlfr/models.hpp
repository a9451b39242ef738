#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "rlfr/probes.hpp"
#include "rlfr/world.hpp"

// Probe datasets built from the synthetic world, the trained probe bundle, and
// the scoring interfaces the RL and inference stages consume.
namespace rlfr::probes {

// Class orders of the reward probes; index 0 is the positive class.
inline constexpr std::array kCorrectionClasses{RewardLabel::Fixed, RewardLabel::NewIncorrect, RewardLabel::FailedFix,
                                               RewardLabel::Retracted, RewardLabel::IncorrectMaintain};
inline constexpr std::array kRetractionClasses{RewardLabel::CorrectRetract, RewardLabel::IncorrectRetract,
                                               RewardLabel::NotRetract};

// Index of `label` within a class list; throws if absent.
int class_index(std::span<const RewardLabel> classes, RewardLabel label);

// ---- datasets ---------------------------------------------------------------

struct DatasetSpec {
  std::uint64_t first_seed = 0;
  std::size_t completions = 500;
};

std::vector<world::Completion> generate_dataset(const world::World& w, const DatasetSpec& spec);

// Each builder has a seed-range form and a form over explicit completions.
std::vector<TokenExample> localization_dataset(const world::World& w, const DatasetSpec& spec, int layer_id);
std::vector<TokenExample> localization_dataset(const world::World& w, std::span<const world::Completion> data,
                                               int layer_id);

// One example per Supported/NotSupported claim, label 1 iff NotSupported.
// With `background`, the claim-free segments of the gold segmentation are
// added as label-0 examples, since the detector scores every segment.
std::vector<PooledExample> classification_dataset(const world::World& w, const DatasetSpec& spec,
                                                  std::span<const int> layer_ids, bool background = false);
std::vector<PooledExample> classification_dataset(const world::World& w, std::span<const world::Completion> data,
                                                  std::span<const int> layer_ids, bool background = false);

// Interventions of `action` on NotSupported claims with uniform quality,
// labelled by the grading oracle within the probe's class list.
std::vector<PooledExample> reward_dataset(const world::World& w, const DatasetSpec& spec, Action action,
                                          std::span<const int> layer_ids);
// `key` seeds the quality draws; the seed-range form uses spec.first_seed.
std::vector<PooledExample> reward_dataset(const world::World& w, std::span<const world::Completion> data,
                                          Action action, std::span<const int> layer_ids, std::uint64_t key);

// ---- scoring interfaces -------------------------------------------------------

class DetectionModel {
 public:
  virtual ~DetectionModel() = default;
  // Per-token probability that token t continues the entity of token t-1.
  virtual Vector boundary_probs(const world::Completion& c, const world::ActivationSheet& sheet) const = 0;
  // Probability that the span is a hallucination.
  virtual double hallucination_prob(const world::Completion& c, const world::ActivationSheet& sheet,
                                    const Span& span) const = 0;
};

class RewardModel {
 public:
  virtual ~RewardModel() = default;
  // P(Fixed) for a correction window; P(CorrectRetract) for a retraction window.
  virtual double fixed_prob(const world::Intervention& iv, const world::ActivationSheet& window) const = 0;
  virtual double correct_retract_prob(const world::Intervention& iv, const world::ActivationSheet& window) const = 0;
  // Action-appropriate score used for best-of-N: the correction probe scores
  // Correct and Maintain candidates, the retraction probe Retract candidates.
  double selection_score(const world::Intervention& iv, const world::ActivationSheet& window) const;
};

struct ProbeTrainingConfig {
  TransformerProbeConfig localization;
  TrainRecipe localization_recipe;
  AttentionProbeConfig classification;
  TrainRecipe classification_recipe;
  AttentionProbeConfig correction;
  TrainRecipe correction_recipe;
  AttentionProbeConfig retraction;
  TrainRecipe retraction_recipe;
  DatasetSpec localization_data{1'000'000, 300};
  DatasetSpec classification_data{2'000'000, 1500};
  DatasetSpec reward_data{3'000'000, 1500};

  // Desk-scale defaults for a world of the given feature dimension.
  static ProbeTrainingConfig desk(std::size_t feature_dim);
  void validate() const;
};

struct ProbeSet final : DetectionModel, RewardModel {
  TransformerProbeWeights localization;
  AttentionProbeWeights classification;
  AttentionProbeWeights correction;
  AttentionProbeWeights retraction;

  Vector boundary_probs(const world::Completion& c, const world::ActivationSheet& sheet) const override;
  double hallucination_prob(const world::Completion& c, const world::ActivationSheet& sheet,
                            const Span& span) const override;
  double fixed_prob(const world::Intervention& iv, const world::ActivationSheet& window) const override;
  double correct_retract_prob(const world::Intervention& iv, const world::ActivationSheet& window) const override;
};

struct ProbeTrainingReport {
  std::vector<EpochRecord> localization, classification, correction, retraction;
};

// With a non-empty `dataset`, all four probes train on those completions
// instead of the configured seed ranges.
ProbeSet train_probe_set(const world::World& w, const ProbeTrainingConfig& cfg, std::uint64_t seed,
                         ProbeTrainingReport* report = nullptr, std::span<const world::Completion> dataset = {});

// Ground-truth scorers used as references: detection from planted claims,
// rewards from the realized outcome.
class OracleDetection final : public DetectionModel {
 public:
  Vector boundary_probs(const world::Completion& c, const world::ActivationSheet& sheet) const override;
  double hallucination_prob(const world::Completion& c, const world::ActivationSheet& sheet,
                            const Span& span) const override;
};

class OracleReward final : public RewardModel {
 public:
  double fixed_prob(const world::Intervention& iv, const world::ActivationSheet& window) const override;
  double correct_retract_prob(const world::Intervention& iv, const world::ActivationSheet& window) const override;
};

struct Detection {
  Span span;
  double score = 0.0;
};

// Segments starting at or after `probe_start`, each scored by the
// classification model, in start order.
std::vector<Detection> scan(const DetectionModel& m, const world::Completion& c, const world::ActivationSheet& sheet,
                            std::size_t probe_start, double boundary_threshold = 0.5);

// Bayes-optimal hallucination statistic for a span: the log-likelihood ratio
// of NotSupported vs Supported given the planted u_fact projections.
double bayes_llr(const world::World& w, const world::ActivationSheet& sheet, const Span& span);

}  // namespace rlfr::probes
