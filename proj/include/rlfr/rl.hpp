#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rlfr/kernel.hpp"
#include "rlfr/models.hpp"
#include "rlfr/reward.hpp"
#include "rlfr/world.hpp"

namespace rlfr::rl {

using kernel::Matrix;
using kernel::Vector;

// Initial action mix of the untrained policy on flagged entities
// (Correct, Maintain, Retract).
inline constexpr double kBaseCorrect = 0.4774;
inline constexpr double kBaseMaintain = 0.3948;
inline constexpr double kBaseRetract = 0.1277;

struct PolicySample {
  Action action = Action::Maintain;
  int quality = 0;
  double log_prob = 0.0;
};

// Tabular softmax policy: knowledge bucket -> action, then (bucket, action)
// -> quality level.
struct PolicyParams {
  Matrix action_logits;   // buckets x 3, columns ordered by Action
  Matrix quality_logits;  // (buckets * 3) x quality levels

  static PolicyParams uniform(std::size_t buckets);
  // Action logits set to the base mix, qualities uniform.
  static PolicyParams base(std::size_t buckets);

  std::size_t buckets() const { return static_cast<std::size_t>(action_logits.rows()); }
  std::size_t bucket_of(double knowledge) const;
  Vector action_probs(std::size_t bucket) const;
  Vector quality_probs(std::size_t bucket, Action a) const;
  double log_prob(std::size_t bucket, Action a, int quality) const;
  PolicySample sample(std::size_t bucket, Rng& rng) const;

  // Accumulates scale * d log pi(a, q | bucket) / d params into `grad`.
  void add_log_prob_grad(std::size_t bucket, Action a, int quality, double scale, PolicyParams& grad) const;

  std::vector<std::span<double>> tensors();
  void validate() const;
};

// ---- advantages -------------------------------------------------------------

struct Advantages {
  std::vector<std::vector<double>> values;  // same shape as the reward groups
  std::vector<bool> kept;
  double batch_std = 0.0;
  std::size_t kept_samples() const;
};

// Groups whose rewards span at most this width have all-zero advantages.
inline constexpr double kZeroAdvantageWidth = 1e-12;

// Mean-centre within each group, drop zero-advantage groups, divide the
// survivors by the population standard deviation over the surviving batch.
// Throws std::domain_error when every group is dropped.
Advantages compute_advantages(const std::vector<std::vector<double>>& group_rewards);

// ---- update -----------------------------------------------------------------

struct TrainerConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 512;   // interventions per optimizer step
  std::size_t group_size = 8;     // interventions per flagged entity
  double learning_rate = 3e-2;
  double weight_decay = 0.01;
  double adam_eps = 1e-15;
  double beta1 = 0.9, beta2 = 0.999;
  double kl_weight = 0.02;
  double clip_ceiling = 4.0;
  std::size_t reference_reset = 192;
  std::size_t off_policy_steps = 1;  // batches drawn per rollout policy snapshot
  std::size_t buckets = 10;
  double detection_threshold = 0.7;
  // Reference values the desk configuration is scaled from.
  std::size_t reference_batch_size = 32768;
  std::size_t reference_group_size = 32;
  double reference_learning_rate = 1e-6;

  std::size_t groups() const { return batch_size / group_size; }
  void validate() const;
};

struct UpdateSample {
  std::size_t bucket = 0;
  Action action = Action::Maintain;
  int quality = 0;
  double behavior_log_prob = 0.0;
  double advantage = 0.0;
};

// Per-sample stop-gradient coefficients: the clipped importance ratio and the
// k1 log-ratio against the reference.
struct SampleCoefficients {
  double ratio = 1.0;
  double clipped_ratio = 1.0;
  double k1 = 0.0;
};

std::vector<SampleCoefficients> sample_coefficients(const PolicyParams& student, const PolicyParams& reference,
                                                    std::span<const UpdateSample> batch, double clip_ceiling);

// Surrogate: mean over samples of -w_i (A_i - beta k1_i) log pi(y_i), with
// w_i and k1_i held fixed. Accumulates its gradient into `grad` if given.
double surrogate_loss(const PolicyParams& student, std::span<const UpdateSample> batch,
                      std::span<const SampleCoefficients> coeffs, double kl_weight, PolicyParams* grad);

struct TrainerState {
  PolicyParams student;
  PolicyParams reference;
  std::size_t step = 0;
  std::vector<double> adam_m, adam_v;
  std::size_t adam_t = 0;
};

TrainerState make_trainer(const PolicyParams& init);

struct UpdateDiagnostics {
  double loss = 0.0;
  double kl = 0.0;  // importance-weighted k1 estimate of KL(student || reference)
  double mean_ratio = 1.0;
  double clipped_fraction = 0.0;
  bool reference_reset = false;
};

// One AdamW step; resets the reference when the step counter reaches a
// multiple of the reset period. Throws std::domain_error on non-finite loss.
UpdateDiagnostics policy_update(TrainerState& state, std::span<const UpdateSample> batch, const TrainerConfig& cfg);

// ---- training loop ----------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double mean_reward = 0.0;
  std::optional<double> retraction_rate;
  double lambda = 0.0;  // value used for this step's rewards
  double action_mix[3] = {0, 0, 0};  // Maintain, Correct, Retract
  double oracle_fixed_rate = 0.0;    // on NotSupported targets
  double oracle_correct_retract_rate = 0.0;
  double oracle_success_rate = 0.0;
  std::size_t ns_targets = 0;
  std::size_t kept_groups = 0;
  bool updated = false;
  UpdateDiagnostics update;
};

struct TrainingResult {
  PolicyParams policy;
  reward::LagrangeState lagrange;
  std::vector<StepRecord> history;
};

struct FlaggedEntity {
  const world::Completion* completion = nullptr;
  const world::ActivationSheet* sheet = nullptr;
  Span span;
  world::Claim target;
};

// Rolls out `policy` on flagged entities without training and reports the
// same statistics as a training step. Used for untrained baselines.
StepRecord evaluate_policy(const PolicyParams& policy, const world::World& w, const probes::DetectionModel& det,
                           const probes::RewardModel& rew, const TrainerConfig& cfg, double lambda,
                           std::uint64_t seed, std::size_t rounds);

TrainingResult run_training(const TrainerConfig& cfg, const reward::LagrangeState& lagrange,
                            const PolicyParams& init, const world::World& w, const probes::DetectionModel& det,
                            const probes::RewardModel& rew, std::uint64_t seed);

}  // namespace rlfr::rl
