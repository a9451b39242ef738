#include "rlfr/rl.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "rlfr/error.hpp"

namespace rlfr::rl {

namespace {

double log_softmax_at(const Eigen::Ref<const kernel::RowVector>& logits, Eigen::Index i) {
  const double m = logits.maxCoeff();
  return logits(i) - m - std::log((logits.array() - m).exp().sum());
}

Eigen::Index quality_row(std::size_t bucket, Action a) {
  return static_cast<Eigen::Index>(bucket * kNumActions + index_of(a));
}

}  // namespace

PolicyParams PolicyParams::uniform(std::size_t buckets) {
  if (buckets == 0) throw ConfigError("policy: bucket count must be >= 1");
  PolicyParams p;
  p.action_logits = Matrix::Zero(static_cast<Eigen::Index>(buckets), kNumActions);
  p.quality_logits = Matrix::Zero(static_cast<Eigen::Index>(buckets * kNumActions), world::kQualityLevels);
  return p;
}

PolicyParams PolicyParams::base(std::size_t buckets) {
  auto p = uniform(buckets);
  p.action_logits.col(static_cast<Eigen::Index>(index_of(Action::Maintain))).setConstant(std::log(kBaseMaintain));
  p.action_logits.col(static_cast<Eigen::Index>(index_of(Action::Correct))).setConstant(std::log(kBaseCorrect));
  p.action_logits.col(static_cast<Eigen::Index>(index_of(Action::Retract))).setConstant(std::log(kBaseRetract));
  return p;
}

std::size_t PolicyParams::bucket_of(double knowledge) const {
  const auto b = static_cast<std::size_t>(std::clamp(knowledge, 0.0, 1.0) * static_cast<double>(buckets()));
  return std::min(b, buckets() - 1);
}

Vector PolicyParams::action_probs(std::size_t bucket) const {
  return kernel::softmax(action_logits.row(static_cast<Eigen::Index>(bucket)).transpose());
}

Vector PolicyParams::quality_probs(std::size_t bucket, Action a) const {
  return kernel::softmax(quality_logits.row(quality_row(bucket, a)).transpose());
}

double PolicyParams::log_prob(std::size_t bucket, Action a, int quality) const {
  return log_softmax_at(action_logits.row(static_cast<Eigen::Index>(bucket)), static_cast<Eigen::Index>(index_of(a))) +
         log_softmax_at(quality_logits.row(quality_row(bucket, a)), quality);
}

PolicySample PolicyParams::sample(std::size_t bucket, Rng& rng) const {
  const Vector pa = action_probs(bucket);
  const Action a = action_from_index(rng.categorical(std::span<const double>(pa.data(), kNumActions)));
  const Vector pq = quality_probs(bucket, a);
  const int q = static_cast<int>(rng.categorical(std::span<const double>(pq.data(), static_cast<std::size_t>(pq.size()))));
  return {a, q, log_prob(bucket, a, q)};
}

void PolicyParams::add_log_prob_grad(std::size_t bucket, Action a, int quality, double scale,
                                     PolicyParams& grad) const {
  const auto b = static_cast<Eigen::Index>(bucket);
  grad.action_logits.row(b) -= scale * action_probs(bucket).transpose();
  grad.action_logits(b, static_cast<Eigen::Index>(index_of(a))) += scale;
  const auto r = quality_row(bucket, a);
  grad.quality_logits.row(r) -= scale * quality_probs(bucket, a).transpose();
  grad.quality_logits(r, quality) += scale;
}

std::vector<std::span<double>> PolicyParams::tensors() {
  return {std::span<double>(action_logits.data(), static_cast<std::size_t>(action_logits.size())),
          std::span<double>(quality_logits.data(), static_cast<std::size_t>(quality_logits.size()))};
}

void PolicyParams::validate() const {
  if (action_logits.rows() < 1 || action_logits.cols() != static_cast<Eigen::Index>(kNumActions)) {
    throw DataError("policy: action logits must be buckets x 3");
  }
  if (quality_logits.rows() != action_logits.rows() * static_cast<Eigen::Index>(kNumActions) ||
      quality_logits.cols() != static_cast<Eigen::Index>(world::kQualityLevels)) {
    throw DataError("policy: quality logits shape mismatch");
  }
  if (!action_logits.allFinite() || !quality_logits.allFinite()) throw DataError("policy: non-finite logits");
}

std::size_t Advantages::kept_samples() const {
  std::size_t n = 0;
  for (std::size_t g = 0; g < values.size(); ++g) {
    if (kept[g]) n += values[g].size();
  }
  return n;
}

Advantages compute_advantages(const std::vector<std::vector<double>>& group_rewards) {
  Advantages a;
  a.values.resize(group_rewards.size());
  a.kept.assign(group_rewards.size(), false);
  double sum_sq = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < group_rewards.size(); ++g) {
    const auto& r = group_rewards[g];
    if (r.empty()) throw std::invalid_argument("compute_advantages: empty group");
    const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(r.size());
    a.values[g].resize(r.size(), 0.0);
    if (*hi - *lo <= kZeroAdvantageWidth) continue;
    a.kept[g] = true;
    for (std::size_t i = 0; i < r.size(); ++i) {
      a.values[g][i] = r[i] - mean;
      sum_sq += a.values[g][i] * a.values[g][i];
      ++n;
    }
  }
  if (n == 0) throw std::domain_error("compute_advantages: all groups dropped");
  // Group means are zero, so the batch mean is zero as well.
  a.batch_std = std::sqrt(sum_sq / static_cast<double>(n));
  for (std::size_t g = 0; g < a.values.size(); ++g) {
    if (!a.kept[g]) continue;
    for (double& v : a.values[g]) v /= a.batch_std;
  }
  return a;
}

void TrainerConfig::validate() const {
  if (steps < 1) throw ConfigError("rl: steps must be >= 1");
  if (group_size < 2) throw ConfigError("rl: group size must be >= 2");
  if (batch_size < group_size || batch_size % group_size != 0) {
    throw ConfigError("rl: batch size must be a positive multiple of the group size");
  }
  if (!(learning_rate >= 0)) throw ConfigError("rl: learning rate must be >= 0");
  if (!(weight_decay >= 0)) throw ConfigError("rl: weight decay must be >= 0");
  if (!(adam_eps > 0)) throw ConfigError("rl: adam eps must be > 0");
  if (!(kl_weight >= 0)) throw ConfigError("rl: kl weight must be >= 0");
  if (!(clip_ceiling >= 1)) throw ConfigError("rl: clip ceiling must be >= 1");
  if (reference_reset < 1) throw ConfigError("rl: reference reset period must be > 0");
  if (off_policy_steps < 1) throw ConfigError("rl: off-policy steps must be >= 1");
  if (buckets < 1) throw ConfigError("rl: bucket count must be >= 1");
  if (!(detection_threshold > 0 && detection_threshold < 1)) throw ConfigError("rl: detection threshold in (0,1)");
}

std::vector<SampleCoefficients> sample_coefficients(const PolicyParams& student, const PolicyParams& reference,
                                                    std::span<const UpdateSample> batch, double clip_ceiling) {
  std::vector<SampleCoefficients> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    const double lp = student.log_prob(s.bucket, s.action, s.quality);
    SampleCoefficients c;
    c.ratio = std::exp(lp - s.behavior_log_prob);
    c.clipped_ratio = std::min(c.ratio, clip_ceiling);
    c.k1 = lp - reference.log_prob(s.bucket, s.action, s.quality);
    out.push_back(c);
  }
  return out;
}

double surrogate_loss(const PolicyParams& student, std::span<const UpdateSample> batch,
                      std::span<const SampleCoefficients> coeffs, double kl_weight, PolicyParams* grad) {
  if (batch.size() != coeffs.size()) throw std::invalid_argument("surrogate_loss: size mismatch");
  if (batch.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    const double weight = coeffs[i].clipped_ratio * (s.advantage - kl_weight * coeffs[i].k1);
    loss -= weight * student.log_prob(s.bucket, s.action, s.quality) * inv_n;
    if (grad) student.add_log_prob_grad(s.bucket, s.action, s.quality, -weight * inv_n, *grad);
  }
  return loss;
}

TrainerState make_trainer(const PolicyParams& init) {
  init.validate();
  TrainerState s;
  s.student = init;
  s.reference = init;
  const auto n = static_cast<std::size_t>(init.action_logits.size() + init.quality_logits.size());
  s.adam_m.assign(n, 0.0);
  s.adam_v.assign(n, 0.0);
  return s;
}

UpdateDiagnostics policy_update(TrainerState& state, std::span<const UpdateSample> batch, const TrainerConfig& cfg) {
  UpdateDiagnostics d;
  const auto coeffs = sample_coefficients(state.student, state.reference, batch, cfg.clip_ceiling);
  PolicyParams grad = PolicyParams::uniform(state.student.buckets());
  d.loss = surrogate_loss(state.student, batch, coeffs, cfg.kl_weight, &grad);
  if (!std::isfinite(d.loss)) throw std::domain_error("policy_update: non-finite loss");
  double ratio_sum = 0.0;
  std::size_t clipped = 0;
  for (const auto& c : coeffs) {
    d.kl += c.clipped_ratio * c.k1;
    ratio_sum += c.ratio;
    if (c.ratio > cfg.clip_ceiling) ++clipped;
  }
  if (!coeffs.empty()) {
    d.kl /= static_cast<double>(coeffs.size());
    d.mean_ratio = ratio_sum / static_cast<double>(coeffs.size());
    d.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(coeffs.size());
  }

  ++state.adam_t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.adam_t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.adam_t));
  auto params = state.student.tensors();
  auto grads = grad.tensors();
  std::size_t idx = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i, ++idx) {
      const double g = grads[t][i];
      if (!std::isfinite(g)) throw std::domain_error("policy_update: non-finite gradient");
      auto& m = state.adam_m[idx];
      auto& v = state.adam_v[idx];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      double& theta = params[t][i];
      theta -= cfg.learning_rate * cfg.weight_decay * theta;
      theta -= cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
    }
  }
  ++state.step;
  if (state.step % cfg.reference_reset == 0) {
    state.reference = state.student;
    d.reference_reset = true;
  }
  return d;
}

// ---- rollouts ---------------------------------------------------------------

namespace {

struct EntityPool {
  std::vector<std::unique_ptr<world::Completion>> completions;
  std::vector<std::unique_ptr<world::ActivationSheet>> sheets;
  std::vector<FlaggedEntity> entities;
};

// Generates completions from derived seeds until `count` flagged entities
// have been collected.
EntityPool collect_entities(const world::World& w, const probes::DetectionModel& det, double threshold,
                            std::size_t count, std::uint64_t key) {
  EntityPool pool;
  constexpr std::size_t kMaxCompletions = 1'000'000;
  for (std::size_t i = 0; pool.entities.size() < count; ++i) {
    if (i >= kMaxCompletions) throw std::runtime_error("rl: detector flags nothing; cannot form groups");
    auto c = std::make_unique<world::Completion>(world::generate_completion(derive_key(key, i), w));
    auto sheet = std::make_unique<world::ActivationSheet>(world::emit_activations(*c, w));
    bool used = false;
    for (const auto& d : probes::scan(det, *c, *sheet, 0)) {
      if (d.score < threshold) continue;
      pool.entities.push_back({c.get(), sheet.get(), d.span, world::resolve_target(*c, d.span)});
      used = true;
      if (pool.entities.size() == count) break;
    }
    if (used) {
      pool.completions.push_back(std::move(c));
      pool.sheets.push_back(std::move(sheet));
    }
  }
  return pool;
}

struct Rollout {
  std::vector<std::vector<UpdateSample>> samples;  // per group
  std::vector<std::vector<double>> rewards;
  std::vector<reward::JudgedIntervention> judged;
  StepRecord stats;
};

Rollout rollout(const PolicyParams& policy, const world::World& w, const probes::DetectionModel& det,
                const probes::RewardModel& rew, const TrainerConfig& cfg, double lambda, std::uint64_t key) {
  const auto pool = collect_entities(w, det, cfg.detection_threshold, cfg.groups(), derive_key(key, "entities"));
  Rng rng(derive_key(key, "policy"));
  Rollout out;
  out.samples.resize(pool.entities.size());
  out.rewards.resize(pool.entities.size());
  double reward_sum = 0.0;
  std::size_t fixed = 0, clean = 0, counts[3] = {0, 0, 0};
  for (std::size_t g = 0; g < pool.entities.size(); ++g) {
    const auto& e = pool.entities[g];
    const std::size_t bucket = policy.bucket_of(e.target.knowledge);
    for (std::size_t i = 0; i < cfg.group_size; ++i) {
      const auto s = policy.sample(bucket, rng);
      const auto id = derive_key(derive_key(key, "intervention"), g * cfg.group_size + i);
      const auto iv = world::realize_intervention(w, e.target, s.action, s.quality, id);
      const auto gates = world::judge_gates(iv, w);
      double score = 0.0;
      if (s.action != Action::Maintain) {
        const auto window = world::emit_intervention_window(w, *e.sheet, e.span, iv);
        score = rew.selection_score(iv, window);
      }
      const auto b = reward::assign_reward(s.action, gates, score, lambda);
      out.samples[g].push_back({bucket, s.action, s.quality, s.log_prob, 0.0});
      out.rewards[g].push_back(b.reward);
      out.judged.push_back({s.action, gates});
      reward_sum += b.reward;
      ++counts[index_of(s.action)];
      if (e.target.truth == VerificationLabel::NotSupported) {
        ++out.stats.ns_targets;
        if (iv.outcome == Outcome::Fixed) ++fixed;
        if (iv.outcome == Outcome::CleanRetract) ++clean;
      }
    }
  }
  const double n = static_cast<double>(pool.entities.size() * cfg.group_size);
  auto& st = out.stats;
  st.mean_reward = reward_sum / n;
  st.lambda = lambda;
  for (std::size_t a = 0; a < 3; ++a) st.action_mix[a] = static_cast<double>(counts[a]) / n;
  if (st.ns_targets > 0) {
    const double ns = static_cast<double>(st.ns_targets);
    st.oracle_fixed_rate = static_cast<double>(fixed) / ns;
    st.oracle_correct_retract_rate = static_cast<double>(clean) / ns;
    st.oracle_success_rate = static_cast<double>(fixed + clean) / ns;
  }
  st.retraction_rate = reward::empirical_retraction_rate(out.judged);
  return out;
}

}  // namespace

StepRecord evaluate_policy(const PolicyParams& policy, const world::World& w, const probes::DetectionModel& det,
                           const probes::RewardModel& rew, const TrainerConfig& cfg, double lambda,
                           std::uint64_t seed, std::size_t rounds) {
  cfg.validate();
  if (rounds == 0) throw std::invalid_argument("evaluate_policy: rounds must be positive");
  StepRecord total;
  std::size_t ns = 0;
  double fixed = 0, clean = 0;
  for (std::size_t r = 0; r < rounds; ++r) {
    const auto ro = rollout(policy, w, det, rew, cfg, lambda, derive_key(derive_key(seed, "evaluate"), r));
    const auto& s = ro.stats;
    total.mean_reward += s.mean_reward / static_cast<double>(rounds);
    for (int a = 0; a < 3; ++a) total.action_mix[a] += s.action_mix[a] / static_cast<double>(rounds);
    ns += s.ns_targets;
    fixed += s.oracle_fixed_rate * static_cast<double>(s.ns_targets);
    clean += s.oracle_correct_retract_rate * static_cast<double>(s.ns_targets);
    if (s.retraction_rate) total.retraction_rate = total.retraction_rate.value_or(0.0) + *s.retraction_rate / static_cast<double>(rounds);
  }
  total.lambda = lambda;
  total.ns_targets = ns;
  if (ns > 0) {
    total.oracle_fixed_rate = fixed / static_cast<double>(ns);
    total.oracle_correct_retract_rate = clean / static_cast<double>(ns);
    total.oracle_success_rate = (fixed + clean) / static_cast<double>(ns);
  }
  return total;
}

TrainingResult run_training(const TrainerConfig& cfg, const reward::LagrangeState& lagrange,
                            const PolicyParams& init, const world::World& w, const probes::DetectionModel& det,
                            const probes::RewardModel& rew, std::uint64_t seed) {
  cfg.validate();
  lagrange.validate();
  TrainingResult result;
  result.lagrange = lagrange;
  auto state = make_trainer(init);
  const std::uint64_t root = derive_key(seed, "rl");

  std::size_t step = 0;
  for (std::size_t outer = 0; step < cfg.steps; ++outer) {
    // One behaviour snapshot serves up to off_policy_steps optimizer steps.
    const PolicyParams behavior = state.student;
    for (std::size_t k = 0; k < cfg.off_policy_steps && step < cfg.steps; ++k, ++step) {
      auto ro = rollout(behavior, w, det, rew, cfg, result.lagrange.lambda, derive_key(root, step));
      StepRecord rec = ro.stats;
      rec.step = step;
      if (ro.stats.retraction_rate) result.lagrange = reward::update_lambda(result.lagrange, *ro.stats.retraction_rate);

      std::optional<Advantages> adv;
      try {
        adv = compute_advantages(ro.rewards);
      } catch (const std::domain_error&) {
        adv.reset();
      }
      if (adv) {
        std::vector<UpdateSample> batch;
        for (std::size_t g = 0; g < ro.samples.size(); ++g) {
          if (!adv->kept[g]) continue;
          ++rec.kept_groups;
          for (std::size_t i = 0; i < ro.samples[g].size(); ++i) {
            auto s = ro.samples[g][i];
            s.advantage = adv->values[g][i];
            batch.push_back(s);
          }
        }
        rec.update = policy_update(state, batch, cfg);
        rec.updated = true;
      }
      result.history.push_back(rec);
    }
  }
  result.policy = state.student;
  return result;
}

}  // namespace rlfr::rl
