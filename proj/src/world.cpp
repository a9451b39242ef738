#include "rlfr/world.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rlfr/error.hpp"

namespace rlfr::world {

namespace {

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) { return mix64(h ^ mix64(v)); }
std::uint64_t hash_combine(std::uint64_t h, double v) { return hash_combine(h, std::bit_cast<std::uint64_t>(v)); }

template <std::size_t N>
std::uint64_t hash_array(std::uint64_t h, const std::array<double, N>& a) {
  for (double v : a) h = hash_combine(h, v);
  return h;
}

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

template <std::size_t N>
bool all_probabilities(const std::array<double, N>& a) {
  return std::all_of(a.begin(), a.end(), is_probability);
}

int random_filler(Rng& rng, std::size_t vocab) {
  return 1 + static_cast<int>(rng.below(vocab / 2 - 1));
}

int random_entity(Rng& rng, std::size_t vocab) {
  return static_cast<int>(vocab / 2 + rng.below(vocab / 2));
}

std::uint64_t generation_key(std::uint64_t prompt_seed) { return derive_key(prompt_seed, "generate"); }

// Noise stream for a token: keyed by the generation epoch (number of inline
// insertions at or before the token) and its position, so prefix activations
// never change when later text is spliced.
std::uint64_t token_noise_key(const Completion& c, std::size_t pos) {
  std::uint64_t epoch = 0;
  for (const auto& s : c.inserted) {
    if (s.start <= pos) ++epoch;
  }
  return derive_key(derive_key(derive_key(c.id, "activations"), epoch), pos);
}

Vector isotropic_noise(Rng& rng, std::size_t dim, double sigma) {
  Vector v(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = sigma * rng.normal();
  return v;
}

}  // namespace

void WorldParams::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("world: " + what); };
  if (feature_dim < 6) fail("feature_dim must be >= 6");
  if (vocab_size < 8 || vocab_size % 2 != 0) fail("vocab_size must be even and >= 8");
  if (max_tokens < 1) fail("max_tokens must be positive");
  if (gap_min < 1 || gap_max < gap_min) fail("invalid gap range");
  if (claim_min < 1 || claim_max < claim_min) fail("invalid claim length range");
  if (topics < 1) fail("topics must be positive");
  if (!is_probability(truth_rate)) fail("truth_rate must lie in [0,1]");
  if (!is_probability(ii_rate) || truth_rate + ii_rate > 1.0) fail("ii_rate invalid");
  if (!(sigma >= 0.0)) fail("sigma must be >= 0");
  if (layer_ids.empty() || layer_ids.size() != layer_gains.size()) fail("layer ids/gains mismatch");
  if (intervention_min < 1 || intervention_max < intervention_min) fail("invalid intervention length range");
  if (!(icl_multiplier >= 0.0 && icl_multiplier <= 1.0)) fail("icl_multiplier must lie in [0,1]");
  if (!is_probability(gate_flip_noise)) fail("gate_flip_noise must lie in [0,1]");
  const auto& o = outcomes;
  if (!all_probabilities(o.p_legible) || !all_probabilities(o.p_meta) ||
      !all_probabilities(o.p_on_script) || !all_probabilities(o.p_substantive) ||
      !all_probabilities(o.p_strict_given_substantive) || !all_probabilities(o.p_fixed_if_known) ||
      !all_probabilities(o.p_clean_retract) || !is_probability(o.p_no_retract)) {
    fail("outcome probabilities must lie in [0,1]");
  }
  for (std::size_t q = 0; q < kQualityLevels; ++q) {
    if (o.p_clean_retract[q] + o.p_no_retract > 1.0) fail("retraction outcome mix exceeds 1");
  }
  if (!all_probabilities(o.unknown_mix)) fail("unknown_mix must be probabilities");
}

std::uint64_t WorldParams::fingerprint() const {
  std::uint64_t h = tag_hash("world-params-v1");
  for (std::uint64_t v : {std::uint64_t(feature_dim), std::uint64_t(vocab_size), std::uint64_t(max_tokens),
                          std::uint64_t(gap_min), std::uint64_t(gap_max), std::uint64_t(claim_min),
                          std::uint64_t(claim_max), std::uint64_t(topics), std::uint64_t(intervention_min),
                          std::uint64_t(intervention_max), direction_seed}) {
    h = hash_combine(h, v);
  }
  for (double v : {truth_rate, ii_rate, alpha, beta, entity_gain, content_scale, sigma, resolution_gain,
                   icl_multiplier, gate_flip_noise}) {
    h = hash_combine(h, v);
  }
  for (int id : layer_ids) h = hash_combine(h, static_cast<std::uint64_t>(id));
  for (double g : layer_gains) h = hash_combine(h, g);
  const auto& o = outcomes;
  for (const auto* a : {&o.p_legible, &o.p_meta, &o.p_on_script, &o.p_substantive,
                        &o.p_strict_given_substantive, &o.length_mean, &o.p_fixed_if_known,
                        &o.p_clean_retract}) {
    h = hash_array(h, *a);
  }
  h = hash_array(h, o.unknown_mix);
  h = hash_combine(h, o.length_sd);
  h = hash_combine(h, o.p_no_retract);
  return h;
}

std::size_t ActivationSheet::layer_index(int layer_id) const {
  const auto it = std::find(layer_ids.begin(), layer_ids.end(), layer_id);
  if (it == layer_ids.end()) throw std::invalid_argument("activation sheet lacks layer " + std::to_string(layer_id));
  return static_cast<std::size_t>(std::distance(layer_ids.begin(), it));
}

World::World(WorldParams params) : params_(std::move(params)) {
  params_.validate();
  fingerprint_ = params_.fingerprint();
  const auto d = static_cast<Eigen::Index>(params_.feature_dim);
  Rng rng(derive_key(params_.direction_seed, "directions"));

  // Gram-Schmidt on Gaussian draws gives orthonormal planted directions.
  for (auto& dir : dirs_) {
    Vector v = isotropic_noise(rng, params_.feature_dim, 1.0);
    for (const auto& prev : dirs_) {
      if (prev.size() == d) v -= prev.dot(v) * prev;
    }
    dir = v.normalized();
  }

  // Content embeddings live in the orthogonal complement of the planted
  // directions so projections onto them are exact at zero noise.
  embeddings_.reserve(params_.vocab_size);
  for (std::size_t tok = 0; tok < params_.vocab_size; ++tok) {
    Vector v = isotropic_noise(rng, params_.feature_dim, 1.0);
    for (const auto& dir : dirs_) v -= dir.dot(v) * dir;
    v = v.normalized() * params_.content_scale;
    if (is_entity_token(static_cast<int>(tok))) v += params_.entity_gain * u_entity();
    embeddings_.push_back(std::move(v));
  }
}

Generator::Generator(const World& world, std::uint64_t prompt_seed)
    : world_(&world), rng_(generation_key(prompt_seed)) {
  completion_.id = prompt_seed;
  completion_.prompt_seed = prompt_seed;
  completion_.world_fingerprint = world.fingerprint();
}

void Generator::extend(std::size_t budget) {
  const auto& p = world_->params();
  auto& c = completion_;
  const double ns_rate = p.truth_rate * std::pow(p.icl_multiplier, static_cast<double>(c.inserted.size()));
  while (c.tokens.size() < budget) {
    const auto gap = static_cast<std::size_t>(rng_.range(static_cast<long long>(p.gap_min), static_cast<long long>(p.gap_max)));
    for (std::size_t i = 0; i < gap && c.tokens.size() < budget; ++i) {
      c.tokens.push_back(random_filler(rng_, p.vocab_size));
    }
    if (c.tokens.size() >= budget) break;
    const auto len = static_cast<std::size_t>(rng_.range(static_cast<long long>(p.claim_min), static_cast<long long>(p.claim_max)));
    if (c.tokens.size() + len > budget) {
      while (c.tokens.size() < budget) c.tokens.push_back(random_filler(rng_, p.vocab_size));
      break;
    }
    Claim claim;
    const double u = rng_.uniform();
    claim.truth = u < ns_rate ? VerificationLabel::NotSupported
                  : u < ns_rate + p.ii_rate ? VerificationLabel::InsufficientInformation
                                            : VerificationLabel::Supported;
    claim.knowledge = rng_.uniform();
    claim.topic = static_cast<int>(rng_.below(p.topics));
    claim.span = Span(c.tokens.size(), c.tokens.size() + len);
    for (std::size_t i = 0; i < len; ++i) c.tokens.push_back(random_entity(rng_, p.vocab_size));
    c.claims.push_back(claim);
  }
}

std::size_t Generator::insert_after(std::size_t cut, std::span<const int> text) {
  auto& c = completion_;
  if (cut > c.tokens.size()) throw std::out_of_range("insert_after: cut beyond completion");
  c.tokens.resize(cut);
  std::erase_if(c.claims, [cut](const Claim& cl) { return cl.span.start >= cut; });
  for (auto& cl : c.claims) cl.span.end = std::min(cl.span.end, cut);
  std::erase_if(c.inserted, [cut](const Span& s) { return s.start >= cut; });
  c.tokens.insert(c.tokens.end(), text.begin(), text.end());
  c.tokens.push_back(kSeparatorToken);
  const std::size_t resume = c.tokens.size();
  c.inserted.emplace_back(cut, resume);
  rng_ = Rng(derive_key(generation_key(c.prompt_seed), c.inserted.size()));
  return resume;
}

Completion generate_completion(std::uint64_t seed, const World& world) {
  Generator g(world, seed);
  g.extend(world.params().max_tokens);
  return g.completion();
}

Completion generate_completion(std::uint64_t seed, const WorldParams& params) {
  return generate_completion(seed, World(params));
}

ActivationSheet emit_activations(const Completion& c, const World& world, std::span<const int> layer_ids) {
  if (c.world_fingerprint != world.fingerprint()) {
    throw std::invalid_argument("emit_activations: completion was generated by a different world");
  }
  const auto& p = world.params();
  std::vector<int> ids(layer_ids.begin(), layer_ids.end());
  if (ids.empty()) ids = p.layer_ids;

  ActivationSheet sheet;
  sheet.layer_ids = ids;
  std::vector<double> gains;
  for (int id : ids) {
    const auto it = std::find(p.layer_ids.begin(), p.layer_ids.end(), id);
    if (it == p.layer_ids.end()) throw std::invalid_argument("emit_activations: unknown layer " + std::to_string(id));
    gains.push_back(p.layer_gains[static_cast<std::size_t>(std::distance(p.layer_ids.begin(), it))]);
    sheet.layers.emplace_back(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(p.feature_dim));
  }

  std::size_t next_claim = 0;
  for (std::size_t t = 0; t < c.size(); ++t) {
    while (next_claim < c.claims.size() && c.claims[next_claim].span.end <= t) ++next_claim;
    Vector signal = Vector::Zero(static_cast<Eigen::Index>(p.feature_dim));
    if (next_claim < c.claims.size() && c.claims[next_claim].span.start <= t) {
      const auto& claim = c.claims[next_claim];
      const double s = claim.truth == VerificationLabel::NotSupported ? 1.0 : -1.0;
      signal += p.alpha * s * world.u_fact();
      if (t == claim.span.start) signal += p.beta * world.u_bound();
    }
    const Vector& content = world.content(c.tokens[t]);
    const std::uint64_t key = token_noise_key(c, t);
    for (std::size_t l = 0; l < ids.size(); ++l) {
      Rng rng(derive_key(key, static_cast<std::uint64_t>(ids[l])));
      sheet.layers[l].row(static_cast<Eigen::Index>(t)) =
          (content + gains[l] * signal + isotropic_noise(rng, p.feature_dim, p.sigma)).transpose();
    }
  }
  return sheet;
}

std::vector<std::pair<Span, VerificationLabel>> oracle_extract_entities(const Completion& c) {
  std::vector<std::pair<Span, VerificationLabel>> out;
  out.reserve(c.claims.size());
  for (const auto& cl : c.claims) out.emplace_back(cl.span, cl.truth);
  return out;
}

VerificationLabel oracle_verify_span(const Completion& c, const Span& span) {
  std::size_t claim_tokens = 0, ns_tokens = 0;
  for (const auto& cl : c.claims) {
    const std::size_t n = intersection_size(cl.span, span);
    claim_tokens += n;
    if (cl.truth == VerificationLabel::NotSupported) ns_tokens += n;
  }
  if (claim_tokens > 0 && 2 * ns_tokens >= claim_tokens) return VerificationLabel::NotSupported;
  return VerificationLabel::Supported;
}

std::optional<Claim> target_claim(const Completion& c, const Span& span) {
  std::optional<Claim> best;
  std::size_t best_overlap = 0;
  for (const auto& cl : c.claims) {
    const std::size_t n = intersection_size(cl.span, span);
    if (n > best_overlap) {
      best_overlap = n;
      best = cl;
    }
  }
  return best;
}

Claim resolve_target(const Completion& c, const Span& span) {
  if (auto cl = target_claim(c, span)) return *cl;
  Claim pseudo;
  pseudo.span = span;
  pseudo.truth = VerificationLabel::Supported;
  pseudo.knowledge = 1.0;
  return pseudo;
}

Intervention realize_intervention(const World& world, const Claim& target, Action action, int quality,
                                  std::uint64_t id) {
  if (quality < 0 || quality >= static_cast<int>(kQualityLevels)) {
    throw std::invalid_argument("realize_intervention: quality out of range");
  }
  const auto& p = world.params();
  const auto& m = p.outcomes;
  const auto q = static_cast<std::size_t>(quality);
  Rng rng(derive_key(derive_key(p.direction_seed, "intervention"), id));

  Intervention iv;
  iv.id = id;
  iv.action = action;
  iv.quality = quality;
  iv.legible = rng.bernoulli(m.p_legible[q]);
  iv.meta = rng.bernoulli(m.p_meta[q]);
  iv.on_script = rng.bernoulli(m.p_on_script[q]);
  iv.substantive = rng.bernoulli(m.p_substantive[q]);
  const bool strict_draw = rng.bernoulli(m.p_strict_given_substantive[q]);
  iv.strict_substantive = iv.substantive && strict_draw;
  iv.length_units = std::max(1, static_cast<int>(std::lround(rng.normal(m.length_mean[q], m.length_sd))));

  const double u = rng.uniform();
  switch (action) {
    case Action::Maintain:
      iv.outcome = Outcome::None;
      break;
    case Action::Correct: {
      const bool knows = u < target.knowledge;
      if (knows) {
        iv.outcome = rng.bernoulli(m.p_fixed_if_known[q]) ? Outcome::Fixed : Outcome::NewIncorrect;
      } else {
        static constexpr std::array kUnknown = {Outcome::FailedFix, Outcome::Acknowledged, Outcome::DoubledDown,
                                                Outcome::NewIncorrect};
        iv.outcome = kUnknown[rng.categorical(m.unknown_mix)];
      }
      break;
    }
    case Action::Retract:
      iv.outcome = u < m.p_clean_retract[q]                    ? Outcome::CleanRetract
                   : u < m.p_clean_retract[q] + m.p_no_retract ? Outcome::NoRetract
                                                               : Outcome::WrongAspect;
      break;
  }

  const auto len = rng.range(static_cast<long long>(p.intervention_min), static_cast<long long>(p.intervention_max));
  for (long long i = 0; i < len; ++i) {
    iv.tokens.push_back(1 + static_cast<int>(rng.below(p.vocab_size - 1)));
  }
  return iv;
}

RewardLabel grade_with_truth(const Intervention& iv, VerificationLabel truth) {
  if (!outcome_matches_action(iv.outcome, iv.action)) {
    throw std::invalid_argument("grade: outcome " + std::string(to_string(iv.outcome)) +
                                " inconsistent with action " + std::string(to_string(iv.action)));
  }
  switch (truth) {
    case VerificationLabel::Supported:
      return iv.action == Action::Maintain ? RewardLabel::Stable : RewardLabel::Unstable;
    case VerificationLabel::InsufficientInformation:
      throw std::invalid_argument("grade: InsufficientInformation entities are not graded");
    case VerificationLabel::NotSupported:
      break;
  }
  switch (iv.outcome) {
    case Outcome::None: return RewardLabel::IncorrectMaintain;
    case Outcome::Fixed: return RewardLabel::Fixed;
    case Outcome::NewIncorrect: return RewardLabel::NewIncorrect;
    case Outcome::FailedFix: return RewardLabel::FailedFix;
    case Outcome::Acknowledged: return RewardLabel::Retracted;
    case Outcome::DoubledDown: return RewardLabel::IncorrectMaintain;
    case Outcome::CleanRetract: return RewardLabel::CorrectRetract;
    case Outcome::WrongAspect: return RewardLabel::IncorrectRetract;
    case Outcome::NoRetract: return RewardLabel::NotRetract;
  }
  throw std::logic_error("grade: unhandled outcome");
}

RewardLabel oracle_grade(const Intervention& iv, const Claim& claim) { return grade_with_truth(iv, claim.truth); }

RewardLabel regrade_retracted(const Intervention& iv) {
  if (iv.action != Action::Correct || iv.outcome != Outcome::Acknowledged) {
    throw std::invalid_argument("regrade_retracted: only Retracted corrections are regraded");
  }
  return iv.substantive ? RewardLabel::CorrectRetract : RewardLabel::IncorrectRetract;
}

GateRecord judge_gates(const Intervention& iv, double flip_noise, std::uint64_t seed) {
  Rng rng(derive_key(derive_key(seed, "judge"), iv.id));
  // Every gate consumes exactly one draw for its flip so streams stay aligned.
  auto noisy = [&](bool v) { return rng.uniform() < flip_noise ? !v : v; };

  GateRecord g;
  g.legible = noisy(iv.legible);
  g.format_ok = iv.length_units <= kMaxInterventionUnits;
  g.meta = noisy(iv.meta);

  Action judged = iv.action;
  if (!iv.on_script) {
    switch (iv.action) {
      case Action::Correct: judged = Action::Retract; break;
      case Action::Retract: judged = Action::Maintain; break;
      case Action::Maintain: judged = Action::Correct; break;
    }
  }
  const bool flip_action = rng.uniform() < flip_noise;
  const std::size_t shift = 1 + static_cast<std::size_t>(rng.below(2));
  if (flip_action) judged = action_from_index((index_of(judged) + shift) % kNumActions);
  g.predicted_action = judged;

  g.substantive = noisy(iv.substantive);
  g.strict_substantive = noisy(iv.strict_substantive);
  return g;
}

GateRecord judge_gates(const Intervention& iv, const World& world) {
  return judge_gates(iv, world.params().gate_flip_noise, world.params().direction_seed);
}

std::pair<double, double> resolution_codes(Outcome o) {
  switch (o) {
    case Outcome::None: return {-1.0, -0.5};
    case Outcome::Fixed: return {1.0, 0.0};
    case Outcome::NewIncorrect: return {0.35, 0.0};
    case Outcome::FailedFix: return {-0.3, 0.0};
    case Outcome::Acknowledged: return {-0.6, 0.6};
    case Outcome::DoubledDown: return {-1.0, -0.5};
    case Outcome::CleanRetract: return {0.0, 1.0};
    case Outcome::WrongAspect: return {0.0, 0.2};
    case Outcome::NoRetract: return {0.0, -0.8};
  }
  return {0.0, 0.0};
}

ActivationSheet emit_intervention_window(const World& world, const ActivationSheet& sheet, const Span& span,
                                         const Intervention& iv) {
  if (!span.valid_within(sheet.tokens())) throw std::invalid_argument("intervention window: span out of range");
  const auto& p = world.params();
  const auto [fix, ret] = resolution_codes(iv.outcome);
  const Vector signal = p.resolution_gain * (fix * world.u_fix() + ret * world.u_ret());
  const auto span_rows = static_cast<Eigen::Index>(span.length());
  const auto rows = span_rows + static_cast<Eigen::Index>(iv.tokens.size());

  ActivationSheet out;
  out.layer_ids = sheet.layer_ids;
  for (std::size_t l = 0; l < sheet.layers.size(); ++l) {
    const int id = sheet.layer_ids[l];
    const auto it = std::find(p.layer_ids.begin(), p.layer_ids.end(), id);
    if (it == p.layer_ids.end()) throw std::invalid_argument("intervention window: unknown layer");
    const double gain = p.layer_gains[static_cast<std::size_t>(std::distance(p.layer_ids.begin(), it))];
    Matrix m(rows, static_cast<Eigen::Index>(p.feature_dim));
    m.topRows(span_rows) = sheet.layers[l].middleRows(static_cast<Eigen::Index>(span.start), span_rows);
    for (std::size_t i = 0; i < iv.tokens.size(); ++i) {
      Rng rng(derive_key(derive_key(derive_key(iv.id, "window"), i), static_cast<std::uint64_t>(id)));
      m.row(span_rows + static_cast<Eigen::Index>(i)) =
          (world.content(iv.tokens[i]) + gain * signal + isotropic_noise(rng, p.feature_dim, p.sigma)).transpose();
    }
    out.layers.push_back(std::move(m));
  }
  return out;
}

}  // namespace rlfr::world
