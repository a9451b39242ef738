#include "rlfr/models.hpp"

#include <algorithm>
#include <stdexcept>

#include "rlfr/error.hpp"

namespace rlfr::probes {

int class_index(std::span<const RewardLabel> classes, RewardLabel label) {
  const auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) throw std::invalid_argument("label " + std::string(to_string(label)) + " not in class list");
  return static_cast<int>(std::distance(classes.begin(), it));
}

std::vector<world::Completion> generate_dataset(const world::World& w, const DatasetSpec& spec) {
  std::vector<world::Completion> out;
  out.reserve(spec.completions);
  for (std::size_t i = 0; i < spec.completions; ++i) out.push_back(world::generate_completion(spec.first_seed + i, w));
  return out;
}

std::vector<TokenExample> localization_dataset(const world::World& w, std::span<const world::Completion> data,
                                               int layer_id) {
  std::vector<TokenExample> out;
  out.reserve(data.size());
  const std::vector<int> ids{layer_id};
  for (const auto& c : data) {
    const auto sheet = world::emit_activations(c, w, ids);
    out.push_back({sheet.layers[0], continuation_labels(c)});
  }
  return out;
}

std::vector<TokenExample> localization_dataset(const world::World& w, const DatasetSpec& spec, int layer_id) {
  return localization_dataset(w, generate_dataset(w, spec), layer_id);
}

std::vector<PooledExample> classification_dataset(const world::World& w, std::span<const world::Completion> data,
                                                  std::span<const int> layer_ids, bool background) {
  std::vector<PooledExample> out;
  for (const auto& c : data) {
    const auto sheet = world::emit_activations(c, w, layer_ids);
    for (const auto& cl : c.claims) {
      if (cl.truth == VerificationLabel::InsufficientInformation) continue;
      out.push_back({gather(sheet, layer_ids, cl.span), cl.truth == VerificationLabel::NotSupported ? 1 : 0});
    }
    if (!background) continue;
    const auto labels = continuation_labels(c);
    std::vector<double> joins(labels.begin(), labels.end());
    for (const auto& seg : segment(joins, 0.5)) {
      const bool has_claim = std::any_of(c.claims.begin(), c.claims.end(),
                                         [&](const world::Claim& cl) { return intersection_size(cl.span, seg) > 0; });
      if (!has_claim) out.push_back({gather(sheet, layer_ids, seg), 0});
    }
  }
  return out;
}

std::vector<PooledExample> classification_dataset(const world::World& w, const DatasetSpec& spec,
                                                  std::span<const int> layer_ids, bool background) {
  return classification_dataset(w, generate_dataset(w, spec), layer_ids, background);
}

std::vector<PooledExample> reward_dataset(const world::World& w, std::span<const world::Completion> data,
                                          Action action, std::span<const int> layer_ids, std::uint64_t key) {
  if (action == Action::Maintain) throw std::invalid_argument("reward_dataset: no probe grades Maintain");
  const std::span<const RewardLabel> classes =
      action == Action::Correct ? std::span<const RewardLabel>(kCorrectionClasses) : std::span<const RewardLabel>(kRetractionClasses);
  std::vector<PooledExample> out;
  Rng rng(derive_key(key, action == Action::Correct ? "correction-data" : "retraction-data"));
  for (const auto& c : data) {
    const auto sheet = world::emit_activations(c, w, layer_ids);
    for (std::size_t k = 0; k < c.claims.size(); ++k) {
      const auto& cl = c.claims[k];
      if (cl.truth != VerificationLabel::NotSupported) continue;
      const int quality = static_cast<int>(rng.below(world::kQualityLevels));
      const auto id = derive_key(derive_key(key, "reward-data"), c.prompt_seed * 64 + k);
      const auto iv = world::realize_intervention(w, cl, action, quality, id);
      const auto window = world::emit_intervention_window(w, sheet, cl.span, iv);
      const auto label = world::oracle_grade(iv, cl);
      out.push_back({gather(window, layer_ids, Span(0, window.tokens())), class_index(classes, label)});
    }
  }
  return out;
}

std::vector<PooledExample> reward_dataset(const world::World& w, const DatasetSpec& spec, Action action,
                                          std::span<const int> layer_ids) {
  return reward_dataset(w, generate_dataset(w, spec), action, layer_ids, spec.first_seed);
}

double RewardModel::selection_score(const world::Intervention& iv, const world::ActivationSheet& window) const {
  return iv.action == Action::Retract ? correct_retract_prob(iv, window) : fixed_prob(iv, window);
}

ProbeTrainingConfig ProbeTrainingConfig::desk(std::size_t feature_dim) {
  ProbeTrainingConfig c;
  c.localization.input_dim = feature_dim;
  c.localization.input_layer = 20;
  c.localization.layers = 2;
  c.localization.embed = 32;
  c.localization.heads = 4;
  c.localization.mlp = 64;
  c.localization.window = 256;
  c.localization.rope_theta = 32.0;
  c.localization_recipe = {.learning_rate = 1e-3, .weight_decay = 0.1, .epochs = 5, .batch_size = 8};

  c.classification.input_dim = feature_dim;
  c.classification.input_layers = {20, 30};
  c.classification.embed = 32;
  c.classification.heads = 4;
  c.classification.classes = 2;
  c.classification_recipe = {.learning_rate = 5e-2, .weight_decay = 0.1, .epochs = 8, .batch_size = 64};

  c.correction = c.classification;
  c.correction.input_layers = {20};
  c.correction.classes = kCorrectionClasses.size();
  c.correction_recipe = {.learning_rate = 1e-3, .weight_decay = 0.01, .epochs = 8, .positive_class = 0,
                         .positive_weight = 2.0, .batch_size = 32};

  c.retraction = c.classification;
  c.retraction.classes = kRetractionClasses.size();
  c.retraction_recipe = {.learning_rate = 1e-3, .weight_decay = 0.01, .epochs = 10, .positive_class = 0,
                         .positive_weight = 0.5, .batch_size = 32};
  return c;
}

void ProbeTrainingConfig::validate() const {
  localization.validate();
  classification.validate();
  correction.validate();
  retraction.validate();
  localization_recipe.validate();
  classification_recipe.validate();
  correction_recipe.validate();
  retraction_recipe.validate();
  if (classification.classes != 2) throw ConfigError("classification probe must have 2 classes");
  if (correction.classes != kCorrectionClasses.size()) throw ConfigError("correction probe must have 5 classes");
  if (retraction.classes != kRetractionClasses.size()) throw ConfigError("retraction probe must have 3 classes");
  for (const auto* d : {&localization_data, &classification_data, &reward_data}) {
    if (d->completions == 0) throw ConfigError("probe datasets must be non-empty");
  }
}

Vector ProbeSet::boundary_probs(const world::Completion&, const world::ActivationSheet& sheet) const {
  return localization_probs(sheet, localization);
}

double ProbeSet::hallucination_prob(const world::Completion&, const world::ActivationSheet& sheet,
                                    const Span& span) const {
  return attention_probe_forward(sheet, span, classification).probs(1);
}

double ProbeSet::fixed_prob(const world::Intervention&, const world::ActivationSheet& window) const {
  return attention_probe_forward(window, Span(0, window.tokens()), correction).probs(0);
}

double ProbeSet::correct_retract_prob(const world::Intervention&, const world::ActivationSheet& window) const {
  return attention_probe_forward(window, Span(0, window.tokens()), retraction).probs(0);
}

ProbeSet train_probe_set(const world::World& w, const ProbeTrainingConfig& cfg, std::uint64_t seed,
                         ProbeTrainingReport* report, std::span<const world::Completion> dataset) {
  cfg.validate();
  const bool given = !dataset.empty();
  ProbeSet set;
  {
    const auto data = given ? localization_dataset(w, dataset, cfg.localization.input_layer)
                            : localization_dataset(w, cfg.localization_data, cfg.localization.input_layer);
    auto r = train_localization(data, cfg.localization, cfg.localization_recipe, derive_key(seed, "localization"));
    set.localization = std::move(r.weights);
    if (report) report->localization = std::move(r.history);
  }
  {
    const auto data = given ? classification_dataset(w, dataset, cfg.classification.input_layers, true)
                            : classification_dataset(w, cfg.classification_data, cfg.classification.input_layers, true);
    auto r = train_attention(data, cfg.classification, cfg.classification_recipe, derive_key(seed, "classification"));
    set.classification = std::move(r.weights);
    if (report) report->classification = std::move(r.history);
  }
  const auto key = given ? dataset.front().prompt_seed : cfg.reward_data.first_seed;
  {
    const auto data = given ? reward_dataset(w, dataset, Action::Correct, cfg.correction.input_layers, key)
                            : reward_dataset(w, cfg.reward_data, Action::Correct, cfg.correction.input_layers);
    auto r = train_attention(data, cfg.correction, cfg.correction_recipe, derive_key(seed, "correction"));
    set.correction = std::move(r.weights);
    if (report) report->correction = std::move(r.history);
  }
  {
    const auto data = given ? reward_dataset(w, dataset, Action::Retract, cfg.retraction.input_layers, key)
                            : reward_dataset(w, cfg.reward_data, Action::Retract, cfg.retraction.input_layers);
    auto r = train_attention(data, cfg.retraction, cfg.retraction_recipe, derive_key(seed, "retraction"));
    set.retraction = std::move(r.weights);
    if (report) report->retraction = std::move(r.history);
  }
  return set;
}

Vector OracleDetection::boundary_probs(const world::Completion& c, const world::ActivationSheet&) const {
  const auto labels = continuation_labels(c);
  Vector p(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t t = 0; t < labels.size(); ++t) p(static_cast<Eigen::Index>(t)) = labels[t];
  return p;
}

double OracleDetection::hallucination_prob(const world::Completion& c, const world::ActivationSheet&,
                                           const Span& span) const {
  return world::oracle_verify_span(c, span) == VerificationLabel::NotSupported ? 1.0 : 0.0;
}

double OracleReward::fixed_prob(const world::Intervention& iv, const world::ActivationSheet&) const {
  return iv.outcome == Outcome::Fixed ? 1.0 : 0.0;
}

double OracleReward::correct_retract_prob(const world::Intervention& iv, const world::ActivationSheet&) const {
  return iv.outcome == Outcome::CleanRetract ? 1.0 : 0.0;
}

std::vector<Detection> scan(const DetectionModel& m, const world::Completion& c, const world::ActivationSheet& sheet,
                            std::size_t probe_start, double boundary_threshold) {
  std::vector<Detection> out;
  if (probe_start >= c.size()) return out;
  const Vector p = m.boundary_probs(c, sheet);
  for (const auto& span : segment(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())),
                                  boundary_threshold, probe_start)) {
    out.push_back({span, m.hallucination_prob(c, sheet, span)});
  }
  return out;
}

double bayes_llr(const world::World& w, const world::ActivationSheet& sheet, const Span& span) {
  const auto& p = w.params();
  if (!(p.sigma > 0)) throw std::invalid_argument("bayes_llr: requires sigma > 0");
  double llr = 0.0;
  for (std::size_t l = 0; l < sheet.layer_ids.size(); ++l) {
    const auto it = std::find(p.layer_ids.begin(), p.layer_ids.end(), sheet.layer_ids[l]);
    const double gain = p.layer_gains[static_cast<std::size_t>(std::distance(p.layer_ids.begin(), it))];
    const Vector proj = sheet.layers[l].middleRows(static_cast<Eigen::Index>(span.start),
                                                   static_cast<Eigen::Index>(span.length())) * w.u_fact();
    llr += 2.0 * p.alpha * gain * proj.sum() / (p.sigma * p.sigma);
  }
  return llr;
}

}  // namespace rlfr::probes
