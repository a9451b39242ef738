#include "rlfr/config.hpp"

#include <algorithm>
#include <cstdio>

#include "rlfr/error.hpp"

namespace rlfr {

namespace {

// Each describe() lists the fields of one config struct once; the writer and
// reader visitors below walk the same list.

template <typename V>
void describe(V& v, world::OutcomeModel& o) {
  v("p_legible", o.p_legible);
  v("p_meta", o.p_meta);
  v("p_on_script", o.p_on_script);
  v("p_substantive", o.p_substantive);
  v("p_strict_given_substantive", o.p_strict_given_substantive);
  v("length_mean", o.length_mean);
  v("length_sd", o.length_sd);
  v("p_fixed_if_known", o.p_fixed_if_known);
  v("unknown_mix", o.unknown_mix);
  v("p_clean_retract", o.p_clean_retract);
  v("p_no_retract", o.p_no_retract);
}

template <typename V>
void describe(V& v, world::WorldParams& p) {
  v("feature_dim", p.feature_dim);
  v("vocab_size", p.vocab_size);
  v("max_tokens", p.max_tokens);
  v("gap_min", p.gap_min);
  v("gap_max", p.gap_max);
  v("claim_min", p.claim_min);
  v("claim_max", p.claim_max);
  v("topics", p.topics);
  v("truth_rate", p.truth_rate);
  v("ii_rate", p.ii_rate);
  v("alpha", p.alpha);
  v("beta", p.beta);
  v("entity_gain", p.entity_gain);
  v("content_scale", p.content_scale);
  v("sigma", p.sigma);
  v("layer_ids", p.layer_ids);
  v("layer_gains", p.layer_gains);
  v("resolution_gain", p.resolution_gain);
  v("intervention_min", p.intervention_min);
  v("intervention_max", p.intervention_max);
  v("icl_multiplier", p.icl_multiplier);
  v("gate_flip_noise", p.gate_flip_noise);
  v("direction_seed", p.direction_seed);
  v("outcomes", p.outcomes);
}

template <typename V>
void describe(V& v, probes::TransformerProbeConfig& c) {
  v("input_dim", c.input_dim);
  v("input_layer", c.input_layer);
  v("layers", c.layers);
  v("embed", c.embed);
  v("heads", c.heads);
  v("mlp", c.mlp);
  v("window", c.window);
  v("rope_theta", c.rope_theta);
  v("max_positions", c.max_positions);
}

template <typename V>
void describe(V& v, probes::AttentionProbeConfig& c) {
  v("input_dim", c.input_dim);
  v("input_layers", c.input_layers);
  v("embed", c.embed);
  v("heads", c.heads);
  v("classes", c.classes);
}

template <typename V>
void describe(V& v, probes::TrainRecipe& r) {
  v("learning_rate", r.learning_rate);
  v("weight_decay", r.weight_decay);
  v("epochs", r.epochs);
  v("positive_class", r.positive_class);
  v("positive_weight", r.positive_weight);
  v("batch_size", r.batch_size);
  v("warmup_fraction", r.warmup_fraction);
  v("beta1", r.beta1);
  v("beta2", r.beta2);
  v("adam_eps", r.adam_eps);
}

template <typename V>
void describe(V& v, probes::DatasetSpec& d) {
  v("first_seed", d.first_seed);
  v("completions", d.completions);
}

template <typename V>
void describe(V& v, probes::ProbeTrainingConfig& c) {
  v("localization", c.localization);
  v("localization_recipe", c.localization_recipe);
  v("classification", c.classification);
  v("classification_recipe", c.classification_recipe);
  v("correction", c.correction);
  v("correction_recipe", c.correction_recipe);
  v("retraction", c.retraction);
  v("retraction_recipe", c.retraction_recipe);
  v("localization_data", c.localization_data);
  v("classification_data", c.classification_data);
  v("reward_data", c.reward_data);
}

template <typename V>
void describe(V& v, GenConfig& g) {
  v("first_seed", g.first_seed);
  v("completions", g.completions);
}

template <typename V>
void describe(V& v, rl::TrainerConfig& t) {
  v("steps", t.steps);
  v("batch_size", t.batch_size);
  v("group_size", t.group_size);
  v("learning_rate", t.learning_rate);
  v("weight_decay", t.weight_decay);
  v("adam_eps", t.adam_eps);
  v("beta1", t.beta1);
  v("beta2", t.beta2);
  v("kl_weight", t.kl_weight);
  v("clip_ceiling", t.clip_ceiling);
  v("reference_reset", t.reference_reset);
  v("off_policy_steps", t.off_policy_steps);
  v("buckets", t.buckets);
  v("detection_threshold", t.detection_threshold);
  v("reference_batch_size", t.reference_batch_size);
  v("reference_group_size", t.reference_group_size);
  v("reference_learning_rate", t.reference_learning_rate);
}

template <typename V>
void describe(V& v, reward::LagrangeState& l) {
  v("lambda", l.lambda);
  v("gamma", l.gamma);
  v("target_rate", l.target_rate);
  v("lambda_max", l.lambda_max);
}

template <typename V>
void describe(V& v, RlRunConfig& r) {
  v("trainer", r.trainer);
  v("lagrange", r.lagrange);
  v("base_init", r.base_init);
  v("eval_rounds", r.eval_rounds);
}

template <typename V>
void describe(V& v, infer::InferenceConfig& c) {
  v("threshold", c.threshold);
  v("max_interventions", c.max_interventions);
  v("strategy", c.strategy);
  v("sampling", c.sampling);
  v("n", c.n);
  v("token_budget", c.token_budget);
  v("boundary_threshold", c.boundary_threshold);
  v("priority", c.priority);
}

template <typename V>
void describe(V& v, InferRunConfig& c) {
  v("loop", c.loop);
  v("first_prompt", c.first_prompt);
  v("prompts", c.prompts);
}

template <typename V>
void describe(V& v, EvalRunConfig& c) {
  v("held_out", c.held_out);
  v("kl_sequences", c.kl_sequences);
  v("kl_eta", c.kl_eta);
  v("kl_vocab", c.kl_vocab);
  v("analysis_layer", c.analysis_layer);
  v("dendrogram_components", c.dendrogram_components);
}

template <typename V>
void describe(V& v, RunConfig& c) {
  v("seed", c.seed);
  v("world", c.world);
  v("probes", c.probes);
  v("gen", c.gen);
  v("rl", c.rl);
  v("infer", c.infer);
  v("eval", c.eval);
}

struct Probe {
  template <typename T>
  void operator()(const char*, T&) {}
};

template <typename T>
concept Described = requires(Probe& p, T& t) { describe(p, t); };

// ---- writer -----------------------------------------------------------------

struct Writer {
  json& out;

  template <typename T>
  void operator()(const char* key, T& x) {
    out[key] = encode(x);
  }

  template <typename T>
  static json encode(T& x) {
    if constexpr (Described<T>) {
      json j = json::object();
      Writer w{j};
      describe(w, x);
      return j;
    } else {
      return json(x);
    }
  }
  static json encode(infer::Strategy& s) { return std::string(to_string(s)); }
  static json encode(infer::Sampling& s) { return std::string(to_string(s)); }
  static json encode(infer::Priority& p) {
    json j = json::array();
    for (Action a : p) j.push_back(std::string(to_string(a)));
    return j;
  }
};

// ---- reader -----------------------------------------------------------------

struct Reader {
  ObjectReader<ConfigError>& r;

  template <typename T>
  void operator()(const char* key, T& x) {
    if constexpr (Described<T>) {
      if (const json* c = r.child(key)) read(*c, r.path(key), x);
    } else {
      r.optional(key, x);
    }
  }

  template <typename T>
  static void read(const json& j, const std::string& path, T& x) {
    ObjectReader<ConfigError> r(j, path);
    Reader rd{r};
    describe(rd, x);
    r.finish();
  }

  void operator()(const char* key, infer::Strategy& s) {
    std::string name;
    if (!r.optional(key, name)) return;
    const auto v = infer::parse_strategy(name);
    if (!v) throw ConfigError(r.path(key) + ": unknown strategy '" + name + "'");
    s = *v;
  }
  void operator()(const char* key, infer::Sampling& s) {
    std::string name;
    if (!r.optional(key, name)) return;
    const auto v = infer::parse_sampling(name);
    if (!v) throw ConfigError(r.path(key) + ": unknown sampling '" + name + "'");
    s = *v;
  }
  void operator()(const char* key, infer::Priority& p) {
    std::vector<std::string> names;
    if (!r.optional(key, names)) return;
    if (names.size() != p.size()) throw ConfigError(r.path(key) + ": priority lists three actions");
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto a = parse_action(names[i]);
      if (!a) throw ConfigError(r.path(key) + ": unknown action '" + names[i] + "'");
      p[i] = *a;
    }
  }
};

}  // namespace

void RunConfig::validate() const {
  world.validate();
  probes.validate();
  rl.trainer.validate();
  rl.lagrange.validate();
  infer.loop.validate();
  const auto dim = world.feature_dim;
  if (probes.localization.input_dim != dim || probes.classification.input_dim != dim ||
      probes.correction.input_dim != dim || probes.retraction.input_dim != dim) {
    throw ConfigError("probes: input_dim must equal world.feature_dim");
  }
  auto known = [&](int id) { return std::find(world.layer_ids.begin(), world.layer_ids.end(), id) != world.layer_ids.end(); };
  if (!known(probes.localization.input_layer)) throw ConfigError("probes: localization layer not emitted by the world");
  for (const auto* c : {&probes.classification, &probes.correction, &probes.retraction}) {
    for (int id : c->input_layers) {
      if (!known(id)) throw ConfigError("probes: input layer " + std::to_string(id) + " not emitted by the world");
    }
  }
  if (!known(eval.analysis_layer)) throw ConfigError("eval: analysis layer not emitted by the world");
  if (gen.completions == 0) throw ConfigError("gen: completions must be positive");
  if (infer.prompts == 0) throw ConfigError("infer: prompts must be positive");
  if (rl.eval_rounds == 0) throw ConfigError("rl: eval rounds must be positive");
  if (eval.held_out.completions == 0) throw ConfigError("eval: held-out set must be non-empty");
  if (eval.kl_vocab < 2) throw ConfigError("eval: kl vocabulary must have at least 2 entries");
  if (eval.dendrogram_components == 0) throw ConfigError("eval: dendrogram needs at least one component");
}

json to_json(const RunConfig& c) {
  RunConfig copy = c;
  return Writer::encode(copy);
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader::read(j, "config", c);
  return c;
}

json to_json(const probes::TransformerProbeConfig& c) {
  auto copy = c;
  return Writer::encode(copy);
}

json to_json(const probes::AttentionProbeConfig& c) {
  auto copy = c;
  return Writer::encode(copy);
}

probes::TransformerProbeConfig transformer_config_from_json(const json& j, const std::string& path) {
  probes::TransformerProbeConfig c;
  Reader::read(j, path, c);
  return c;
}

probes::AttentionProbeConfig attention_config_from_json(const json& j, const std::string& path) {
  probes::AttentionProbeConfig c;
  Reader::read(j, path, c);
  return c;
}

std::string canonical_text(const json& j) { return j.dump(2) + "\n"; }

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char ch : bytes) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t config_hash(const RunConfig& c) { return fnv1a(canonical_text(to_json(c))); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace rlfr
