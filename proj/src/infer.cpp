#include "rlfr/infer.hpp"

#include <algorithm>
#include <stdexcept>
#include <thread>

#include "rlfr/error.hpp"

namespace rlfr::infer {

std::string_view to_string(Strategy s) { return s == Strategy::Inline ? "inline" : "not-inline"; }
std::string_view to_string(Sampling s) { return s == Sampling::Vanilla ? "vanilla" : "best-of-n"; }

std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::NoDetection: return "no-detection";
    case Termination::MaxInterventions: return "max-interventions";
    case Termination::TokenBudget: return "token-budget";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(std::string_view s) {
  if (s == "inline") return Strategy::Inline;
  if (s == "not-inline") return Strategy::NotInline;
  return std::nullopt;
}

std::optional<Sampling> parse_sampling(std::string_view s) {
  if (s == "vanilla") return Sampling::Vanilla;
  if (s == "best-of-n") return Sampling::BestOfN;
  return std::nullopt;
}

std::optional<Termination> parse_termination(std::string_view s) {
  for (auto t : {Termination::NoDetection, Termination::MaxInterventions, Termination::TokenBudget}) {
    if (to_string(t) == s) return t;
  }
  return std::nullopt;
}

void InferenceConfig::validate() const {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("inference: threshold must lie in (0,1]");
  if (n < 1) throw ConfigError("inference: N must be >= 1");
  if (token_budget == 0) throw ConfigError("inference: token budget must be positive");
  if (!(boundary_threshold > 0.0 && boundary_threshold < 1.0)) {
    throw ConfigError("inference: boundary threshold must lie in (0,1)");
  }
  Priority sorted = priority;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != Priority{Action::Maintain, Action::Correct, Action::Retract}) {
    throw ConfigError("inference: priority must be a permutation of the three actions");
  }
}

std::size_t best_of_n(std::span<const ScoredCandidate> candidates, const Priority& priority) {
  if (candidates.empty()) throw std::invalid_argument("best_of_n: no candidates");
  std::array<std::size_t, kNumActions> votes{};
  for (const auto& c : candidates) ++votes[index_of(c.action)];
  Action winner = priority[0];
  for (Action a : priority) {
    if (votes[index_of(a)] > votes[index_of(winner)]) winner = a;
  }
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].action != winner) continue;
    if (!best || candidates[i].score > candidates[*best].score) best = i;
  }
  return *best;
}

InlineResult apply_inline(world::Generator& gen, const Span& at, const world::Intervention& iv) {
  if (iv.action == Action::Maintain) throw std::invalid_argument("apply_inline: Maintain is never inlined");
  InlineResult r;
  r.insertion_point = at.end;
  r.resume = gen.insert_after(at.end, iv.tokens);
  return r;
}

namespace {

// Samples and scores the candidates for one flagged span.
std::vector<CandidateRecord> draw_candidates(const LoopModels& m, const world::ActivationSheet& sheet,
                                             const Span& span, const world::Claim& target, std::size_t count,
                                             Rng& rng, std::uint64_t id_key) {
  std::vector<CandidateRecord> out;
  out.reserve(count);
  const std::size_t bucket = m.policy->bucket_of(target.knowledge);
  for (std::size_t j = 0; j < count; ++j) {
    const auto s = m.policy->sample(bucket, rng);
    CandidateRecord c{derive_key(id_key, j), s.action, s.quality, 0.0};
    const auto iv = world::realize_intervention(*m.world, target, s.action, s.quality, c.id);
    const auto window = world::emit_intervention_window(*m.world, sheet, span, iv);
    c.score = m.reward->selection_score(iv, window);
    out.push_back(c);
  }
  return out;
}

std::size_t select(const std::vector<CandidateRecord>& cands, const Priority& priority) {
  std::vector<ScoredCandidate> sc;
  sc.reserve(cands.size());
  for (const auto& c : cands) sc.push_back({c.action, c.score});
  return best_of_n(sc, priority);
}

}  // namespace

InferenceTranscript run_loop(std::uint64_t prompt_seed, const LoopModels& m, const InferenceConfig& cfg) {
  cfg.validate();
  if (!m.world || !m.policy || !m.detector || !m.reward) throw std::invalid_argument("run_loop: missing model");
  const auto& w = *m.world;
  InferenceTranscript tr;
  tr.prompt_seed = prompt_seed;

  world::Generator gen(w, prompt_seed);
  std::size_t inserted_tokens = 0;
  gen.extend(cfg.token_budget);
  Rng rng(derive_key(prompt_seed, "policy"));
  const std::uint64_t id_root = derive_key(prompt_seed, "candidates");
  std::size_t probe_start = 0;

  while (true) {
    const auto& c = gen.completion();
    if (probe_start >= c.size()) {
      tr.termination = Termination::TokenBudget;
      break;
    }
    tr.probe_starts.push_back(probe_start);
    const auto sheet = world::emit_activations(c, w);
    const auto dets = probes::scan(*m.detector, c, sheet, probe_start, cfg.boundary_threshold);
    const auto hit = std::find_if(dets.begin(), dets.end(), [&](const probes::Detection& d) { return d.score >= cfg.threshold; });
    if (hit == dets.end()) {
      tr.termination = Termination::NoDetection;
      break;
    }
    if (tr.interventions.size() >= cfg.max_interventions) {
      // Trace the remaining detections without acting on them.
      for (auto it = hit; it != dets.end(); ++it) {
        if (it->score >= cfg.threshold) tr.flagged.push_back(*it);
      }
      tr.termination = Termination::MaxInterventions;
      break;
    }

    const probes::Detection star = *hit;
    tr.flagged.push_back(star);
    InterventionRecord rec;
    rec.flagged_index = tr.flagged.size() - 1;
    rec.span = star.span;
    rec.target = world::resolve_target(c, star.span);
    rec.candidates = draw_candidates(m, sheet, star.span, rec.target, cfg.candidates(), rng,
                                     derive_key(id_root, tr.interventions.size()));
    rec.selected = cfg.sampling == Sampling::BestOfN ? select(rec.candidates, cfg.priority) : 0;
    const auto& chosen = rec.candidates[rec.selected];
    rec.intervention = world::realize_intervention(w, rec.target, chosen.action, chosen.quality, chosen.id);

    if (cfg.strategy == Strategy::Inline && chosen.action != Action::Maintain) {
      rec.inlined = true;
      rec.insertion = apply_inline(gen, star.span, rec.intervention);
      inserted_tokens += rec.insertion->resume - rec.insertion->insertion_point;
      probe_start = rec.insertion->resume;
      gen.extend(cfg.token_budget + inserted_tokens);
    } else {
      probe_start = star.span.end;
    }
    tr.interventions.push_back(std::move(rec));
  }
  tr.completion = gen.completion();
  return tr;
}

std::vector<InferenceTranscript> run_prompts(std::span<const std::uint64_t> seeds, const LoopModels& m,
                                             const InferenceConfig& cfg, std::size_t jobs) {
  cfg.validate();
  std::vector<InferenceTranscript> out(seeds.size());
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(seeds.size(), 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) out[i] = run_loop(seeds[i], m, cfg);
    return out;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> threads;
  for (std::size_t j = 0; j < jobs; ++j) {
    threads.emplace_back([&, j] {
      try {
        for (std::size_t i = j; i < seeds.size(); i += jobs) out[i] = run_loop(seeds[i], m, cfg);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

SelectionStudy selection_study(const LoopModels& m, std::span<const std::size_t> n_values, std::size_t entities,
                               double threshold, std::uint64_t seed, const Priority& priority) {
  if (n_values.empty() || entities == 0) throw std::invalid_argument("selection_study: empty study");
  const std::size_t n_max = *std::max_element(n_values.begin(), n_values.end());
  if (n_max == 0) throw std::invalid_argument("selection_study: N must be >= 1");
  const auto& w = *m.world;
  SelectionStudy st;
  st.n_values.assign(n_values.begin(), n_values.end());
  st.probe_success.assign(n_values.size(), 0.0);
  st.random_success.assign(n_values.size(), 0.0);

  Rng policy_rng(derive_key(seed, "policy"));
  Rng pick_rng(derive_key(seed, "uniform-pick"));
  const std::uint64_t gen_key = derive_key(seed, "completions");
  const std::uint64_t id_key = derive_key(seed, "candidates");
  auto success = [](const world::Intervention& iv) {
    return iv.outcome == Outcome::Fixed || iv.outcome == Outcome::CleanRetract;
  };

  for (std::size_t i = 0; st.entities < entities; ++i) {
    if (i >= 1'000'000) throw std::runtime_error("selection_study: detector flags no NotSupported entities");
    const auto c = world::generate_completion(derive_key(gen_key, i), w);
    const auto sheet = world::emit_activations(c, w);
    for (const auto& d : probes::scan(*m.detector, c, sheet, 0)) {
      if (d.score < threshold) continue;
      const auto target = world::resolve_target(c, d.span);
      if (target.truth != VerificationLabel::NotSupported) continue;
      const auto cands = draw_candidates(m, sheet, d.span, target, n_max, policy_rng,
                                         derive_key(id_key, st.entities));
      std::vector<bool> ok;
      ok.reserve(cands.size());
      for (const auto& cd : cands) ok.push_back(success(world::realize_intervention(w, target, cd.action, cd.quality, cd.id)));
      for (std::size_t k = 0; k < n_values.size(); ++k) {
        const std::vector<CandidateRecord> prefix(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(n_values[k]));
        st.probe_success[k] += ok[select(prefix, priority)] ? 1.0 : 0.0;
        st.random_success[k] += ok[pick_rng.below(n_values[k])] ? 1.0 : 0.0;
      }
      if (++st.entities == entities) break;
    }
  }
  for (std::size_t k = 0; k < n_values.size(); ++k) {
    st.probe_success[k] /= static_cast<double>(st.entities);
    st.random_success[k] /= static_cast<double>(st.entities);
  }
  return st;
}

}  // namespace rlfr::infer
