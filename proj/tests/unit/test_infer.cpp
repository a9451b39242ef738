#include <algorithm>
#include <cmath>
#include <functional>

#include "doctest.h"
#include "rlfr/error.hpp"
#include "rlfr/infer.hpp"

using namespace rlfr;
using namespace rlfr::infer;

namespace {

// Gold segmentation with a caller-supplied span score.
class ScriptedDetector final : public probes::DetectionModel {
 public:
  using Score = std::function<double(const world::Completion&, const Span&)>;
  explicit ScriptedDetector(Score s) : score_(std::move(s)) {}
  kernel::Vector boundary_probs(const world::Completion& c, const world::ActivationSheet& sheet) const override {
    return oracle_.boundary_probs(c, sheet);
  }
  double hallucination_prob(const world::Completion& c, const world::ActivationSheet&, const Span& span) const override {
    return score_(c, span);
  }

 private:
  probes::OracleDetection oracle_;
  Score score_;
};

struct Fixture {
  world::World w{world::WorldParams{}};
  rl::PolicyParams policy = rl::PolicyParams::base(10);
  probes::OracleDetection oracle_det;
  probes::OracleReward oracle_rew;
  LoopModels models() const { return {&w, &policy, &oracle_det, &oracle_rew}; }
};

bool same_completion(const world::Completion& a, const world::Completion& b) {
  if (a.tokens != b.tokens || a.claims.size() != b.claims.size() || a.inserted != b.inserted) return false;
  for (std::size_t i = 0; i < a.claims.size(); ++i) {
    if (a.claims[i].span != b.claims[i].span || a.claims[i].truth != b.claims[i].truth) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("best-of-N selection") {
  const std::vector<ScoredCandidate> c{{Action::Correct, 0.2}, {Action::Correct, 0.9}, {Action::Retract, 0.99}};
  CHECK(best_of_n(c) == 1);
  CHECK(best_of_n(std::vector<ScoredCandidate>{{Action::Retract, 0.01}}) == 0);
  CHECK(best_of_n(std::vector<ScoredCandidate>{{Action::Correct, 0.1}, {Action::Retract, 0.9}}) == 0);
  CHECK(best_of_n(std::vector<ScoredCandidate>{{Action::Maintain, 0.9}, {Action::Retract, 0.1}}) == 1);
  CHECK(best_of_n(std::vector<ScoredCandidate>{{Action::Correct, 0.5}, {Action::Correct, 0.5}}) == 0);
  const Priority retract_first{Action::Retract, Action::Correct, Action::Maintain};
  CHECK(best_of_n(std::vector<ScoredCandidate>{{Action::Correct, 0.1}, {Action::Retract, 0.9}}, retract_first) == 1);
  CHECK_THROWS(best_of_n(std::vector<ScoredCandidate>{}));
}

TEST_CASE("best-of-N agrees with an exhaustive restatement") {
  Rng rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<ScoredCandidate> c(1 + rng.below(9));
    for (auto& x : c) x = {action_from_index(rng.below(3)), std::round(rng.uniform() * 5) / 5};
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& x : c) ++counts[index_of(x.action)];
    Action winner = kDefaultPriority[0];
    std::size_t best = 0;
    for (Action a : kDefaultPriority) {
      if (counts[index_of(a)] > best) {
        best = counts[index_of(a)];
        winner = a;
      }
    }
    std::size_t pick = c.size();
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (c[i].action == winner && (pick == c.size() || c[i].score > c[pick].score)) pick = i;
    }
    CHECK(best_of_n(c) == pick);
  }
}

TEST_CASE("inline insertion arithmetic") {
  const world::World w{world::WorldParams{}};
  world::Generator gen(w, 5);
  gen.extend(40);
  const auto n = gen.completion().size();
  world::Intervention iv;
  iv.action = Action::Correct;
  iv.tokens = {3, 4, 5, 6};
  const auto r = apply_inline(gen, Span(n - 2, n), iv);
  CHECK(r.insertion_point == n);
  CHECK(r.resume == n + iv.tokens.size() + 1);
  CHECK(gen.completion().size() == n + iv.tokens.size() + 1);
  iv.action = Action::Maintain;
  CHECK_THROWS_AS(apply_inline(gen, Span(0, 2), iv), std::invalid_argument);
}

TEST_CASE("inference config validation and names") {
  InferenceConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.n = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.priority = {Action::Correct, Action::Correct, Action::Maintain};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(InferenceConfig{}.threshold == 0.7);
  CHECK(InferenceConfig{}.max_interventions == 30);
  for (auto s : {Strategy::Inline, Strategy::NotInline}) CHECK(parse_strategy(to_string(s)) == s);
  for (auto s : {Sampling::Vanilla, Sampling::BestOfN}) CHECK(parse_sampling(to_string(s)) == s);
  for (auto t : {Termination::NoDetection, Termination::MaxInterventions, Termination::TokenBudget})
    CHECK(parse_termination(to_string(t)) == t);
}

TEST_CASE("nothing fires above the maximum score") {
  Fixture f;
  const ScriptedDetector det([](const world::Completion&, const Span&) { return 0.99; });
  const LoopModels m{&f.w, &f.policy, &det, &f.oracle_rew};
  InferenceConfig cfg;
  cfg.threshold = 1.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto tr = run_loop(s, m, cfg);
    CHECK(tr.interventions.empty());
    CHECK(tr.flagged.empty());
    CHECK(tr.termination == Termination::NoDetection);
    CHECK(same_completion(tr.completion, world::generate_completion(s, f.w)));
  }
}

TEST_CASE("zero max interventions records detections only") {
  Fixture f;
  InferenceConfig cfg;
  cfg.max_interventions = 0;
  std::size_t flagged = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto tr = run_loop(s, f.models(), cfg);
    CHECK(tr.interventions.empty());
    flagged += tr.flagged.size();
    if (!tr.flagged.empty()) CHECK(tr.termination == Termination::MaxInterventions);
  }
  CHECK(flagged > 0);
}

TEST_CASE("a single high-scoring NS claim gets exactly one intervention") {
  Fixture f;
  for (std::uint64_t s = 0; s < 40; ++s) {
    const auto raw = world::generate_completion(s, f.w);
    const auto target = std::find_if(raw.claims.begin(), raw.claims.end(),
                                     [](const world::Claim& c) { return c.truth == VerificationLabel::NotSupported; });
    if (target == raw.claims.end()) continue;
    const Span want = target->span;
    const ScriptedDetector det([&](const world::Completion&, const Span& sp) { return sp == want ? 0.95 : 0.1; });
    const LoopModels m{&f.w, &f.policy, &det, &f.oracle_rew};
    InferenceConfig cfg;
    cfg.strategy = Strategy::NotInline;
    const auto tr = run_loop(s, m, cfg);
    REQUIRE(tr.interventions.size() == 1);
    CHECK(tr.interventions[0].span == want);
    CHECK(tr.interventions[0].target.truth == VerificationLabel::NotSupported);
    CHECK(tr.probe_starts.back() == want.end);
  }
}

TEST_CASE("loop invariants under both strategies") {
  Fixture f;
  for (auto strategy : {Strategy::Inline, Strategy::NotInline}) {
    for (auto sampling : {Sampling::Vanilla, Sampling::BestOfN}) {
      InferenceConfig cfg;
      cfg.strategy = strategy;
      cfg.sampling = sampling;
      cfg.n = 4;
      cfg.max_interventions = 3;
      for (std::uint64_t s = 100; s < 140; ++s) {
        const auto tr = run_loop(s, f.models(), cfg);
        CHECK(tr.interventions.size() <= std::min(cfg.max_interventions, tr.flagged.size()));
        for (std::size_t i = 1; i < tr.flagged.size(); ++i) CHECK(tr.flagged[i - 1].span.start <= tr.flagged[i].span.start);
        for (std::size_t i = 1; i < tr.probe_starts.size(); ++i) CHECK(tr.probe_starts[i - 1] <= tr.probe_starts[i]);
        for (std::size_t k = 0; k < tr.interventions.size(); ++k) {
          const auto& iv = tr.interventions[k];
          // Detections never start before the scan position they were found from.
          CHECK(tr.flagged[iv.flagged_index].span.start >= tr.probe_starts[k]);
          CHECK(iv.candidates.size() == cfg.candidates());
          if (iv.inlined) {
            REQUIRE(iv.insertion);
            CHECK(iv.insertion->resume == iv.insertion->insertion_point + iv.intervention.tokens.size() + 1);
            if (k + 1 < tr.probe_starts.size()) {
              CHECK(tr.probe_starts[k + 1] == iv.insertion->resume);
            } else {
              CHECK(tr.termination == Termination::TokenBudget);
            }
            CHECK(iv.intervention.action != Action::Maintain);
          }
        }
        if (strategy == Strategy::NotInline) {
          CHECK(same_completion(tr.completion, world::generate_completion(s, f.w)));
          for (const auto& iv : tr.interventions) CHECK_FALSE(iv.inlined);
        } else {
          std::size_t inlined = 0;
          for (const auto& iv : tr.interventions) inlined += iv.inlined;
          CHECK(tr.completion.inserted.size() == inlined);
        }
      }
    }
  }
}

TEST_CASE("inline probe start resumes right after the inserted block") {
  Fixture f;
  std::size_t checked = 0;
  for (std::uint64_t s = 0; s < 60; ++s) {
    const auto tr = run_loop(s, f.models(), InferenceConfig{});
    for (std::size_t k = 0; k < tr.interventions.size(); ++k) {
      const auto& iv = tr.interventions[k];
      if (!iv.inlined || k + 1 >= tr.probe_starts.size()) continue;
      CHECK(tr.probe_starts[k + 1] == iv.insertion->resume);
      CHECK(iv.insertion->insertion_point == iv.span.end);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("parallel prompts match sequential ones") {
  Fixture f;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 16; ++s) seeds.push_back(1000 + s);
  const auto a = run_prompts(seeds, f.models(), InferenceConfig{}, 1);
  const auto b = run_prompts(seeds, f.models(), InferenceConfig{}, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same_completion(a[i].completion, b[i].completion));
    CHECK(a[i].interventions.size() == b[i].interventions.size());
    CHECK(a[i].probe_starts == b[i].probe_starts);
  }
}

TEST_CASE("oracle-scored best-of-N success does not fall with N") {
  Fixture f;
  const std::vector<std::size_t> ns{1, 4, 16};
  std::vector<double> mean(ns.size(), 0.0);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto st = selection_study(f.models(), ns, 100, 0.7, s);
    for (std::size_t k = 0; k < ns.size(); ++k) mean[k] += st.probe_success[k] / 5;
  }
  for (std::size_t k = 1; k < ns.size(); ++k) CHECK(mean[k] >= mean[k - 1] - 0.02);
  CHECK(mean.back() > mean.front());
}
