// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rlfr/cli.hpp"
#include "rlfr/config.hpp"
#include "rlfr/eval.hpp"
#include "rlfr/io.hpp"
#include "rlfr/selfcheck.hpp"

using namespace rlfr;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances ------------------------------------------------------

constexpr std::size_t kGradConfigs = 24;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;

constexpr double kMinAuc = 0.90;
constexpr double kMaxEce = 0.05;
constexpr double kMinSpanF1 = 0.90;

constexpr std::size_t kMatchCases = 1000;

constexpr double kFormulaTol = 1e-12;

constexpr std::size_t kLagrangeSteps = 200;
constexpr std::size_t kLagrangeTail = 50;
constexpr double kLagrangeFlipNoise = 0.05;
constexpr double kRetractTarget = 0.40;
constexpr double kRetractTol = 0.05;

constexpr std::size_t kRlSteps = 300;
constexpr double kMinSuccessGain = 0.15;
constexpr double kRlMinutes = 30.0;

constexpr std::size_t kBonSeeds = 10;
constexpr std::size_t kBonEntities = 200;
constexpr double kBonSlack = 0.02;
constexpr double kBonMargin = 0.05;

constexpr std::size_t kStrategySeeds = 5;
constexpr std::size_t kStrategyPrompts = 400;

constexpr std::size_t kKlSeeds = 10;
constexpr std::size_t kKlSequences = 64;

constexpr std::size_t kClusterSeeds = 5;
constexpr double kMinAri = 0.8;
constexpr double kMinEnergy = 0.7;

// -------------------------------------------------------------------------------

struct Line {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Line> g_lines;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  g_lines.push_back({id, name, pass, detail});
  std::fprintf(stderr, "  done %d %s\n", id, name.c_str());
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Guards a criterion so an exception fails it instead of aborting the suite.
void criterion(int id, const std::string& name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, name, false, std::string("threw: ") + e.what());
  }
}

// ---- hand counts for metric fidelity ------------------------------------------

std::size_t shared(const Span& a, const Span& b) {
  std::size_t n = 0;
  for (std::size_t t = a.start; t < a.end; ++t) n += t >= b.start && t < b.end;
  return n;
}

struct HandCounts {
  double n = 0, p = 0, tp = 0, g = 0, caught = 0, fixed = 0, cr = 0, stable = 0;
};

HandCounts hand_count(const std::vector<infer::InferenceTranscript>& trs) {
  HandCounts h;
  for (const auto& t : trs) {
    h.n += 1;
    const auto& c = t.completion;
    std::vector<Span> G;
    for (const auto& cl : c.claims)
      if (cl.truth == VerificationLabel::NotSupported) G.push_back(cl.span);
    auto sig = [](const Span& a, const Span& b) {
      const auto k = shared(a, b);
      return 2 * k > a.length() || 2 * k > b.length();
    };
    std::vector<bool> pc;
    for (const auto& d : t.flagged) {
      const Span& x = d.span;
      bool any = false, ok = false;
      for (const auto& y : G) {
        if (!sig(x, y)) continue;
        any = true;
        ok |= shared(y, x) == y.length() || 2 * shared(x, y) >= x.length();
      }
      if (!any) {
        std::size_t claim = 0, ns = 0;
        for (const auto& cl : c.claims) {
          claim += shared(cl.span, x);
          if (cl.truth == VerificationLabel::NotSupported) ns += shared(cl.span, x);
        }
        ok = claim > 0 && 2 * ns >= claim;
      }
      pc.push_back(ok);
      h.p += 1;
      h.tp += ok;
    }
    for (const auto& y : G) {
      bool ok = false;
      for (const auto& d : t.flagged) {
        if (!sig(y, d.span)) continue;
        ok |= 2 * shared(y, d.span) >= y.length();
      }
      h.g += 1;
      h.caught += ok;
    }
    for (const auto& rec : t.interventions) {
      const auto& iv = rec.intervention;
      if (!pc[rec.flagged_index]) {
        h.stable += iv.action == Action::Maintain;
        continue;
      }
      h.fixed += iv.outcome == Outcome::Fixed;
      h.cr += iv.outcome == Outcome::CleanRetract || (iv.outcome == Outcome::Acknowledged && iv.substantive);
    }
  }
  return h;
}

double worst_gap(const eval::MetricsReport& r, const HandCounts& h) {
  double gap = 0.0;
  auto cmp = [&](std::optional<double> got, double num, double den) {
    if (den == 0) {
      if (got) gap = 1.0;
      return;
    }
    if (!got) {
      gap = 1.0;
      return;
    }
    gap = std::max(gap, std::abs(*got - num / den));
  };
  cmp(r.precision, h.tp, h.p);
  cmp(r.recall, h.caught, h.g);
  cmp(r.caught_per_seq, h.caught, h.n);
  cmp(r.hallucinations_per_seq, h.g, h.n);
  cmp(r.false_positives_per_seq, h.p - h.tp, h.n);
  cmp(r.fixed_rate, h.fixed, h.tp);
  cmp(r.correct_retract_rate, h.cr, h.tp);
  cmp(r.stable_rate, h.stable, h.p - h.tp);
  return gap;
}

// ---- shared fixtures ---------------------------------------------------------

struct Shared {
  RunConfig cfg;
  std::optional<world::World> world;
  std::optional<probes::ProbeSet> probes;
  std::optional<rl::TrainingResult> rl;
};

std::vector<infer::InferenceTranscript> transcripts(const Shared& s, const rl::PolicyParams& policy,
                                                    infer::Strategy strategy, std::uint64_t seed) {
  std::vector<std::uint64_t> prompts;
  for (std::size_t i = 0; i < kStrategyPrompts; ++i) prompts.push_back(derive_key(derive_key(seed, "eval-prompts"), i));
  infer::InferenceConfig ic = s.cfg.infer.loop;
  ic.strategy = strategy;
  const infer::LoopModels m{&*s.world, &policy, &*s.probes, &*s.probes};
  return infer::run_prompts(prompts, m, ic);
}

eval::MetricsReport metrics(const std::vector<infer::InferenceTranscript>& trs) {
  std::vector<eval::SequenceEval> ev;
  for (const auto& t : trs) ev.push_back(eval::evaluate_transcript(t));
  return eval::metrics_report(ev);
}

// ---- criteria -----------------------------------------------------------------

void c1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto g = check::probe_grad_fidelity(kGradConfigs, 7, kGradTol);
  const double secs = seconds_since(t0);
  const bool pass = g.configurations >= 20 && g.failures.empty() && g.max_rel_error <= kGradTol && secs < kGradSeconds;
  report(1, "gradient-fidelity", pass,
         fmt("%zu configs, max rel err %.2e (<= %.0e), %.1fs (< %.0fs)", g.configurations, g.max_rel_error, kGradTol,
             secs, kGradSeconds));
}

void c2_probe_quality(Shared& s) {
  const auto& w = *s.world;
  const auto t0 = std::chrono::steady_clock::now();
  s.probes = probes::train_probe_set(w, s.cfg.probes, derive_key(s.cfg.seed, "probes"));
  const double train_secs = seconds_since(t0);
  const auto data = probes::generate_dataset(w, s.cfg.eval.held_out);
  const auto cls = probes::evaluate_probe(s.probes->classification,
                                          probes::classification_dataset(w, data, s.cfg.probes.classification.input_layers), 1);
  std::vector<double> bayes;
  std::vector<int> labels;
  probes::SpanF1 f1;
  for (const auto& comp : data) {
    const auto sheet = world::emit_activations(comp, w);
    for (const auto& cl : comp.claims) {
      if (cl.truth == VerificationLabel::InsufficientInformation) continue;
      bayes.push_back(probes::bayes_llr(w, sheet, cl.span));
      labels.push_back(cl.truth == VerificationLabel::NotSupported);
    }
    const auto p = s.probes->boundary_probs(comp, sheet);
    const auto segs = probes::segment(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())), 0.5);
    std::vector<Span> gold;
    for (const auto& cl : comp.claims) gold.push_back(cl.span);
    f1 += probes::span_f1(segs, gold);
  }
  const double bayes_auc = probes::auc(bayes, labels);
  const bool pass = cls.auc >= kMinAuc && cls.calibration.ece <= kMaxEce && f1.f1() >= kMinSpanF1;
  report(2, "probe-quality", pass,
         fmt("AUC %.4f (>= %.2f, Bayes %.4f), ECE %.4f (<= %.2f), span-F1 %.4f (>= %.2f), trained in %.1fs", cls.auc,
             kMinAuc, bayes_auc, cls.calibration.ece, kMaxEce, f1.f1(), kMinSpanF1, train_secs));
}

void c3_matching() {
  const auto mismatches = check::match_mismatches(kMatchCases, 11);
  report(3, "matching-oracle", mismatches == 0, fmt("%zu random P/G configurations, %zu mismatches", kMatchCases, mismatches));
}

void c4_formulas(const Shared& s) {
  const auto& base_policy = rl::PolicyParams::base(s.cfg.rl.trainer.buckets);
  double gap = 0.0;
  std::size_t runs = 0;
  for (std::uint64_t seed = 100; seed < 102; ++seed) {
    const auto b = transcripts(s, base_policy, infer::Strategy::NotInline, seed);
    const auto r = transcripts(s, s.rl->policy, infer::Strategy::NotInline, seed);
    const auto i = transcripts(s, s.rl->policy, infer::Strategy::Inline, seed);
    const auto hb = hand_count(b), hr = hand_count(r), hi = hand_count(i);
    const auto mb = metrics(b), mr = metrics(r), mi = metrics(i);
    gap = std::max({gap, worst_gap(mb, hb), worst_gap(mr, hr), worst_gap(mi, hi)});
    runs += 3;

    const auto d = eval::derived_metrics(mb, mr, mi);
    const double gb = hb.g / hb.n, gr = hr.g / hr.n, gi = hi.g / hi.n;
    const double introduced = (hi.p - hi.tp - hi.stable) / hi.n;
    const double pr = 1 - gr / gb;
    if (!d.overall || !d.policy || !d.in_context || !d.direct) {
      gap = 1.0;
      continue;
    }
    const double removed_exact = hi.caught / hi.n * ((hi.fixed + hi.cr) / hi.tp);
    gap = std::max({gap, std::abs(*d.policy - pr), std::abs(*d.overall - (1 - (gi + introduced - removed_exact) / gb)),
                    std::abs(*d.in_context - (1 - gi / gr * (1 - pr))),
                    std::abs(*d.direct - (removed_exact - introduced) / gr * (1 - pr))});
  }
  eval::Counts fixture;
  fixture.sequences = 500;
  fixture.detections = 1000;
  fixture.true_positives = 850;
  fixture.ground_truth = 1250;
  fixture.caught = 700;
  const auto fr = eval::detection_metrics(fixture);
  const bool fixture_ok = std::abs(*fr.precision - 0.85) <= kFormulaTol && std::abs(*fr.recall - 0.56) <= kFormulaTol;
  report(4, "metric-formulas", gap <= kFormulaTol && fixture_ok,
         fmt("%zu runs, max |metric - hand count| %.1e (<= %.0e); fixture P %.2f R %.2f", runs, gap, kFormulaTol,
             *fr.precision, *fr.recall));
}

void c5_lagrange(const Shared& s) {
  auto wp = s.cfg.world;
  wp.gate_flip_noise = kLagrangeFlipNoise;
  const world::World noisy(wp);
  auto tc = s.cfg.rl.trainer;
  tc.steps = kLagrangeSteps;
  const auto base = rl::PolicyParams::base(tc.buckets);
  const auto res = rl::run_training(tc, s.cfg.rl.lagrange, base, noisy, *s.probes, *s.probes, derive_key(s.cfg.seed, "lagrange"));
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = res.history.size() - kLagrangeTail; i < res.history.size(); ++i) {
    if (!res.history[i].retraction_rate) continue;
    sum += *res.history[i].retraction_rate;
    ++n;
  }
  const double rate = n ? sum / static_cast<double>(n) : -1.0;
  const bool pass = n > 0 && std::abs(rate - kRetractTarget) <= kRetractTol;
  report(5, "lagrange-control", pass,
         fmt("flip noise %.2f, mean retraction rate over steps %zu-%zu: %.4f (target %.2f +/- %.2f), final lambda %.3f",
             kLagrangeFlipNoise, kLagrangeSteps - kLagrangeTail, kLagrangeSteps - 1, rate, kRetractTarget, kRetractTol,
             res.lagrange.lambda));
}

void c6_rl(Shared& s) {
  auto tc = s.cfg.rl.trainer;
  tc.steps = kRlSteps;
  const auto base = rl::PolicyParams::base(tc.buckets);
  const auto t0 = std::chrono::steady_clock::now();
  s.rl = rl::run_training(tc, s.cfg.rl.lagrange, base, *s.world, *s.probes, *s.probes, derive_key(s.cfg.seed, "rl"));
  const double minutes = seconds_since(t0) / 60.0;
  const auto key = derive_key(s.cfg.seed, "rl-eval");
  const auto before = rl::evaluate_policy(base, *s.world, *s.probes, *s.probes, tc, s.cfg.rl.lagrange.lambda, key,
                                          s.cfg.rl.eval_rounds);
  const auto after = rl::evaluate_policy(s.rl->policy, *s.world, *s.probes, *s.probes, tc, s.rl->lagrange.lambda, key,
                                         s.cfg.rl.eval_rounds);
  const double gain = after.oracle_success_rate - before.oracle_success_rate;
  const double r0 = s.rl->history.front().mean_reward, rl = s.rl->history.back().mean_reward;
  const bool pass = s.rl->history.size() >= kRlSteps && gain >= kMinSuccessGain && rl > r0 && minutes < kRlMinutes;
  report(6, "rl-efficacy", pass,
         fmt("%zu steps in %.1f min; success %.3f -> %.3f (+%.1f pp, >= %.0f); reward step 0 %.4f, step %zu %.4f",
             s.rl->history.size(), minutes, before.oracle_success_rate, after.oracle_success_rate, 100 * gain,
             100 * kMinSuccessGain, r0, s.rl->history.size() - 1, rl));
}

void c7_best_of_n(const Shared& s) {
  const std::vector<std::size_t> ns{1, 4, 16, 64};
  std::vector<double> probe(ns.size(), 0.0), random(ns.size(), 0.0);
  const infer::LoopModels m{&*s.world, &s.rl->policy, &*s.probes, &*s.probes};
  for (std::uint64_t seed = 0; seed < kBonSeeds; ++seed) {
    const auto st = infer::selection_study(m, ns, kBonEntities, s.cfg.infer.loop.threshold, seed);
    for (std::size_t k = 0; k < ns.size(); ++k) {
      probe[k] += st.probe_success[k] / kBonSeeds;
      random[k] += st.random_success[k] / kBonSeeds;
    }
  }
  bool monotone = true;
  for (std::size_t k = 1; k < ns.size(); ++k) monotone &= probe[k] >= probe[k - 1] - kBonSlack;
  const double margin = probe.back() - random.back();
  std::string curve;
  for (std::size_t k = 0; k < ns.size(); ++k) curve += fmt("%sN=%zu %.3f/%.3f", k ? ", " : "", ns[k], probe[k], random[k]);
  report(7, "best-of-n", monotone && margin >= kBonMargin,
         fmt("probe/random over %zu seeds: %s; margin at N=64 %.1f pp (>= %.0f)", kBonSeeds, curve.c_str(), 100 * margin,
             100 * kBonMargin));
}

void c8_strategy(const Shared& s) {
  const auto base_policy = rl::PolicyParams::base(s.cfg.rl.trainer.buckets);
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed = 0; seed < kStrategySeeds; ++seed) {
    const auto mb = metrics(transcripts(s, base_policy, infer::Strategy::NotInline, seed));
    const auto mr = metrics(transcripts(s, s.rl->policy, infer::Strategy::NotInline, seed));
    const auto mi = metrics(transcripts(s, s.rl->policy, infer::Strategy::Inline, seed));
    const auto inl = eval::derived_metrics(mb, mr, mi).overall;
    const auto not_inl = eval::derived_metrics(mb, mr, mr).overall;
    const bool ok = inl && not_inl && *inl > *not_inl && *not_inl > 0.0;
    pass &= ok;
    detail += fmt("%s%.3f>%.3f", seed ? " " : "", inl.value_or(NAN), not_inl.value_or(NAN));
  }
  report(8, "strategy-ordering", pass, "OR inline > not-inline > 0 per seed: " + detail);
}

void c9_kl(const Shared& s) {
  const auto& w = *s.world;
  const auto& ev = s.cfg.eval;
  const std::vector<int> layer{ev.analysis_layer};
  bool pass = true;
  double min_gap = INFINITY;
  for (std::uint64_t seed = 0; seed < kKlSeeds; ++seed) {
    std::vector<eval::KlSequence> seqs;
    for (std::size_t i = 0; i < kKlSequences; ++i) {
      const auto comp = world::generate_completion(derive_key(derive_key(seed, "kl-prompts"), i), w);
      const auto sheet = world::emit_activations(comp, w, layer);
      seqs.push_back(eval::tilted_policy_pair(w, comp, sheet, ev.analysis_layer, ev.kl_vocab, ev.kl_eta, seed));
    }
    const auto r = eval::kl_stratified(seqs).front();
    pass &= r.not_supported.mean > r.supported.mean;
    min_gap = std::min(min_gap, r.not_supported.mean - r.supported.mean);
  }
  report(9, "kl-stratification", pass, fmt("NS mean > S mean on %zu seeds, smallest gap %.4f", kKlSeeds, min_gap));
}

void c10_dendrogram() {
  bool pass = true;
  double min_ari = 1.0, min_energy = 1.0;
  for (std::uint64_t seed = 0; seed < kClusterSeeds; ++seed) {
    const auto pc = eval::planted_clusters(3, 20, 32, 5, 0.05, seed);
    const auto dg = eval::dendrogram(pc.points, 5);
    const double ari = eval::adjusted_rand_index(dg.cut(3), pc.labels);
    min_ari = std::min(min_ari, ari);
    min_energy = std::min(min_energy, dg.energy_fraction);
    pass &= ari >= kMinAri && dg.energy_fraction >= kMinEnergy;
  }
  report(10, "dendrogram-recovery", pass,
         fmt("%zu planted seeds: min ARI %.3f (>= %.1f), min top-5 energy %.3f (>= %.1f)", kClusterSeeds, min_ari, kMinAri,
             min_energy, kMinEnergy));
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    auto text = io::read_text(e.path());
    const auto rel = fs::relative(e.path(), root).string();
    if (rel.ends_with(".manifest.json")) {
      auto j = json::parse(text);
      j.erase("started");
      j.erase("finished");
      text = j.dump();
    }
    files[rel] = text;
  }
  return files;
}

void c11_determinism(const fs::path& config) {
  const auto root = fs::temp_directory_path() / "rlfr-acceptance";
  fs::remove_all(root);
  const std::string cfg = config.string();
  auto pipeline = [&](const fs::path& d) {
    auto p = [&](const char* sub) { return (d / sub).string(); };
    const std::vector<std::vector<std::string>> cmds{
        {"gen", "--config", cfg, "--out", d.string()},
        {"probe-train", "--config", cfg, "--out", d.string()},
        {"probe-eval", "--config", cfg, "--probes", p("probes.bin"), "--out", p("pe")},
        {"rl-train", "--config", cfg, "--probes", p("probes.bin"), "--out", d.string()},
        {"infer", "--config", cfg, "--probes", p("probes.bin"), "--policy", p("policy.bin"), "--out", p("inl")},
        {"infer", "--config", cfg, "--probes", p("probes.bin"), "--strategy", "not-inline", "--sampling", "best-of-n",
         "--n", "8", "--jobs", "3", "--out", p("bon")},
        {"eval", "--config", cfg, "--transcripts", p("inl/transcripts.jsonl"), "--base", p("bon/transcripts.jsonl"),
         "--rlfr", p("bon/transcripts.jsonl"), "--out", p("ev")},
        {"analyze", "--config", cfg, "--out", p("an")},
        {"selfcheck", "--config", cfg, "--out", p("sc")},
    };
    for (const auto& c : cmds) {
      std::ostringstream out, err;
      if (cli::run(c, out, err) != cli::kOk) throw std::runtime_error(c.front() + " failed: " + err.str());
    }
  };
  pipeline(root / "a");
  pipeline(root / "b");
  const auto a = snapshot(root / "a"), b = snapshot(root / "b");
  std::size_t differing = 0;
  for (const auto& [name, text] : a) differing += !b.count(name) || b.at(name) != text;
  fs::remove_all(root);
  report(11, "determinism", a.size() == b.size() && differing == 0 && !a.empty(),
         fmt("9 commands run twice: %zu files compared, %zu differ (manifest timestamps excluded)", a.size(), differing));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path small = argc > 1 ? fs::path(argv[1]) : fs::path(RLFR_TEST_DATA_DIR) / "small_config.json";
  const auto t0 = std::chrono::steady_clock::now();
  Shared s;
  s.world.emplace(s.cfg.world);

  criterion(1, "gradient-fidelity", c1_gradients);
  criterion(2, "probe-quality", [&] { c2_probe_quality(s); });
  criterion(3, "matching-oracle", c3_matching);
  if (s.probes) {
    criterion(6, "rl-efficacy", [&] { c6_rl(s); });
    criterion(5, "lagrange-control", [&] { c5_lagrange(s); });
  }
  if (s.rl) {
    criterion(4, "metric-formulas", [&] { c4_formulas(s); });
    criterion(7, "best-of-n", [&] { c7_best_of_n(s); });
    criterion(8, "strategy-ordering", [&] { c8_strategy(s); });
  }
  criterion(9, "kl-stratification", [&] { c9_kl(s); });
  criterion(10, "dendrogram-recovery", c10_dendrogram);
  criterion(11, "determinism", [&] { c11_determinism(small); });

  std::sort(g_lines.begin(), g_lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  std::size_t passed = 0;
  for (const auto& l : g_lines) {
    std::printf("[%s] %2d %-20s %s\n", l.pass ? "PASS" : "FAIL", l.id, l.name.c_str(), l.detail.c_str());
    passed += l.pass;
  }
  for (int id = 1; id <= 11; ++id) {
    if (std::none_of(g_lines.begin(), g_lines.end(), [&](const Line& l) { return l.id == id; })) {
      std::printf("[FAIL] %2d not run (prerequisite failed)\n", id);
    }
  }
  std::printf("%zu/11 criteria passed in %.1fs\n", passed, seconds_since(t0));
  return passed == 11 ? 0 : 1;
}
