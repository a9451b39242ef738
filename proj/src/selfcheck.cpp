#include "rlfr/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "rlfr/io.hpp"
#include "rlfr/probes.hpp"

namespace rlfr::check {

namespace {

using kernel::Matrix;

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

template <typename W>
void randomize(W& w, Rng& rng, double sd) {
  for (auto& p : w.params()) {
    for (double& v : p.values) v = sd * rng.normal();
  }
}

template <typename W>
std::vector<kernel::ParamRef> refs(W& w, W& g) {
  std::vector<kernel::ParamRef> out;
  auto pw = w.params();
  auto pg = g.params();
  for (std::size_t i = 0; i < pw.size(); ++i) out.push_back({pw[i].name, pw[i].values, pg[i].values});
  return out;
}

template <typename T>
T pick(Rng& rng, std::initializer_list<T> xs) {
  return *(xs.begin() + static_cast<std::ptrdiff_t>(rng.below(xs.size())));
}

}  // namespace

GradFidelity probe_grad_fidelity(std::size_t configurations, std::uint64_t seed, double tol) {
  GradFidelity out;
  Rng rng(derive_key(seed, "grad-fidelity"));
  for (std::size_t i = 0; i < configurations; ++i) {
    kernel::GradCheckReport report;
    std::string label;
    if (i % 2 == 0) {
      probes::TransformerProbeConfig cfg;
      cfg.input_dim = static_cast<std::size_t>(rng.range(3, 6));
      cfg.layers = static_cast<std::size_t>(rng.range(1, 2));
      cfg.heads = pick<std::size_t>(rng, {1, 2});
      cfg.embed = cfg.heads * pick<std::size_t>(rng, {2, 4});
      cfg.mlp = static_cast<std::size_t>(rng.range(3, 8));
      cfg.window = static_cast<std::size_t>(rng.range(1, 6));
      cfg.rope_theta = pick<double>(rng, {4.0, 32.0, 10000.0});
      auto w = probes::TransformerProbeWeights::init(cfg, rng.next_u64());
      randomize(w, rng, 0.4);
      const auto tokens = rng.range(2, 7);
      probes::TokenExample ex{random_matrix(tokens, static_cast<Eigen::Index>(cfg.input_dim), rng), {}};
      for (long long t = 0; t < tokens; ++t) ex.labels.push_back(static_cast<int>(rng.below(2)));
      const std::vector<double> cw{1.0, 1.0 + rng.uniform()};
      auto g = probes::TransformerProbeWeights::zeros(cfg);
      probes::transformer_loss(ex, w, cw, &g, 1.0);
      report = kernel::grad_check([&] { return probes::transformer_loss(ex, w, cw, nullptr, 0.0).weighted_loss; },
                                  refs(w, g), tol);
      label = "transformer L=" + std::to_string(cfg.layers) + " E=" + std::to_string(cfg.embed) +
              " H=" + std::to_string(cfg.heads) + " window=" + std::to_string(cfg.window);
    } else {
      probes::AttentionProbeConfig cfg;
      cfg.input_dim = static_cast<std::size_t>(rng.range(3, 6));
      cfg.heads = pick<std::size_t>(rng, {1, 2});
      cfg.embed = cfg.heads * pick<std::size_t>(rng, {2, 4});
      cfg.classes = pick<std::size_t>(rng, {2, 3, 5});
      cfg.input_layers.clear();
      const auto nl = rng.range(1, 2);
      for (long long l = 0; l < nl; ++l) cfg.input_layers.push_back(static_cast<int>(10 * (l + 1)));
      auto w = probes::AttentionProbeWeights::init(cfg, rng.next_u64());
      randomize(w, rng, 0.5);
      probes::PooledExample ex;
      const auto tokens = rng.range(1, 5);
      for (long long l = 0; l < nl; ++l) ex.input.layers.push_back(random_matrix(tokens, static_cast<Eigen::Index>(cfg.input_dim), rng));
      ex.label = static_cast<int>(rng.below(cfg.classes));
      const auto cw = probes::class_weights(probes::TrainRecipe{.positive_class = 0, .positive_weight = 2.0}, cfg.classes);
      auto g = probes::AttentionProbeWeights::zeros(cfg);
      probes::attention_loss(ex, w, cw, &g, 1.0);
      report = kernel::grad_check([&] { return probes::attention_loss(ex, w, cw, nullptr, 0.0).weighted_loss; },
                                  refs(w, g), tol);
      label = "attention classes=" + std::to_string(cfg.classes) + " layers=" + std::to_string(nl) +
              " E=" + std::to_string(cfg.embed) + " H=" + std::to_string(cfg.heads);
    }
    ++out.configurations;
    out.max_rel_error = std::max(out.max_rel_error, report.max_rel_error);
    if (!report.pass) out.failures.push_back(label);
  }
  return out;
}

eval::MatchResult match_reference(std::span<const Span> detections, std::span<const Span> ground_truth,
                                  const eval::Verifier& verifier) {
  // Integer arithmetic throughout: overlap > half  <=>  2|a∩b| > |a|.
  auto inter = [](const Span& a, const Span& b) {
    const std::size_t lo = std::max(a.start, b.start), hi = std::min(a.end, b.end);
    return hi > lo ? hi - lo : std::size_t{0};
  };
  auto significant = [&](const Span& a, const Span& b) {
    const auto i = inter(a, b);
    return 2 * i > a.length() || 2 * i > b.length();
  };
  auto inside = [](const Span& in, const Span& out) { return out.start <= in.start && in.end <= out.end; };

  eval::MatchResult r;
  for (const auto& g : ground_truth) {
    std::vector<Span> pg;
    for (const auto& p : detections) {
      if (significant(p, g)) pg.push_back(p);
    }
    eval::Flag f;
    if (pg.empty()) {
      f = {false, eval::Provenance::NoOverlap};
    } else {
      bool contained = false, covered = false;
      for (const auto& p : pg) {
        contained = contained || inside(g, p);
        covered = covered || 2 * inter(p, g) >= g.length();
      }
      f = contained ? eval::Flag{true, eval::Provenance::Contained} : eval::Flag{covered, eval::Provenance::Adjudicated};
    }
    r.g.push_back(f);
  }
  for (const auto& p : detections) {
    std::vector<Span> gp;
    for (const auto& g : ground_truth) {
      if (significant(p, g)) gp.push_back(g);
    }
    eval::Flag f;
    if (gp.empty()) {
      f = {verifier(p) == VerificationLabel::NotSupported, eval::Provenance::Verified};
    } else {
      bool contained = false, covered = false;
      for (const auto& g : gp) {
        contained = contained || inside(g, p);
        covered = covered || 2 * inter(p, g) >= p.length();
      }
      f = contained ? eval::Flag{true, eval::Provenance::Contained} : eval::Flag{covered, eval::Provenance::Adjudicated};
    }
    r.p.push_back(f);
  }
  return r;
}

RandomMatchCase random_match_case(Rng& rng) {
  RandomMatchCase c;
  const auto len = static_cast<std::size_t>(rng.range(8, 60));
  auto random_span = [&] {
    const auto a = static_cast<std::size_t>(rng.below(len));
    const auto l = static_cast<std::size_t>(rng.range(1, 8));
    return Span(a, std::min(len, a + l) == a ? a + 1 : std::min(len + 1, a + l));
  };
  const auto ng = rng.below(6), np = rng.below(7);
  for (std::uint64_t i = 0; i < ng; ++i) c.ground_truth.push_back(random_span());
  for (std::uint64_t i = 0; i < np; ++i) {
    // Half of the detections are perturbed copies of ground truth.
    if (!c.ground_truth.empty() && rng.bernoulli(0.5)) {
      Span g = c.ground_truth[rng.below(c.ground_truth.size())];
      const auto ds = rng.range(-2, 2), de = rng.range(-2, 2);
      const auto s = static_cast<long long>(g.start) + ds, e = static_cast<long long>(g.end) + de;
      if (s >= 0 && e > s) g = Span(static_cast<std::size_t>(s), static_cast<std::size_t>(e));
      c.detections.push_back(g);
    } else {
      c.detections.push_back(random_span());
    }
    c.verdicts.push_back(rng.bernoulli(0.4) ? VerificationLabel::NotSupported : VerificationLabel::Supported);
  }
  return c;
}

eval::Verifier case_verifier(const RandomMatchCase& c) {
  return [&c](const Span& s) {
    for (std::size_t i = 0; i < c.detections.size(); ++i) {
      if (c.detections[i] == s) return c.verdicts[i];
    }
    return VerificationLabel::Supported;
  };
}

std::size_t match_mismatches(std::size_t cases, std::uint64_t seed) {
  Rng rng(derive_key(seed, "match-cases"));
  std::size_t bad = 0;
  for (std::size_t i = 0; i < cases; ++i) {
    const auto c = random_match_case(rng);
    const auto v = case_verifier(c);
    if (eval::match(c.detections, c.ground_truth, v) != match_reference(c.detections, c.ground_truth, v)) ++bad;
  }
  return bad;
}

namespace {

// Metric formulas against direct recounts on random counts.
std::string metric_formula_problems(std::uint64_t seed) {
  Rng rng(derive_key(seed, "metric-formulas"));
  for (int i = 0; i < 200; ++i) {
    eval::Counts c;
    c.sequences = 1 + rng.below(50);
    c.detections = rng.below(100);
    c.true_positives = c.detections ? rng.below(c.detections + 1) : 0;
    c.ground_truth = 1 + rng.below(100);
    c.caught = rng.below(c.ground_truth + 1);
    c.fixed = c.true_positives ? rng.below(c.true_positives / 2 + 1) : 0;
    c.correct_retract = c.true_positives ? rng.below(c.true_positives - c.fixed + 1) : 0;
    c.stable = rng.below(c.false_positives() + 1);
    const auto r = eval::metrics_report(c);
    const double n = static_cast<double>(c.sequences);
    auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
    if (!near(r.caught_per_seq, static_cast<double>(c.caught) / n)) return "C_M";
    if (!near(r.hallucinations_per_seq, static_cast<double>(c.ground_truth) / n)) return "G+_M";
    if (!near(r.false_positives_per_seq, static_cast<double>(c.detections - c.true_positives) / n)) return "FP_M";
    if (c.detections > 0 && !near(*r.precision, static_cast<double>(c.true_positives) / static_cast<double>(c.detections))) return "precision";
    if (c.detections == 0 && r.precision) return "precision defined on empty P";
    if (c.true_positives > 0 && !near(*r.fixed_rate, static_cast<double>(c.fixed) / static_cast<double>(c.true_positives))) return "F_M";
    // OR must equal ICR + DR when every component is defined.
    const auto d = eval::derived_metrics(r, r, r);
    if (d.overall && d.in_context && d.direct && !near(*d.overall, *d.in_context + *d.direct)) return "OR != ICR + DR";
  }
  return "";
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

template <typename F>
CheckResult timed(const std::string& name, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{name, false, "", 0.0};
  try {
    std::tie(r.pass, r.detail) = f();
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(timed("probe gradients vs finite differences", [&] {
    const auto g = probe_grad_fidelity(24, seed);
    return std::pair{g.failures.empty(), std::to_string(g.configurations) + " configurations, max rel error " +
                                             std::to_string(g.max_rel_error)};
  }));
  out.push_back(timed("match() vs literal reference", [&] {
    const auto bad = match_mismatches(1000, seed);
    return std::pair{bad == 0, std::to_string(bad) + " mismatches in 1000 cases"};
  }));
  out.push_back(timed("metric formulas vs recounts", [&] {
    const auto p = metric_formula_problems(seed);
    return std::pair{p.empty(), p.empty() ? std::string("200 random count sets") : "mismatch in " + p};
  }));
  out.push_back(timed("weights container round trip", [&] {
    const world::WorldParams wp;
    const world::World w(wp);
    probes::ProbeSet set;
    auto cfg = probes::ProbeTrainingConfig::desk(wp.feature_dim);
    set.localization = probes::TransformerProbeWeights::init(cfg.localization, seed);
    set.classification = probes::AttentionProbeWeights::init(cfg.classification, seed + 1);
    set.correction = probes::AttentionProbeWeights::init(cfg.correction, seed + 2);
    set.retraction = probes::AttentionProbeWeights::init(cfg.retraction, seed + 3);
    const auto bytes = io::encode_weights(io::probe_set_file(set, w.fingerprint()));
    auto back = io::probe_set_from_file(io::decode_weights(bytes), w.fingerprint());
    const bool same = io::encode_weights(io::probe_set_file(back, w.fingerprint())) == bytes;
    return std::pair{same, std::to_string(bytes.size()) + " bytes"};
  }));
  out.push_back(timed("world generation is deterministic", [&] {
    const world::World w{world::WorldParams{}};
    bool same = true;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto a = world::generate_completion(s, w), b = world::generate_completion(s, w);
      const auto sa = world::emit_activations(a, w), sb = world::emit_activations(b, w);
      same = same && a.tokens == b.tokens && io::to_json(a) == io::to_json(b);
      for (std::size_t l = 0; l < sa.layers.size(); ++l) same = same && sa.layers[l] == sb.layers[l];
    }
    return std::pair{same, std::string("20 completions regenerated")};
  }));
  return out;
}

}  // namespace rlfr::check
