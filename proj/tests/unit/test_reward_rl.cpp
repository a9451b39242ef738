#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "rlfr/error.hpp"
#include "rlfr/rl.hpp"

using namespace rlfr;
using namespace rlfr::reward;
using world::GateRecord;

namespace {

GateRecord passing(Action judged) {
  GateRecord g;
  g.predicted_action = judged;
  return g;
}

}  // namespace

TEST_CASE("correction reward rules") {
  auto g = passing(Action::Correct);
  CHECK(correction_reward(g, 0.98).reward == 0.95);
  CHECK(correction_reward(g, 0.02).reward == 0.1);
  CHECK(correction_reward(g, 0.5).reward == 0.5);
  CHECK(correction_reward(g, 0.5).path == RewardPath::ProbeScored);

  auto strict = g;
  strict.strict_substantive = false;
  CHECK(correction_reward(strict, 0.90).reward == 0.65);
  CHECK(correction_reward(strict, 0.30).reward == 0.30);

  auto illegible = g;
  illegible.legible = false;
  CHECK(correction_reward(illegible, 0.9).reward == -0.2);
  auto long_text = g;
  long_text.format_ok = false;
  CHECK(correction_reward(long_text, 0.9).reward == -0.2);

  auto meta = g;
  meta.meta = true;
  CHECK(correction_reward(meta, 0.9).reward == 0.0);
  auto thin = g;
  thin.substantive = false;
  CHECK(correction_reward(thin, 0.9).path == RewardPath::Insubstantive);
  CHECK(correction_reward(passing(Action::Retract), 0.9).reward == 0.0);
  CHECK(correction_reward(passing(Action::Maintain), 0.9).path == RewardPath::OffAction);
}

TEST_CASE("retraction reward rules") {
  const auto g = passing(Action::Retract);
  CHECK(retraction_reward(g, 0.8, 0.1).reward == doctest::Approx(0.455).epsilon(1e-12));
  CHECK(retraction_reward(g, 0.05, 0.0).reward == doctest::Approx(0.065).epsilon(1e-12));
  CHECK(retraction_reward(g, 1.0, 0.0).reward == doctest::Approx(0.65 * 0.95).epsilon(1e-12));
  CHECK(retraction_reward(passing(Action::Correct), 0.9, 0.0).reward == 0.0);
  CHECK(retraction_reward(passing(Action::Maintain), 0.9, 0.0).reward == 0.0);
  auto illegible = g;
  illegible.legible = false;
  CHECK(retraction_reward(illegible, 0.9, 0.0).reward == -0.2);
}

TEST_CASE("reward bounds and monotonicity over random gates") {
  Rng rng(3);
  for (int i = 0; i < 5000; ++i) {
    GateRecord g;
    g.legible = rng.bernoulli(0.9);
    g.format_ok = rng.bernoulli(0.9);
    g.meta = rng.bernoulli(0.1);
    g.substantive = rng.bernoulli(0.8);
    g.strict_substantive = rng.bernoulli(0.6);
    g.predicted_action = action_from_index(rng.below(3));
    const double s1 = rng.uniform(), s2 = rng.uniform(), lam = rng.uniform();
    for (Action a : {Action::Correct, Action::Retract, Action::Maintain}) {
      const auto r1 = assign_reward(a, g, std::min(s1, s2), lam).reward;
      const auto r2 = assign_reward(a, g, std::max(s1, s2), lam).reward;
      CHECK(r1 >= -0.2);
      CHECK(r2 <= 0.95);
      CHECK(r1 <= r2);
    }
  }
}

TEST_CASE("lambda update clamps to [0, max]") {
  LagrangeState s;
  s.lambda = 0.3;
  CHECK(update_lambda(s, 0.4).lambda == doctest::Approx(0.3));
  s.lambda = 0.0;
  CHECK(update_lambda(s, 0.2).lambda == 0.0);
  s.lambda = 0.95;
  CHECK(update_lambda(s, 1.0).lambda == 1.0);
  s.lambda = 0.5;
  CHECK(update_lambda(s, 0.6).lambda == doctest::Approx(0.54).epsilon(1e-12));

  Rng rng(4);
  LagrangeState t;
  for (int i = 0; i < 1000; ++i) {
    t = update_lambda(t, rng.uniform());
    CHECK(t.lambda >= 0.0);
    CHECK(t.lambda <= t.lambda_max);
  }
}

TEST_CASE("default controller and reward constants") {
  const LagrangeState s;
  CHECK(s.gamma == 0.2);
  CHECK(s.target_rate == 0.4);
  CHECK(s.lambda_max == 1.0);
  const RewardCaps caps;
  CHECK(caps.illegible_penalty == -0.2);
  CHECK(caps.clip_low == 0.1);
  CHECK(caps.clip_high == 0.95);
  CHECK(caps.retraction_cap == 0.65);
  const rl::TrainerConfig t;
  CHECK(t.kl_weight == 0.02);
  CHECK(t.clip_ceiling == 4.0);
  CHECK(t.reference_reset == 192);
  CHECK(t.weight_decay == 0.01);
  CHECK(t.adam_eps == 1e-15);
  CHECK(t.reference_batch_size == 32768);
  CHECK(t.reference_learning_rate == 1e-6);
}

TEST_CASE("empirical retraction rate") {
  std::vector<JudgedIntervention> batch;
  for (auto a : {Action::Retract, Action::Retract, Action::Correct, Action::Correct, Action::Correct}) {
    batch.push_back({a, passing(a)});
  }
  CHECK(*empirical_retraction_rate(batch) == doctest::Approx(0.4));
  for (auto& b : batch) b.gates.legible = false;
  CHECK_FALSE(empirical_retraction_rate(batch));

  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<JudgedIntervention> xs;
    std::size_t r = 0, c = 0;
    for (int i = 0; i < 20; ++i) {
      JudgedIntervention j;
      j.intended = action_from_index(rng.below(3));
      j.gates.predicted_action = rng.bernoulli(0.8) ? j.intended : action_from_index(rng.below(3));
      j.gates.legible = rng.bernoulli(0.9);
      j.gates.format_ok = rng.bernoulli(0.9);
      xs.push_back(j);
      if (j.gates.predicted_action != j.intended || !j.gates.legible || !j.gates.format_ok) continue;
      r += j.intended == Action::Retract;
      c += j.intended == Action::Correct;
    }
    const auto got = empirical_retraction_rate(xs);
    if (r + c == 0) CHECK_FALSE(got);
    else CHECK(*got == doctest::Approx(double(r) / double(r + c)).epsilon(1e-15));
  }
}

TEST_CASE("advantages") {
  CHECK_THROWS_AS(rl::compute_advantages({{0.5, 0.5, 0.5}}), std::domain_error);
  auto a = rl::compute_advantages({{0.2, 0.8}, {0.5, 0.5}});
  CHECK(a.kept == std::vector<bool>{true, false});
  CHECK(a.values[0][0] == doctest::Approx(-1.0));
  CHECK(a.values[0][1] == doctest::Approx(1.0));
  CHECK(a.batch_std == doctest::Approx(0.3));
  CHECK(a.values[1] == std::vector<double>{0.0, 0.0});

  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> groups(1 + rng.below(6));
    for (auto& g : groups) {
      const auto n = 2 + rng.below(6);
      const bool flat = rng.bernoulli(0.3);
      const double v = rng.uniform();
      for (std::size_t i = 0; i < n; ++i) g.push_back(flat ? v : std::round(rng.uniform() * 4) / 4);
    }
    // Two-pass reference.
    std::vector<std::vector<double>> centred;
    std::vector<bool> kept;
    double ss = 0;
    std::size_t n = 0;
    for (const auto& g : groups) {
      double m = 0;
      for (double v : g) m += v;
      m /= double(g.size());
      std::vector<double> c;
      bool nonzero = false;
      for (double v : g) {
        c.push_back(v - m);
        nonzero = nonzero || std::abs(v - m) > 1e-12;
      }
      kept.push_back(nonzero);
      if (nonzero)
        for (double v : c) {
          ss += v * v;
          ++n;
        }
      centred.push_back(c);
    }
    if (n == 0) {
      CHECK_THROWS_AS(rl::compute_advantages(groups), std::domain_error);
      continue;
    }
    const double sd = std::sqrt(ss / double(n));
    const auto got = rl::compute_advantages(groups);
    CHECK(got.kept == kept);
    double s2 = 0;
    std::size_t k = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      double gm = 0;
      for (std::size_t i = 0; i < groups[g].size(); ++i) {
        const double want = kept[g] ? centred[g][i] / sd : 0.0;
        CHECK(got.values[g][i] == doctest::Approx(want).epsilon(1e-12).scale(1.0));
        gm += got.values[g][i];
        if (kept[g]) {
          s2 += got.values[g][i] * got.values[g][i];
          ++k;
        }
      }
      CHECK(std::abs(gm / double(groups[g].size())) <= 1e-12);
    }
    if (k >= 2) CHECK(std::sqrt(s2 / double(k)) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("policy probabilities and log-prob gradients") {
  Rng rng(7);
  auto p = rl::PolicyParams::uniform(3);
  for (auto t : p.tensors())
    for (double& v : t) v = rng.normal();
  for (std::size_t b = 0; b < 3; ++b) {
    CHECK(p.action_probs(b).sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t a = 0; a < 3; ++a) CHECK(p.quality_probs(b, action_from_index(a)).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  // d log pi / d theta by central differences.
  const std::size_t bucket = 1;
  const Action act = Action::Retract;
  const int q = 2;
  auto g = rl::PolicyParams::uniform(3);
  for (auto t : g.tensors()) std::fill(t.begin(), t.end(), 0.0);
  p.add_log_prob_grad(bucket, act, q, 1.0, g);
  std::vector<kernel::ParamRef> refs;
  auto pt = p.tensors();
  auto gt = g.tensors();
  for (std::size_t i = 0; i < pt.size(); ++i) refs.push_back({"t" + std::to_string(i), pt[i], gt[i]});
  const auto report = kernel::grad_check([&] { return p.log_prob(bucket, act, q); }, refs, 1e-6);
  CHECK(report.pass);

  const auto base = rl::PolicyParams::base(4);
  const auto probs = base.action_probs(0);
  const double total = rl::kBaseCorrect + rl::kBaseMaintain + rl::kBaseRetract;
  CHECK(probs(index_of(Action::Correct)) == doctest::Approx(rl::kBaseCorrect / total).epsilon(1e-9));
  CHECK(probs(index_of(Action::Maintain)) == doctest::Approx(rl::kBaseMaintain / total).epsilon(1e-9));
  CHECK(probs(index_of(Action::Retract)) == doctest::Approx(rl::kBaseRetract / total).epsilon(1e-9));
  CHECK(base.bucket_of(0.0) == 0);
  CHECK(base.bucket_of(1.0) == 3);
}

TEST_CASE("surrogate gradient matches finite differences, including clipped ratios") {
  Rng rng(8);
  auto student = rl::PolicyParams::uniform(2);
  for (auto t : student.tensors())
    for (double& v : t) v = 0.7 * rng.normal();
  auto reference = rl::PolicyParams::uniform(2);
  std::vector<rl::UpdateSample> batch;
  for (int i = 0; i < 12; ++i) {
    const auto s = student.sample(i % 2, rng);
    // Tiny behaviour log-probs push some ratios past the ceiling.
    batch.push_back({std::size_t(i % 2), s.action, s.quality, s.log_prob - (i % 3 == 0 ? 3.0 : 0.0), rng.normal()});
  }
  const auto coeffs = rl::sample_coefficients(student, reference, batch, 4.0);
  bool any_clipped = false;
  for (const auto& c : coeffs) {
    any_clipped = any_clipped || c.ratio > 4.0;
    CHECK(c.clipped_ratio == std::min(c.ratio, 4.0));
  }
  CHECK(any_clipped);

  auto grad = rl::PolicyParams::uniform(2);
  for (auto t : grad.tensors()) std::fill(t.begin(), t.end(), 0.0);
  rl::surrogate_loss(student, batch, coeffs, 0.02, &grad);
  std::vector<kernel::ParamRef> refs;
  auto st = student.tensors();
  auto gt = grad.tensors();
  for (std::size_t i = 0; i < st.size(); ++i) refs.push_back({"t" + std::to_string(i), st[i], gt[i]});
  // Coefficients stay frozen while the parameters are perturbed.
  CHECK(kernel::grad_check([&] { return rl::surrogate_loss(student, batch, coeffs, 0.02, nullptr); }, refs, 1e-6).pass);

  // Replacing an over-ceiling ratio by the ceiling itself gives the same gradient.
  auto capped = coeffs;
  for (auto& c : capped) c.ratio = std::min(c.ratio, 4.0);
  auto grad2 = rl::PolicyParams::uniform(2);
  for (auto t : grad2.tensors()) std::fill(t.begin(), t.end(), 0.0);
  rl::surrogate_loss(student, batch, capped, 0.02, &grad2);
  CHECK((grad.action_logits - grad2.action_logits).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("k1 is zero when student equals reference") {
  const auto p = rl::PolicyParams::base(3);
  Rng rng(9);
  std::vector<rl::UpdateSample> batch;
  for (int i = 0; i < 10; ++i) {
    const auto s = p.sample(i % 3, rng);
    batch.push_back({std::size_t(i % 3), s.action, s.quality, s.log_prob, 0.0});
  }
  for (const auto& c : rl::sample_coefficients(p, p, batch, 4.0)) CHECK(std::abs(c.k1) <= 1e-12);
}

TEST_CASE("zero advantages at the reference only apply weight decay") {
  auto init = rl::PolicyParams::base(2);
  auto state = rl::make_trainer(init);
  rl::TrainerConfig cfg;
  std::vector<rl::UpdateSample> batch;
  Rng rng(10);
  for (int i = 0; i < 8; ++i) {
    const auto s = init.sample(i % 2, rng);
    batch.push_back({std::size_t(i % 2), s.action, s.quality, s.log_prob, 0.0});
  }
  rl::policy_update(state, batch, cfg);
  const double shrink = 1.0 - cfg.learning_rate * cfg.weight_decay;
  CHECK((state.student.action_logits - shrink * init.action_logits).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((state.student.quality_logits - shrink * init.quality_logits).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("reference reset copies the student and zeroes the next KL") {
  auto state = rl::make_trainer(rl::PolicyParams::base(1));
  rl::TrainerConfig cfg;
  cfg.reference_reset = 3;
  Rng rng(12);
  std::vector<bool> resets;
  for (int step = 0; step < 6; ++step) {
    std::vector<rl::UpdateSample> batch;
    for (int i = 0; i < 8; ++i) {
      const auto s = state.student.sample(0, rng);
      batch.push_back({0, s.action, s.quality, s.log_prob, s.action == Action::Correct ? 1.0 : -0.5});
    }
    const auto before = state.student.action_logits;
    const auto d = rl::policy_update(state, batch, cfg);
    resets.push_back(d.reference_reset);
    if (d.reference_reset) {
      CHECK(state.reference.action_logits == state.student.action_logits);
      CHECK(state.reference.quality_logits == state.student.quality_logits);
      for (const auto& c : rl::sample_coefficients(state.student, state.reference, batch, 4.0)) CHECK(c.k1 == 0.0);
    }
    CHECK(before != state.student.action_logits);
  }
  CHECK(resets == std::vector<bool>{false, false, true, false, false, true});
}

TEST_CASE("bandit: the rewarded action's probability rises monotonically") {
  auto state = rl::make_trainer(rl::PolicyParams::uniform(1));
  rl::TrainerConfig cfg;
  cfg.learning_rate = 1e-2;
  Rng rng(13);
  double prev = state.student.action_probs(0)(index_of(Action::Correct));
  for (int step = 0; step < 100; ++step) {
    std::vector<std::vector<double>> rewards(8);
    std::vector<rl::PolicySample> samples;
    for (auto& g : rewards) {
      for (int i = 0; i < 8; ++i) {
        const auto s = state.student.sample(0, rng);
        samples.push_back(s);
        g.push_back(s.action == Action::Correct ? 1.0 : 0.0);
      }
    }
    std::vector<rl::UpdateSample> batch;
    try {
      const auto adv = rl::compute_advantages(rewards);
      for (std::size_t g = 0; g < rewards.size(); ++g) {
        if (!adv.kept[g]) continue;
        for (std::size_t i = 0; i < 8; ++i) {
          const auto& s = samples[g * 8 + i];
          batch.push_back({0, s.action, s.quality, s.log_prob, adv.values[g][i]});
        }
      }
    } catch (const std::domain_error&) {
      continue;
    }
    rl::policy_update(state, batch, cfg);
    const double now = state.student.action_probs(0)(index_of(Action::Correct));
    CHECK(now >= prev);
    prev = now;
  }
  CHECK(prev > 0.7);
}

TEST_CASE("trainer config validation") {
  rl::TrainerConfig cfg;
  cfg.group_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 12;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
