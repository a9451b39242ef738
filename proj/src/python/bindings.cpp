#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rlfr/cli.hpp"
#include "rlfr/config.hpp"
#include "rlfr/error.hpp"
#include "rlfr/eval.hpp"
#include "rlfr/io.hpp"
#include "rlfr/reward.hpp"
#include "rlfr/selfcheck.hpp"

namespace py = pybind11;
using namespace rlfr;

// Structured values cross the boundary as JSON text; the Python package
// wraps these into dicts.
namespace {

Action action_arg(const std::string& s) {
  const auto a = parse_action(s);
  if (!a) throw py::value_error("unknown action '" + s + "'");
  return *a;
}

std::vector<Span> spans_arg(const std::vector<std::pair<std::size_t, std::size_t>>& xs) {
  std::vector<Span> out;
  for (const auto& [a, b] : xs) {
    if (a >= b) throw py::value_error("spans must satisfy start < end");
    out.emplace_back(a, b);
  }
  return out;
}

world::GateRecord gates_arg(const std::string& action, bool legible, bool format_ok, bool meta, bool substantive,
                            bool strict_substantive) {
  world::GateRecord g;
  g.legible = legible;
  g.format_ok = format_ok;
  g.meta = meta;
  g.predicted_action = action_arg(action);
  g.substantive = substantive;
  g.strict_substantive = strict_substantive;
  return g;
}

eval::MetricsReport report_arg(const std::string& counts) {
  return eval::metrics_report(io::counts_from_json(json::parse(counts), "counts"));
}

json breakdown_json(const reward::RewardBreakdown& b) {
  return {{"reward", b.reward}, {"path", std::string(reward::to_string(b.path))}, {"raw_score", b.raw_score}};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Probe-reward pipeline on a synthetic world";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<CheckFailure>(m, "CheckFailure", PyExc_RuntimeError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one CLI command; returns (exit code, stdout, stderr).");

  m.def(
      "default_config", [] { return canonical_text(to_json(RunConfig{})); }, "Default run configuration as JSON.");

  m.def(
      "resolve_config",
      [](const std::string& text) {
        const auto c = run_config_from_json(json::parse(text));
        c.validate();
        return canonical_text(to_json(c));
      },
      py::arg("config_json"), "Fills defaults and validates a partial configuration.");

  m.def(
      "generate_completion",
      [](std::uint64_t seed, const std::string& config_json) {
        const auto c = run_config_from_json(json::parse(config_json));
        return io::to_json(world::generate_completion(seed, world::World(c.world))).dump();
      },
      py::arg("seed"), py::arg("config_json") = "{}", "Raw completion for a prompt seed.");

  m.def(
      "run_loop",
      [](std::uint64_t seed, const std::string& config_json) {
        const auto c = run_config_from_json(json::parse(config_json));
        c.validate();
        const world::World w(c.world);
        const auto policy = rl::PolicyParams::base(c.rl.trainer.buckets);
        const probes::OracleDetection det;
        const probes::OracleReward rew;
        return io::to_json(infer::run_loop(seed, {&w, &policy, &det, &rew}, c.infer.loop)).dump();
      },
      py::arg("seed"), py::arg("config_json") = "{}",
      "Inference loop with ground-truth detector and reward, base policy.");

  m.def(
      "evaluate_transcript",
      [](const std::string& transcript_json) {
        const auto t = io::transcript_from_json(json::parse(transcript_json), "transcript");
        return io::to_json(eval::evaluate_transcript(t)).dump();
      },
      py::arg("transcript_json"));

  m.def(
      "match",
      [](const std::vector<std::pair<std::size_t, std::size_t>>& detections,
         const std::vector<std::pair<std::size_t, std::size_t>>& ground_truth, const std::vector<bool>& verdicts) {
        const auto P = spans_arg(detections), G = spans_arg(ground_truth);
        if (verdicts.size() != P.size()) throw py::value_error("one verdict per detection");
        const auto r = eval::match(P, G, [&](const Span& s) {
          for (std::size_t i = 0; i < P.size(); ++i)
            if (P[i] == s) return verdicts[i] ? VerificationLabel::NotSupported : VerificationLabel::Supported;
          return VerificationLabel::Supported;
        });
        std::vector<bool> p, g;
        for (const auto& f : r.p) p.push_back(f.correct);
        for (const auto& f : r.g) g.push_back(f.correct);
        return py::make_tuple(p, g);
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("verdicts"),
      "Three-phase matching; `verdicts[i]` is the verifier's answer for detection i (True = NotSupported).");

  m.def(
      "metrics_report", [](const std::string& counts) { return io::to_json(report_arg(counts)).dump(); },
      py::arg("counts_json"));

  m.def(
      "derived_metrics",
      [](const std::string& base, const std::string& rlfr, const std::string& run) {
        return io::to_json(eval::derived_metrics(report_arg(base), report_arg(rlfr), report_arg(run))).dump();
      },
      py::arg("base_counts"), py::arg("rlfr_counts"), py::arg("run_counts"));

  m.def(
      "correction_reward",
      [](double fixed_prob, const std::string& action, bool legible, bool format_ok, bool meta, bool substantive,
         bool strict_substantive) {
        return breakdown_json(
                   reward::correction_reward(gates_arg(action, legible, format_ok, meta, substantive, strict_substantive),
                                             fixed_prob))
            .dump();
      },
      py::arg("fixed_prob"), py::arg("predicted_action") = "Correct", py::arg("legible") = true,
      py::arg("format_ok") = true, py::arg("meta") = false, py::arg("substantive") = true,
      py::arg("strict_substantive") = true);

  m.def(
      "retraction_reward",
      [](double prob, double lambda, const std::string& action, bool legible, bool format_ok, bool meta,
         bool substantive, bool strict_substantive) {
        return breakdown_json(reward::retraction_reward(
                                  gates_arg(action, legible, format_ok, meta, substantive, strict_substantive), prob,
                                  lambda))
            .dump();
      },
      py::arg("correct_retract_prob"), py::arg("lambda_"), py::arg("predicted_action") = "Retract",
      py::arg("legible") = true, py::arg("format_ok") = true, py::arg("meta") = false, py::arg("substantive") = true,
      py::arg("strict_substantive") = true);

  m.def(
      "update_lambda",
      [](double lambda, double r_hat, double gamma, double target, double lambda_max) {
        reward::LagrangeState s;
        s.lambda = lambda;
        s.gamma = gamma;
        s.target_rate = target;
        s.lambda_max = lambda_max;
        return reward::update_lambda(s, r_hat).lambda;
      },
      py::arg("lambda_"), py::arg("r_hat"), py::arg("gamma") = 0.2, py::arg("target") = 0.4,
      py::arg("lambda_max") = 1.0);

  m.def(
      "best_of_n",
      [](const std::vector<std::pair<std::string, double>>& candidates) {
        std::vector<infer::ScoredCandidate> c;
        for (const auto& [a, s] : candidates) c.push_back({action_arg(a), s});
        return infer::best_of_n(c);
      },
      py::arg("candidates"), "Index chosen from (action, score) pairs.");

  m.def(
      "kl_divergence",
      [](const std::vector<double>& p, const std::vector<double>& q) { return eval::kl_divergence(p, q); },
      py::arg("p"), py::arg("q"));

  m.def(
      "adjusted_rand_index",
      [](const std::vector<int>& a, const std::vector<int>& b) { return eval::adjusted_rand_index(a, b); },
      py::arg("a"), py::arg("b"));

  m.def(
      "selfcheck",
      [](std::uint64_t seed) {
        json out = json::array();
        for (const auto& r : check::run_selfcheck(seed)) out.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
        return out.dump();
      },
      py::arg("seed") = 1);

  m.def("fnv1a", [](const std::string& bytes) { return hex64(fnv1a(bytes)); }, py::arg("data"));
}
