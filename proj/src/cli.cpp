#include "rlfr/cli.hpp"

#include <chrono>
#include <ctime>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "rlfr/error.hpp"
#include "rlfr/io.hpp"
#include "rlfr/selfcheck.hpp"

namespace rlfr::cli {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::size_t jobs = 1;
  std::string format = "json";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "RunConfig JSON document");
  cmd->add_option("--seed", c.seed, "Overrides the config seed");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--format", c.format, "Summary format on stdout")->check(CLI::IsMember({"json", "table"}));
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : io::load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Collects outputs of one command and writes <command>.manifest.json next
// to them.
class Session {
 public:
  Session(std::string command, const RunConfig& cfg, fs::path dir) : dir_(std::move(dir)) {
    m_.command = std::move(command);
    m_.config = to_json(cfg);
    m_.config_hash = hex64(config_hash(cfg));
    m_.seed = cfg.seed;
    m_.versions = io::component_versions();
    m_.started = utc_now();
    fs::create_directories(dir_);
  }

  std::string input(const fs::path& p) {
    auto text = io::read_text(p);
    m_.inputs.emplace_back(p.filename().string(), hex64(fnv1a(text)));
    return text;
  }

  void write(const std::string& name, const std::string& bytes) {
    io::write_text(dir_ / name, bytes);
    m_.outputs.push_back({name, hex64(fnv1a(bytes)), bytes.size()});
  }

  void finish() {
    m_.finished = utc_now();
    io::write_text(dir_ / (m_.command + ".manifest.json"), canonical_text(io::to_json(m_)));
  }

 private:
  fs::path dir_;
  io::RunManifest m_;
};

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "-";
  return v.dump();
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& rows) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), rows);
  } else if (j.is_array() && !j.empty() && (j.front().is_object() || j.front().is_array())) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "[" + std::to_string(i) + "]", rows);
  } else {
    rows.emplace_back(prefix, j.is_array() ? j.dump() : scalar_text(j));
  }
}

void print_summary(const json& summary, const std::string& format, std::ostream& out) {
  if (format == "json") {
    out << summary.dump(2) << "\n";
    return;
  }
  std::vector<std::pair<std::string, std::string>> rows;
  flatten(summary, "", rows);
  std::size_t width = 0;
  for (const auto& [k, v] : rows) width = std::max(width, k.size());
  for (const auto& [k, v] : rows) out << k << std::string(width - k.size() + 2, ' ') << v << "\n";
}

std::vector<world::Completion> read_completions(Session& s, const fs::path& p, const world::World& w) {
  std::vector<world::Completion> out;
  std::istringstream in(s.input(p));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const std::string where = p.filename().string() + ":" + std::to_string(n);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": " + e.what());
    }
    auto c = io::completion_from_json(j, where);
    if (c.world_fingerprint != w.fingerprint()) throw CheckFailure(where + ": completion from a different world");
    out.push_back(std::move(c));
  }
  if (out.empty()) throw DataError(p.string() + ": no completions");
  return out;
}

std::vector<infer::InferenceTranscript> read_transcripts(Session& s, const fs::path& p, const world::World& w) {
  std::vector<infer::InferenceTranscript> out;
  std::istringstream in(s.input(p));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const std::string where = p.filename().string() + ":" + std::to_string(n);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": " + e.what());
    }
    auto t = io::transcript_from_json(j, where);
    if (t.completion.world_fingerprint != w.fingerprint()) {
      throw CheckFailure(where + ": transcript from a different world");
    }
    out.push_back(std::move(t));
  }
  if (out.empty()) throw DataError(p.string() + ": no transcripts");
  return out;
}

probes::ProbeSet read_probes(Session& s, const fs::path& p, const world::World& w) {
  return io::probe_set_from_file(io::decode_weights(s.input(p)), w.fingerprint());
}

// ---- commands -------------------------------------------------------------------

json cmd_gen(const Common& c) {
  const auto cfg = resolve_config(c);
  const world::World w(cfg.world);
  Session s("gen", cfg, c.out);
  const auto completions = probes::generate_dataset(w, {cfg.gen.first_seed, cfg.gen.completions});
  std::vector<json> records;
  std::vector<world::ActivationSheet> sheets;
  std::size_t claims = 0, ns = 0;
  for (const auto& comp : completions) {
    records.push_back(io::to_json(comp));
    sheets.push_back(world::emit_activations(comp, w));
    claims += comp.claims.size();
    for (const auto& cl : comp.claims) ns += cl.truth == VerificationLabel::NotSupported;
  }
  s.write("completions.jsonl", io::jsonl(records));
  s.write("activations.bin", io::encode_weights(io::activations_file(completions, sheets, w.fingerprint())));
  s.finish();
  return {{"command", "gen"}, {"completions", completions.size()}, {"claims", claims}, {"not_supported", ns},
          {"world_fingerprint", hex64(w.fingerprint())}};
}

json cmd_probe_train(const Common& c, const std::string& dataset) {
  const auto cfg = resolve_config(c);
  const world::World w(cfg.world);
  Session s("probe-train", cfg, c.out);
  std::vector<world::Completion> data;
  if (!dataset.empty()) data = read_completions(s, dataset, w);
  probes::ProbeTrainingReport report;
  const auto set = probes::train_probe_set(w, cfg.probes, derive_key(cfg.seed, "probes"), &report, data);
  std::vector<json> history;
  auto add = [&](const char* name, const std::vector<probes::EpochRecord>& h) {
    for (const auto& e : h) {
      json r = io::to_json(e);
      r["probe"] = name;
      history.push_back(r);
    }
  };
  add("localization", report.localization);
  add("classification", report.classification);
  add("correction", report.correction);
  add("retraction", report.retraction);
  s.write("probes.bin", io::encode_weights(io::probe_set_file(set, w.fingerprint())));
  s.write("probe_history.jsonl", io::jsonl(history));
  s.finish();
  json final_loss;
  for (const auto& r : history) final_loss[r["probe"].get<std::string>()] = r["loss"];
  return {{"command", "probe-train"}, {"dataset", dataset.empty() ? "config" : fs::path(dataset).filename().string()},
          {"final_loss", final_loss}};
}

json attention_summary(const probes::ProbeEvaluation& ev) {
  // Normalized entropy of each head's pooling weights and the largest weight,
  // averaged over examples with more than one token.
  double entropy = 0.0, peak = 0.0;
  std::size_t n = 0;
  for (const auto& a : ev.attention) {
    if (a.cols() < 2) continue;
    for (Eigen::Index h = 0; h < a.rows(); ++h) {
      double e = 0.0;
      for (Eigen::Index t = 0; t < a.cols(); ++t) {
        const double p = a(h, t);
        if (p > 0) e -= p * std::log(p);
      }
      entropy += e / std::log(static_cast<double>(a.cols()));
      peak += a.row(h).maxCoeff();
      ++n;
    }
  }
  if (n == 0) return {{"heads_examples", 0}, {"mean_normalized_entropy", nullptr}, {"mean_max_weight", nullptr}};
  return {{"heads_examples", n}, {"mean_normalized_entropy", entropy / double(n)}, {"mean_max_weight", peak / double(n)}};
}

json cmd_probe_eval(const Common& c, const std::string& probes_path, const std::string& dataset) {
  const auto cfg = resolve_config(c);
  const world::World w(cfg.world);
  Session s("probe-eval", cfg, c.out);
  const auto set = read_probes(s, probes_path, w);
  const auto data = dataset.empty() ? probes::generate_dataset(w, cfg.eval.held_out) : read_completions(s, dataset, w);
  const auto& pc = cfg.probes;

  const auto cls_data = probes::classification_dataset(w, data, pc.classification.input_layers);
  const auto cls = probes::evaluate_probe(set.classification, cls_data, 1);
  std::vector<double> bayes;
  std::vector<int> labels;
  probes::SpanF1 f1;
  for (const auto& comp : data) {
    const auto sheet = world::emit_activations(comp, w);
    for (const auto& cl : comp.claims) {
      if (cl.truth == VerificationLabel::InsufficientInformation) continue;
      bayes.push_back(probes::bayes_llr(w, sheet, cl.span));
      labels.push_back(cl.truth == VerificationLabel::NotSupported ? 1 : 0);
    }
    const auto p = set.boundary_probs(comp, sheet);
    const auto segs = probes::segment(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())), 0.5);
    std::vector<Span> gold;
    for (const auto& cl : comp.claims) gold.push_back(cl.span);
    f1 += probes::span_f1(segs, gold);
  }
  const auto key = data.front().prompt_seed;
  const auto cor = probes::evaluate_probe(
      set.correction, probes::reward_dataset(w, data, Action::Correct, pc.correction.input_layers, key), 0);
  const auto ret = probes::evaluate_probe(
      set.retraction, probes::reward_dataset(w, data, Action::Retract, pc.retraction.input_layers, key), 0);

  json report = {
      {"completions", data.size()},
      {"classification",
       {{"examples", cls_data.size()},
        {"auc", cls.auc},
        {"ece", cls.calibration.ece},
        {"bayes_auc", probes::auc(bayes, labels)},
        {"calibration", io::to_json(cls.calibration)},
        {"attention", attention_summary(cls)}}},
      {"localization",
       {{"threshold", 0.5},
        {"span_f1", f1.f1()},
        {"precision", f1.precision()},
        {"recall", f1.recall()},
        {"predicted", f1.predicted},
        {"gold", f1.gold}}},
      {"correction", {{"auc", cor.auc}, {"ece", cor.calibration.ece}, {"attention", attention_summary(cor)}}},
      {"retraction", {{"auc", ret.auc}, {"ece", ret.calibration.ece}, {"attention", attention_summary(ret)}}},
  };
  s.write("probe_eval.json", canonical_text(report));
  s.finish();
  return {{"command", "probe-eval"},
          {"classification_auc", cls.auc},
          {"classification_ece", cls.calibration.ece},
          {"bayes_auc", report["classification"]["bayes_auc"]},
          {"span_f1", f1.f1()}};
}

json step_summary(const rl::StepRecord& r) {
  return {{"mean_reward", r.mean_reward},
          {"oracle_success_rate", r.oracle_success_rate},
          {"oracle_fixed_rate", r.oracle_fixed_rate},
          {"oracle_correct_retract_rate", r.oracle_correct_retract_rate},
          {"retraction_rate", r.retraction_rate ? json(*r.retraction_rate) : json(nullptr)},
          {"action_mix", {{"maintain", r.action_mix[0]}, {"correct", r.action_mix[1]}, {"retract", r.action_mix[2]}}},
          {"ns_targets", r.ns_targets}};
}

json cmd_rl_train(const Common& c, const std::string& probes_path) {
  const auto cfg = resolve_config(c);
  const world::World w(cfg.world);
  Session s("rl-train", cfg, c.out);
  const auto set = read_probes(s, probes_path, w);
  const auto& tc = cfg.rl.trainer;
  const auto init = cfg.rl.base_init ? rl::PolicyParams::base(tc.buckets) : rl::PolicyParams::uniform(tc.buckets);
  const auto eval_key = derive_key(cfg.seed, "rl-eval");
  const auto before = rl::evaluate_policy(init, w, set, set, tc, cfg.rl.lagrange.lambda, eval_key, cfg.rl.eval_rounds);
  const auto result = rl::run_training(tc, cfg.rl.lagrange, init, w, set, set, cfg.seed);
  const auto after = rl::evaluate_policy(result.policy, w, set, set, tc, result.lagrange.lambda, eval_key, cfg.rl.eval_rounds);

  std::vector<json> history;
  for (const auto& r : result.history) history.push_back(io::to_json(r));
  const std::size_t tail = std::min<std::size_t>(50, result.history.size());
  double rate = 0.0;
  std::size_t defined = 0;
  for (std::size_t i = result.history.size() - tail; i < result.history.size(); ++i) {
    if (const auto& r = result.history[i].retraction_rate) {
      rate += *r;
      ++defined;
    }
  }
  json summary = {
      {"steps", result.history.size()},
      {"final_lambda", result.lagrange.lambda},
      {"tail_steps", tail},
      {"tail_retraction_rate", defined ? json(rate / double(defined)) : json(nullptr)},
      {"untrained", step_summary(before)},
      {"trained", step_summary(after)},
      {"success_gain", after.oracle_success_rate - before.oracle_success_rate},
  };
  s.write("policy.bin", io::encode_weights(io::policy_file(result.policy, w.fingerprint())));
  s.write("rl_history.jsonl", io::jsonl(history));
  s.write("rl_summary.json", canonical_text(summary));
  s.finish();
  return {{"command", "rl-train"},
          {"steps", summary["steps"]},
          {"tail_retraction_rate", summary["tail_retraction_rate"]},
          {"untrained_success", before.oracle_success_rate},
          {"trained_success", after.oracle_success_rate}};
}

struct InferOverrides {
  std::string strategy, sampling;
  std::optional<std::size_t> n;
};

json cmd_infer(const Common& c, const std::string& probes_path, const std::string& policy_path,
               const InferOverrides& o) {
  auto cfg = resolve_config(c);
  auto& loop = cfg.infer.loop;
  if (!o.strategy.empty()) {
    const auto v = infer::parse_strategy(o.strategy);
    if (!v) throw ConfigError("unknown strategy '" + o.strategy + "'");
    loop.strategy = *v;
  }
  if (!o.sampling.empty()) {
    const auto v = infer::parse_sampling(o.sampling);
    if (!v) throw ConfigError("unknown sampling '" + o.sampling + "'");
    loop.sampling = *v;
  }
  if (o.n) loop.n = *o.n;
  cfg.validate();
  const world::World w(cfg.world);
  Session s("infer", cfg, c.out);
  const auto set = read_probes(s, probes_path, w);
  const auto policy = policy_path.empty()
                          ? rl::PolicyParams::base(cfg.rl.trainer.buckets)
                          : io::policy_from_file(io::decode_weights(s.input(policy_path)), w.fingerprint());
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.infer.prompts; ++i) seeds.push_back(cfg.infer.first_prompt + i);
  const infer::LoopModels m{&w, &policy, &set, &set};
  const auto transcripts = infer::run_prompts(seeds, m, loop, c.jobs);
  std::vector<json> records;
  std::size_t interventions = 0, flagged = 0;
  for (const auto& t : transcripts) {
    records.push_back(io::to_json(t));
    interventions += t.interventions.size();
    flagged += t.flagged.size();
  }
  s.write("transcripts.jsonl", io::jsonl(records));
  s.finish();
  return {{"command", "infer"},
          {"prompts", transcripts.size()},
          {"strategy", to_string(loop.strategy)},
          {"sampling", to_string(loop.sampling)},
          {"n", loop.n},
          {"policy", policy_path.empty() ? "base" : fs::path(policy_path).filename().string()},
          {"interventions", interventions},
          {"flagged", flagged}};
}

json cmd_eval(const Common& c, const std::string& transcripts, const std::string& base_path,
              const std::string& rlfr_path) {
  if (base_path.empty() != rlfr_path.empty()) throw ConfigError("--base and --rlfr must be given together");
  const auto cfg = resolve_config(c);
  const world::World w(cfg.world);
  Session s("eval", cfg, c.out);
  auto evaluate = [&](const std::string& p) {
    const auto trs = read_transcripts(s, p, w);
    std::vector<eval::SequenceEval> out;
    out.reserve(trs.size());
    for (const auto& t : trs) out.push_back(eval::evaluate_transcript(t));
    return out;
  };
  const auto run = evaluate(transcripts);
  std::vector<std::pair<std::string, eval::MetricsReport>> rows{{"run", eval::metrics_report(run)}};
  std::vector<std::pair<std::string, eval::DerivedMetrics>> derived;
  if (!base_path.empty()) {
    rows.emplace_back("base", eval::metrics_report(evaluate(base_path)));
    rows.emplace_back("rlfr", eval::metrics_report(evaluate(rlfr_path)));
    derived.emplace_back("run", eval::derived_metrics(rows[1].second, rows[2].second, rows[0].second));
  }
  json reports = json::object();
  for (const auto& [name, r] : rows) reports[name] = io::to_json(r);
  json doc = {{"reports", reports}};
  if (!derived.empty()) doc["derived"] = io::to_json(derived.front().second);
  std::vector<json> log;
  for (const auto& e : run) log.push_back(io::to_json(e));
  s.write("metrics.json", canonical_text(doc));
  s.write("metrics.csv", io::metrics_csv(rows, derived));
  s.write("eval_log.jsonl", io::jsonl(log));
  s.finish();
  json summary = {{"command", "eval"}, {"run", reports["run"]}};
  if (!derived.empty()) summary["derived"] = doc["derived"];
  return summary;
}

json cmd_analyze(const Common& c) {
  const auto cfg = resolve_config(c);
  const world::World w(cfg.world);
  Session s("analyze", cfg, c.out);
  const auto& ev = cfg.eval;
  const std::vector<int> layer{ev.analysis_layer};

  std::vector<eval::KlSequence> seqs;
  for (std::size_t i = 0; i < ev.kl_sequences; ++i) {
    const auto comp = world::generate_completion(ev.held_out.first_seed + i, w);
    const auto sheet = world::emit_activations(comp, w, layer);
    seqs.push_back(eval::tilted_policy_pair(w, comp, sheet, ev.analysis_layer, ev.kl_vocab, ev.kl_eta,
                                            derive_key(cfg.seed, "kl")));
  }
  json kl = json::array();
  for (const auto& r : eval::kl_stratified(seqs)) {
    auto stratum = [](const eval::KlStratum& st) {
      return json{{"mean", st.mean}, {"std", st.std}, {"sequences", st.sequences}};
    };
    kl.push_back({{"source", r.source},
                  {"supported", stratum(r.supported)},
                  {"not_supported", stratum(r.not_supported)},
                  {"infinite_tokens", r.infinite_tokens}});
  }

  // First held-out completion long enough to cluster.
  std::optional<eval::Dendrogram> tree;
  std::uint64_t tree_seed = 0;
  for (std::size_t i = 0; i < ev.held_out.completions && !tree; ++i) {
    const auto comp = world::generate_completion(ev.held_out.first_seed + i, w);
    if (comp.size() < 6) continue;
    tree = eval::dendrogram(world::emit_activations(comp, w, layer), ev.analysis_layer, ev.dendrogram_components);
    tree_seed = comp.prompt_seed;
  }
  if (!tree) throw DataError("analyze: no held-out completion has 6 tokens");
  json merges = json::array();
  for (const auto& m : tree->merges) merges.push_back({m.left, m.right, m.height, m.size});

  s.write("kl.json", canonical_text({{"eta", ev.kl_eta}, {"vocab", ev.kl_vocab}, {"sequences", seqs.size()}, {"sources", kl}}));
  s.write("dendrogram.txt", tree->to_text() + "\n");
  s.write("dendrogram.json", canonical_text({{"prompt_seed", tree_seed},
                                             {"layer", ev.analysis_layer},
                                             {"leaves", tree->leaves},
                                             {"components", tree->components},
                                             {"energy_fraction", tree->energy_fraction},
                                             {"merges", merges}}));
  s.finish();
  return {{"command", "analyze"},
          {"kl", kl},
          {"dendrogram", {{"leaves", tree->leaves}, {"energy_fraction", tree->energy_fraction}}}};
}

json cmd_selfcheck(const Common& c, bool& failed) {
  const auto cfg = resolve_config(c);
  Session s("selfcheck", cfg, c.out);
  const auto results = check::run_selfcheck(cfg.seed);
  json checks = json::array();
  failed = false;
  for (const auto& r : results) {
    checks.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    failed = failed || !r.pass;
  }
  // Timings go to stdout only so the report stays byte-stable.
  s.write("selfcheck.json", canonical_text({{"checks", checks}, {"pass", !failed}}));
  s.finish();
  json summary = {{"command", "selfcheck"}, {"pass", !failed}};
  for (const auto& r : results) summary[r.name] = (r.pass ? "PASS " : "FAIL ") + r.detail;
  return summary;
}

json cmd_verify(const std::string& manifest_path) {
  const fs::path p(manifest_path);
  const auto m = io::manifest_from_json(io::read_json(p));
  const auto problems = io::verify_manifest(m, p.parent_path().empty() ? fs::path(".") : p.parent_path());
  if (!problems.empty()) {
    std::string msg = manifest_path + ":";
    for (const auto& q : problems) msg += " " + q + ";";
    throw CheckFailure(msg);
  }
  return {{"command", "verify"}, {"manifest", p.filename().string()}, {"outputs", m.outputs.size()}, {"consistent", true}};
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Probe-reward pipeline on a synthetic world", "rlfr"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen", "Generate completions and activations");
  add_common(gen, common);

  std::string dataset, probes_path, policy_path, transcripts, base_path, rlfr_path, manifest_path;
  auto* ptrain = app.add_subcommand("probe-train", "Train the four probes");
  add_common(ptrain, common);
  ptrain->add_option("--dataset", dataset, "completions.jsonl to train on instead of the config seed ranges");

  auto* peval = app.add_subcommand("probe-eval", "Held-out probe quality report");
  add_common(peval, common);
  peval->add_option("--probes", probes_path, "probes.bin")->required();
  peval->add_option("--dataset", dataset, "completions.jsonl to evaluate on instead of eval.held_out");

  auto* rltrain = app.add_subcommand("rl-train", "Train the intervention policy");
  add_common(rltrain, common);
  rltrain->add_option("--probes", probes_path, "probes.bin")->required();

  InferOverrides ov;
  auto* inf = app.add_subcommand("infer", "Run the detection and intervention loop");
  add_common(inf, common);
  inf->add_option("--probes", probes_path, "probes.bin")->required();
  inf->add_option("--policy", policy_path, "policy.bin (base policy if omitted)");
  inf->add_option("--strategy", ov.strategy, "inline | not-inline");
  inf->add_option("--sampling", ov.sampling, "vanilla | best-of-n");
  inf->add_option("--n", ov.n, "Candidates per flagged entity")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Ground-truth metrics for transcripts");
  add_common(ev, common);
  ev->add_option("--transcripts", transcripts, "transcripts.jsonl of the configuration under test")->required();
  ev->add_option("--base", base_path, "Base-policy transcripts, for the reduction decomposition");
  ev->add_option("--rlfr", rlfr_path, "Trained-policy transcripts without interventions");

  auto* an = app.add_subcommand("analyze", "KL stratification and activation dendrogram");
  add_common(an, common);

  auto* sc = app.add_subcommand("selfcheck", "Gradient checks and oracle-equivalence suite");
  add_common(sc, common);

  auto* ver = app.add_subcommand("verify", "Check a manifest against its outputs");
  ver->add_option("manifest", manifest_path, "<command>.manifest.json")->required();
  ver->add_option("--format", common.format)->check(CLI::IsMember({"json", "table"}));

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "rlfr: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    json summary;
    bool failed = false;
    if (*gen) summary = cmd_gen(common);
    else if (*ptrain) summary = cmd_probe_train(common, dataset);
    else if (*peval) summary = cmd_probe_eval(common, probes_path, dataset);
    else if (*rltrain) summary = cmd_rl_train(common, probes_path);
    else if (*inf) summary = cmd_infer(common, probes_path, policy_path, ov);
    else if (*ev) summary = cmd_eval(common, transcripts, base_path, rlfr_path);
    else if (*an) summary = cmd_analyze(common);
    else if (*sc) summary = cmd_selfcheck(common, failed);
    else if (*ver) summary = cmd_verify(manifest_path);
    print_summary(summary, common.format, out);
    return failed ? kCheckFailure : kOk;
  } catch (const ConfigError& e) {
    err << "rlfr: config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "rlfr: data error: " << e.what() << "\n";
    return kDataError;
  } catch (const CheckFailure& e) {
    err << "rlfr: check failed: " << e.what() << "\n";
    return kCheckFailure;
  } catch (const std::exception& e) {
    err << "rlfr: " << e.what() << "\n";
    return kOther;
  }
}

int main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace rlfr::cli
