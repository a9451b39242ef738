#include "rlfr/io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "rlfr/error.hpp"

namespace rlfr::io {

namespace {

using Reader = ObjectReader<DataError>;

template <typename T, typename Parse>
T parse_enum(const json& j, const std::string& path, Parse parse) {
  if (!j.is_string()) throw DataError(path + ": expected a label name");
  const auto v = parse(j.get<std::string>());
  if (!v) throw DataError(path + ": unknown value '" + j.get<std::string>() + "'");
  return *v;
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

// ---- records ----------------------------------------------------------------

json to_json(const Span& s) { return json::array({s.start, s.end}); }

Span span_from_json(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_unsigned() || !j[1].is_number_unsigned()) {
    throw DataError(path + ": expected [start, end]");
  }
  Span s(j[0].get<std::size_t>(), j[1].get<std::size_t>());
  if (!s.valid()) throw DataError(path + ": empty or reversed span");
  return s;
}

json to_json(const world::Claim& c) {
  return {{"span", to_json(c.span)},
          {"topic", c.topic},
          {"truth", std::string(to_string(c.truth))},
          {"knowledge", c.knowledge}};
}

world::Claim claim_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  world::Claim c;
  c.span = span_from_json(r.required_child("span"), r.path("span"));
  r.required("topic", c.topic);
  c.truth = parse_enum<VerificationLabel>(r.required_child("truth"), r.path("truth"), parse_verification);
  r.required("knowledge", c.knowledge);
  r.finish();
  return c;
}

json to_json(const world::Completion& c) {
  json claims = json::array(), inserted = json::array();
  for (const auto& cl : c.claims) claims.push_back(to_json(cl));
  for (const auto& s : c.inserted) inserted.push_back(to_json(s));
  return {{"id", c.id},
          {"prompt_seed", c.prompt_seed},
          {"tokens", c.tokens},
          {"claims", claims},
          {"inserted", inserted},
          {"world_fingerprint", c.world_fingerprint}};
}

world::Completion completion_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  world::Completion c;
  r.required("id", c.id);
  r.required("prompt_seed", c.prompt_seed);
  r.required("tokens", c.tokens);
  r.required("world_fingerprint", c.world_fingerprint);
  const json& claims = r.required_child("claims");
  const json& inserted = r.required_child("inserted");
  r.finish();
  if (!claims.is_array() || !inserted.is_array()) throw DataError(path + ": claims and inserted must be arrays");
  for (std::size_t i = 0; i < claims.size(); ++i) {
    c.claims.push_back(claim_from_json(claims[i], path + ".claims[" + std::to_string(i) + "]"));
  }
  for (std::size_t i = 0; i < inserted.size(); ++i) {
    c.inserted.push_back(span_from_json(inserted[i], path + ".inserted[" + std::to_string(i) + "]"));
  }
  for (std::size_t i = 0; i < c.claims.size(); ++i) {
    if (c.claims[i].span.end > c.size()) throw DataError(path + ": claim beyond the token sequence");
    if (i > 0 && c.claims[i].span.start < c.claims[i - 1].span.end) throw DataError(path + ": claims overlap or are unsorted");
  }
  for (const auto& s : c.inserted) {
    if (s.end > c.size()) throw DataError(path + ": inserted block beyond the token sequence");
  }
  return c;
}

json to_json(const world::Intervention& iv) {
  return {{"id", iv.id},
          {"action", std::string(to_string(iv.action))},
          {"quality", iv.quality},
          {"outcome", std::string(to_string(iv.outcome))},
          {"legible", iv.legible},
          {"meta", iv.meta},
          {"on_script", iv.on_script},
          {"substantive", iv.substantive},
          {"strict_substantive", iv.strict_substantive},
          {"length_units", iv.length_units},
          {"tokens", iv.tokens}};
}

world::Intervention intervention_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  world::Intervention iv;
  r.required("id", iv.id);
  iv.action = parse_enum<Action>(r.required_child("action"), r.path("action"), parse_action);
  r.required("quality", iv.quality);
  iv.outcome = parse_enum<Outcome>(r.required_child("outcome"), r.path("outcome"), parse_outcome);
  r.required("legible", iv.legible);
  r.required("meta", iv.meta);
  r.required("on_script", iv.on_script);
  r.required("substantive", iv.substantive);
  r.required("strict_substantive", iv.strict_substantive);
  r.required("length_units", iv.length_units);
  r.required("tokens", iv.tokens);
  r.finish();
  if (!outcome_matches_action(iv.outcome, iv.action)) throw DataError(path + ": outcome does not match action");
  if (iv.quality < 0 || iv.quality >= static_cast<int>(world::kQualityLevels)) throw DataError(path + ": quality out of range");
  return iv;
}

json to_json(const world::GateRecord& g) {
  return {{"legible", g.legible},
          {"format_ok", g.format_ok},
          {"meta", g.meta},
          {"predicted_action", std::string(to_string(g.predicted_action))},
          {"substantive", g.substantive},
          {"strict_substantive", g.strict_substantive}};
}

json to_json(const infer::InferenceTranscript& t) {
  json flagged = json::array(), interventions = json::array();
  for (const auto& d : t.flagged) flagged.push_back({{"span", to_json(d.span)}, {"score", d.score}});
  for (const auto& rec : t.interventions) {
    json cands = json::array();
    for (const auto& c : rec.candidates) {
      cands.push_back({{"id", c.id}, {"action", std::string(to_string(c.action))}, {"quality", c.quality}, {"score", c.score}});
    }
    json ins = nullptr;
    if (rec.insertion) ins = {{"insertion_point", rec.insertion->insertion_point}, {"resume", rec.insertion->resume}};
    interventions.push_back({{"flagged_index", rec.flagged_index},
                             {"span", to_json(rec.span)},
                             {"target", to_json(rec.target)},
                             {"candidates", cands},
                             {"selected", rec.selected},
                             {"intervention", to_json(rec.intervention)},
                             {"inlined", rec.inlined},
                             {"insertion", ins}});
  }
  return {{"prompt_seed", t.prompt_seed},
          {"termination", std::string(to_string(t.termination))},
          {"completion", to_json(t.completion)},
          {"probe_starts", t.probe_starts},
          {"flagged", flagged},
          {"interventions", interventions}};
}

infer::InferenceTranscript transcript_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  infer::InferenceTranscript t;
  r.required("prompt_seed", t.prompt_seed);
  t.termination = parse_enum<infer::Termination>(r.required_child("termination"), r.path("termination"),
                                                 infer::parse_termination);
  t.completion = completion_from_json(r.required_child("completion"), r.path("completion"));
  r.required("probe_starts", t.probe_starts);
  const json& flagged = r.required_child("flagged");
  const json& interventions = r.required_child("interventions");
  r.finish();
  if (!flagged.is_array() || !interventions.is_array()) throw DataError(path + ": flagged and interventions must be arrays");
  for (std::size_t i = 0; i < flagged.size(); ++i) {
    const std::string p = path + ".flagged[" + std::to_string(i) + "]";
    Reader fr(flagged[i], p);
    probes::Detection d;
    d.span = span_from_json(fr.required_child("span"), fr.path("span"));
    fr.required("score", d.score);
    fr.finish();
    if (d.span.end > t.completion.size()) throw DataError(p + ": span beyond the completion");
    if (!t.flagged.empty() && d.span.start < t.flagged.back().span.start) throw DataError(p + ": flagged spans out of order");
    t.flagged.push_back(d);
  }
  for (std::size_t i = 0; i < interventions.size(); ++i) {
    const std::string p = path + ".interventions[" + std::to_string(i) + "]";
    Reader ir(interventions[i], p);
    infer::InterventionRecord rec;
    ir.required("flagged_index", rec.flagged_index);
    rec.span = span_from_json(ir.required_child("span"), ir.path("span"));
    rec.target = claim_from_json(ir.required_child("target"), ir.path("target"));
    const json& cands = ir.required_child("candidates");
    ir.required("selected", rec.selected);
    rec.intervention = intervention_from_json(ir.required_child("intervention"), ir.path("intervention"));
    ir.required("inlined", rec.inlined);
    const json& ins = ir.required_child("insertion");
    ir.finish();
    if (!cands.is_array()) throw DataError(p + ".candidates: expected an array");
    for (std::size_t k = 0; k < cands.size(); ++k) {
      const std::string cp = p + ".candidates[" + std::to_string(k) + "]";
      Reader cr(cands[k], cp);
      infer::CandidateRecord c;
      cr.required("id", c.id);
      c.action = parse_enum<Action>(cr.required_child("action"), cr.path("action"), parse_action);
      cr.required("quality", c.quality);
      cr.required("score", c.score);
      cr.finish();
      rec.candidates.push_back(c);
    }
    if (!ins.is_null()) {
      Reader nr(ins, p + ".insertion");
      infer::InlineResult res;
      nr.required("insertion_point", res.insertion_point);
      nr.required("resume", res.resume);
      nr.finish();
      rec.insertion = res;
    }
    if (rec.flagged_index >= t.flagged.size()) throw DataError(p + ": flagged_index out of range");
    if (rec.selected >= rec.candidates.size()) throw DataError(p + ": selected candidate out of range");
    if (rec.inlined != rec.insertion.has_value()) throw DataError(p + ": inlined flag disagrees with insertion");
    t.interventions.push_back(std::move(rec));
  }
  return t;
}

json to_json(const rl::StepRecord& s) {
  return {{"step", s.step},
          {"mean_reward", s.mean_reward},
          {"retraction_rate", optional_json(s.retraction_rate)},
          {"lambda", s.lambda},
          {"action_mix", {{"Maintain", s.action_mix[0]}, {"Correct", s.action_mix[1]}, {"Retract", s.action_mix[2]}}},
          {"oracle_fixed_rate", s.oracle_fixed_rate},
          {"oracle_correct_retract_rate", s.oracle_correct_retract_rate},
          {"oracle_success_rate", s.oracle_success_rate},
          {"ns_targets", s.ns_targets},
          {"kept_groups", s.kept_groups},
          {"updated", s.updated},
          {"loss", s.update.loss},
          {"kl", s.update.kl},
          {"mean_ratio", s.update.mean_ratio},
          {"clipped_fraction", s.update.clipped_fraction},
          {"reference_reset", s.update.reference_reset}};
}

json to_json(const probes::EpochRecord& e) { return {{"epoch", e.epoch}, {"loss", e.loss}, {"lr_end", e.lr_end}}; }

json to_json(const probes::Calibration& c) {
  json bins = json::array();
  for (const auto& b : c.bins) {
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count},
                    {"mean_prediction", b.mean_prediction}, {"empirical_rate", b.empirical_rate}});
  }
  return {{"ece", c.ece}, {"bins", bins}};
}

namespace {

json counts_json(const eval::Counts& c) {
  return {{"sequences", c.sequences},     {"detections", c.detections},
          {"true_positives", c.true_positives}, {"ground_truth", c.ground_truth},
          {"caught", c.caught},           {"fixed", c.fixed},
          {"correct_retract", c.correct_retract}, {"stable", c.stable}};
}

}  // namespace

eval::Counts counts_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  eval::Counts c;
  r.required("sequences", c.sequences);
  r.required("detections", c.detections);
  r.required("true_positives", c.true_positives);
  r.required("ground_truth", c.ground_truth);
  r.required("caught", c.caught);
  r.required("fixed", c.fixed);
  r.required("correct_retract", c.correct_retract);
  r.required("stable", c.stable);
  r.finish();
  if (c.true_positives > c.detections || c.caught > c.ground_truth) throw DataError(path + ": inconsistent counts");
  return c;
}

json to_json(const eval::MetricsReport& r) {
  return {{"counts", counts_json(r.counts)},
          {"n_seq", r.counts.sequences},
          {"precision", optional_json(r.precision)},
          {"recall", optional_json(r.recall)},
          {"caught_per_seq", r.caught_per_seq},
          {"hallucinations_per_seq", r.hallucinations_per_seq},
          {"false_positives_per_seq", r.false_positives_per_seq},
          {"fixed_rate", optional_json(r.fixed_rate)},
          {"correct_retract_rate", optional_json(r.correct_retract_rate)},
          {"stable_rate", optional_json(r.stable_rate)}};
}

json to_json(const eval::DerivedMetrics& d) {
  return {{"overall_reduction", optional_json(d.overall)},
          {"policy_reduction", optional_json(d.policy)},
          {"in_context_reduction", optional_json(d.in_context)},
          {"direct_reduction", optional_json(d.direct)}};
}

json to_json(const eval::SequenceEval& s) {
  json dets = json::array(), gts = json::array(), p = json::array(), g = json::array(), graded = json::array();
  for (const auto& d : s.detections) dets.push_back(to_json(d));
  for (const auto& d : s.ground_truth) gts.push_back(to_json(d));
  for (const auto& f : s.match.p) p.push_back({{"correct", f.correct}, {"provenance", std::string(eval::to_string(f.provenance))}});
  for (const auto& f : s.match.g) g.push_back({{"correct", f.correct}, {"provenance", std::string(eval::to_string(f.provenance))}});
  for (const auto& gi : s.graded) {
    graded.push_back({{"detection", gi.detection},
                      {"action", std::string(to_string(gi.action))},
                      {"label", std::string(to_string(gi.label))},
                      {"original_label", gi.original ? json(std::string(to_string(*gi.original))) : json(nullptr)}});
  }
  return {{"prompt_seed", s.prompt_seed}, {"detections", dets}, {"ground_truth", gts},
          {"p_correct", p},               {"g_correct", g},     {"graded", graded}};
}

std::string metrics_csv(const std::vector<std::pair<std::string, eval::MetricsReport>>& rows,
                        const std::vector<std::pair<std::string, eval::DerivedMetrics>>& derived) {
  std::ostringstream os;
  auto num = [&](std::optional<double> v) {
    if (v) os << json(*v).dump();
  };
  os << "configuration,n_seq,precision,recall,caught_per_seq,hallucinations_per_seq,false_positives_per_seq,"
        "fixed_rate,correct_retract_rate,stable_rate\n";
  for (const auto& [name, r] : rows) {
    os << name << ',' << r.counts.sequences << ',';
    num(r.precision);
    os << ',';
    num(r.recall);
    os << ',';
    num(r.caught_per_seq);
    os << ',';
    num(r.hallucinations_per_seq);
    os << ',';
    num(r.false_positives_per_seq);
    os << ',';
    num(r.fixed_rate);
    os << ',';
    num(r.correct_retract_rate);
    os << ',';
    num(r.stable_rate);
    os << '\n';
  }
  if (!derived.empty()) {
    os << "\nstrategy,overall_reduction,policy_reduction,in_context_reduction,direct_reduction\n";
    for (const auto& [name, d] : derived) {
      os << name << ',';
      num(d.overall);
      os << ',';
      num(d.policy);
      os << ',';
      num(d.in_context);
      os << ',';
      num(d.direct);
      os << '\n';
    }
  }
  return os.str();
}

// ---- files ------------------------------------------------------------------

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

json read_json(const fs::path& p) {
  const std::string text = read_text(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw DataError(p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string jsonl(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

RunConfig load_config(const fs::path& p) {
  json j;
  try {
    j = json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j);
}

// ---- weights container ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'L', 'F', 'R', 'P', 'R', 'B', '1'};

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Cursor {
 public:
  explicit Cursor(std::string_view b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    const auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw DataError("weights: truncated file");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& WeightsFile::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw DataError("weights: missing tensor '" + name + "'");
}

std::string encode_weights(const WeightsFile& f) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kWeightsVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.kind));
  const std::string header = f.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.tensors.size()));
  for (const auto& t : f.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.values.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.values.cols()));
    for (Eigen::Index i = 0; i < t.values.size(); ++i) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(t.values.data()[i]));
  }
  return out;
}

WeightsFile decode_weights(std::string_view bytes) {
  Cursor c(bytes);
  if (c.bytes(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw DataError("weights: bad magic");
  const auto version = c.get<std::uint32_t>();
  if (version != kWeightsVersion) throw DataError("weights: unsupported version " + std::to_string(version));
  WeightsFile f;
  const auto kind = c.get<std::uint32_t>();
  if (kind < 1 || kind > 3) throw DataError("weights: unknown kind " + std::to_string(kind));
  f.kind = static_cast<WeightsKind>(kind);
  const auto header_len = c.get<std::uint64_t>();
  try {
    f.header = json::parse(c.bytes(static_cast<std::size_t>(header_len)));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("weights: bad header: ") + e.what());
  }
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = std::string(c.bytes(c.get<std::uint32_t>()));
    const auto rows = c.get<std::uint64_t>(), cols = c.get<std::uint64_t>();
    if (rows > (1ULL << 32) || cols > (1ULL << 32) || rows * cols > bytes.size() / 8) throw DataError("weights: tensor too large");
    t.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < t.values.size(); ++k) t.values.data()[k] = std::bit_cast<double>(c.get<std::uint64_t>());
    f.tensors.push_back(std::move(t));
  }
  if (!c.done()) throw DataError("weights: trailing bytes");
  return f;
}

namespace {

void add_params(WeightsFile& f, const std::string& prefix, std::vector<probes::ParamView> views) {
  for (const auto& v : views) {
    Tensor t{prefix + "/" + v.name, kernel::Matrix(static_cast<Eigen::Index>(v.rows), static_cast<Eigen::Index>(v.cols))};
    std::copy(v.values.begin(), v.values.end(), t.values.data());
    f.tensors.push_back(std::move(t));
  }
}

void load_params(const WeightsFile& f, const std::string& prefix, std::vector<probes::ParamView> views) {
  for (auto& v : views) {
    const auto& t = f.tensor(prefix + "/" + v.name);
    if (static_cast<std::size_t>(t.values.rows()) != v.rows || static_cast<std::size_t>(t.values.cols()) != v.cols) {
      throw DataError("weights: shape mismatch for " + t.name);
    }
    std::copy(t.values.data(), t.values.data() + t.values.size(), v.values.begin());
  }
}

void check_kind(const WeightsFile& f, WeightsKind kind, std::uint64_t world_fingerprint) {
  if (f.kind != kind) throw DataError("weights: unexpected file kind");
  if (!f.header.contains("world_fingerprint") || !f.header["world_fingerprint"].is_number_unsigned()) {
    throw DataError("weights: header lacks world_fingerprint");
  }
  if (f.header["world_fingerprint"].get<std::uint64_t>() != world_fingerprint) {
    throw CheckFailure("weights: file was produced for a different world (fingerprint mismatch)");
  }
}

}  // namespace

WeightsFile probe_set_file(const probes::ProbeSet& set, std::uint64_t world_fingerprint) {
  auto copy = set;
  WeightsFile f;
  f.kind = WeightsKind::ProbeSet;
  f.header = {{"world_fingerprint", world_fingerprint},
              {"localization", rlfr::to_json(copy.localization.config)},
              {"classification", rlfr::to_json(copy.classification.config)},
              {"correction", rlfr::to_json(copy.correction.config)},
              {"retraction", rlfr::to_json(copy.retraction.config)}};
  add_params(f, "localization", copy.localization.params());
  add_params(f, "classification", copy.classification.params());
  add_params(f, "correction", copy.correction.params());
  add_params(f, "retraction", copy.retraction.params());
  return f;
}

probes::ProbeSet probe_set_from_file(const WeightsFile& f, std::uint64_t world_fingerprint) {
  check_kind(f, WeightsKind::ProbeSet, world_fingerprint);
  probes::ProbeSet set;
  try {
    set.localization = probes::TransformerProbeWeights::zeros(
        transformer_config_from_json(f.header.at("localization"), "weights.localization"));
    set.classification = probes::AttentionProbeWeights::zeros(
        attention_config_from_json(f.header.at("classification"), "weights.classification"));
    set.correction = probes::AttentionProbeWeights::zeros(
        attention_config_from_json(f.header.at("correction"), "weights.correction"));
    set.retraction = probes::AttentionProbeWeights::zeros(
        attention_config_from_json(f.header.at("retraction"), "weights.retraction"));
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  } catch (const json::exception& e) {
    throw DataError(std::string("weights: ") + e.what());
  }
  load_params(f, "localization", set.localization.params());
  load_params(f, "classification", set.classification.params());
  load_params(f, "correction", set.correction.params());
  load_params(f, "retraction", set.retraction.params());
  return set;
}

WeightsFile policy_file(const rl::PolicyParams& p, std::uint64_t world_fingerprint) {
  WeightsFile f;
  f.kind = WeightsKind::Policy;
  f.header = {{"world_fingerprint", world_fingerprint}, {"buckets", p.buckets()}, {"quality_levels", p.quality_logits.cols()}};
  f.tensors.push_back({"action_logits", p.action_logits});
  f.tensors.push_back({"quality_logits", p.quality_logits});
  return f;
}

rl::PolicyParams policy_from_file(const WeightsFile& f, std::uint64_t world_fingerprint) {
  check_kind(f, WeightsKind::Policy, world_fingerprint);
  rl::PolicyParams p;
  p.action_logits = f.tensor("action_logits").values;
  p.quality_logits = f.tensor("quality_logits").values;
  try {
    p.validate();
  } catch (const std::exception& e) {
    throw DataError(std::string("policy: ") + e.what());
  }
  return p;
}

WeightsFile activations_file(std::span<const world::Completion> completions,
                             std::span<const world::ActivationSheet> sheets, std::uint64_t world_fingerprint) {
  if (completions.size() != sheets.size()) throw std::invalid_argument("activations_file: one sheet per completion");
  WeightsFile f;
  f.kind = WeightsKind::Activations;
  json ids = json::array();
  for (std::size_t i = 0; i < completions.size(); ++i) {
    ids.push_back(completions[i].id);
    for (std::size_t l = 0; l < sheets[i].layers.size(); ++l) {
      f.tensors.push_back({std::to_string(completions[i].id) + "/" + std::to_string(sheets[i].layer_ids[l]),
                           sheets[i].layers[l]});
    }
  }
  json layers = sheets.empty() ? json::array() : json(sheets.front().layer_ids);
  f.header = {{"world_fingerprint", world_fingerprint}, {"completions", ids}, {"layer_ids", layers}};
  return f;
}

std::vector<world::ActivationSheet> activations_from_file(const WeightsFile& f, std::uint64_t world_fingerprint) {
  check_kind(f, WeightsKind::Activations, world_fingerprint);
  std::vector<std::uint64_t> ids;
  std::vector<int> layers;
  try {
    ids = f.header.at("completions").get<std::vector<std::uint64_t>>();
    layers = f.header.at("layer_ids").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("activations header: ") + e.what());
  }
  std::vector<world::ActivationSheet> out;
  for (auto id : ids) {
    world::ActivationSheet s;
    s.layer_ids = layers;
    for (int l : layers) s.layers.push_back(f.tensor(std::to_string(id) + "/" + std::to_string(l)).values);
    out.push_back(std::move(s));
  }
  return out;
}

// ---- manifest -----------------------------------------------------------------

json component_versions() {
  return {{"rlfr", "1.0.0"}, {"weights_format", kWeightsVersion}, {"record_schema", 1}};
}

json to_json(const RunManifest& m) {
  json inputs = json::array(), outputs = json::array();
  for (const auto& [p, h] : m.inputs) inputs.push_back({{"path", p}, {"fnv1a", h}});
  for (const auto& o : m.outputs) outputs.push_back({{"path", o.path}, {"fnv1a", o.fnv1a}, {"bytes", o.bytes}});
  return {{"command", m.command}, {"config_hash", m.config_hash}, {"seed", m.seed},
          {"config", m.config},   {"versions", m.versions},       {"inputs", inputs},
          {"outputs", outputs},   {"started", m.started},         {"finished", m.finished}};
}

RunManifest manifest_from_json(const json& j) {
  Reader r(j, "manifest");
  RunManifest m;
  r.required("command", m.command);
  r.required("config_hash", m.config_hash);
  r.required("seed", m.seed);
  m.config = r.required_child("config");
  m.versions = r.required_child("versions");
  const json& inputs = r.required_child("inputs");
  const json& outputs = r.required_child("outputs");
  r.required("started", m.started);
  r.required("finished", m.finished);
  r.finish();
  for (const auto& in : inputs) {
    Reader ir(in, "manifest.inputs");
    std::string p, h;
    ir.required("path", p);
    ir.required("fnv1a", h);
    ir.finish();
    m.inputs.emplace_back(p, h);
  }
  for (const auto& out : outputs) {
    Reader orr(out, "manifest.outputs");
    OutputRecord o;
    orr.required("path", o.path);
    orr.required("fnv1a", o.fnv1a);
    orr.required("bytes", o.bytes);
    orr.finish();
    m.outputs.push_back(o);
  }
  return m;
}

std::vector<std::string> verify_manifest(const RunManifest& m, const fs::path& dir) {
  std::vector<std::string> problems;
  if (hex64(fnv1a(canonical_text(m.config))) != m.config_hash) problems.push_back("config hash mismatch");
  for (const auto& o : m.outputs) {
    std::string text;
    try {
      text = read_text(dir / o.path);
    } catch (const DataError&) {
      problems.push_back("missing output " + o.path);
      continue;
    }
    if (hex64(fnv1a(text)) != o.fnv1a || text.size() != o.bytes) problems.push_back("digest mismatch for " + o.path);
  }
  return problems;
}

}  // namespace rlfr::io
