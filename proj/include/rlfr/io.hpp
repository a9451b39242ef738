#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlfr/config.hpp"
#include "rlfr/eval.hpp"
#include "rlfr/infer.hpp"
#include "rlfr/models.hpp"
#include "rlfr/rl.hpp"

// Record schemas, the weights container, and run manifests.
namespace rlfr::io {

namespace fs = std::filesystem;

// ---- records ----------------------------------------------------------------
// Readers validate strictly: unknown keys, unknown enum names and missing
// fields raise DataError.

json to_json(const Span& s);
json to_json(const world::Claim& c);
json to_json(const world::Completion& c);
json to_json(const world::Intervention& iv);
json to_json(const world::GateRecord& g);
json to_json(const infer::InferenceTranscript& t);
json to_json(const rl::StepRecord& s);
json to_json(const probes::EpochRecord& e);
json to_json(const eval::MetricsReport& r);
json to_json(const eval::DerivedMetrics& d);
json to_json(const eval::SequenceEval& s);
json to_json(const probes::Calibration& c);

Span span_from_json(const json& j, const std::string& path);
world::Claim claim_from_json(const json& j, const std::string& path);
world::Completion completion_from_json(const json& j, const std::string& path);
world::Intervention intervention_from_json(const json& j, const std::string& path);
infer::InferenceTranscript transcript_from_json(const json& j, const std::string& path);
eval::Counts counts_from_json(const json& j, const std::string& path);

// One CSV row per named report, undefined values left empty.
std::string metrics_csv(const std::vector<std::pair<std::string, eval::MetricsReport>>& rows,
                        const std::vector<std::pair<std::string, eval::DerivedMetrics>>& derived = {});

// ---- files ------------------------------------------------------------------

std::string read_text(const fs::path& p);  // DataError if missing
// Writes through a temporary and renames into place.
void write_text(const fs::path& p, const std::string& text);
json read_json(const fs::path& p);
std::vector<json> read_jsonl(const fs::path& p);
std::string jsonl(const std::vector<json>& records);

RunConfig load_config(const fs::path& p);  // ConfigError on schema problems

// ---- weights container ----------------------------------------------------------
// Little-endian layout:
//   magic "RLFRPRB1" | u32 version | u32 kind | u64 header length | header JSON
//   | u32 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols,
//   rows*cols f64 in row-major order.

enum class WeightsKind : std::uint32_t { ProbeSet = 1, Policy = 2, Activations = 3 };
inline constexpr std::uint32_t kWeightsVersion = 1;

struct Tensor {
  std::string name;
  kernel::Matrix values;
};

struct WeightsFile {
  WeightsKind kind = WeightsKind::ProbeSet;
  json header = json::object();
  std::vector<Tensor> tensors;

  const Tensor& tensor(const std::string& name) const;
};

std::string encode_weights(const WeightsFile& f);
WeightsFile decode_weights(std::string_view bytes);  // DataError on malformed input

WeightsFile probe_set_file(const probes::ProbeSet& set, std::uint64_t world_fingerprint);
// CheckFailure if the file was trained on a different world.
probes::ProbeSet probe_set_from_file(const WeightsFile& f, std::uint64_t world_fingerprint);
WeightsFile policy_file(const rl::PolicyParams& p, std::uint64_t world_fingerprint);
rl::PolicyParams policy_from_file(const WeightsFile& f, std::uint64_t world_fingerprint);
// One tensor per (completion, layer), named "<completion id>/<layer id>".
WeightsFile activations_file(std::span<const world::Completion> completions,
                             std::span<const world::ActivationSheet> sheets, std::uint64_t world_fingerprint);
std::vector<world::ActivationSheet> activations_from_file(const WeightsFile& f, std::uint64_t world_fingerprint);

// ---- manifest -----------------------------------------------------------------

struct OutputRecord {
  std::string path;  // relative to the output directory
  std::string fnv1a;
  std::size_t bytes = 0;
};

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  json config;
  json versions;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, fnv1a
  std::vector<OutputRecord> outputs;
  std::string started, finished;  // UTC, ISO 8601
};

json to_json(const RunManifest& m);
RunManifest manifest_from_json(const json& j);
json component_versions();

// Checks the stored config against its hash and every output against its
// digest. Returns the list of problems (empty when consistent).
std::vector<std::string> verify_manifest(const RunManifest& m, const fs::path& dir);

}  // namespace rlfr::io
