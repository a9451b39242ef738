#pragma once

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "rlfr/infer.hpp"
#include "rlfr/models.hpp"
#include "rlfr/reward.hpp"
#include "rlfr/rl.hpp"
#include "rlfr/world.hpp"

namespace rlfr {

using json = nlohmann::json;

struct GenConfig {
  std::uint64_t first_seed = 10'000'000;
  std::size_t completions = 64;
};

struct RlRunConfig {
  rl::TrainerConfig trainer;
  reward::LagrangeState lagrange;
  bool base_init = true;  // start from the base action mix; uniform otherwise
  std::size_t eval_rounds = 4;
};

struct InferRunConfig {
  infer::InferenceConfig loop;
  std::uint64_t first_prompt = 20'000'000;
  std::size_t prompts = 400;
};

struct EvalRunConfig {
  probes::DatasetSpec held_out{30'000'000, 400};
  std::size_t kl_sequences = 64;
  double kl_eta = 1.0;
  std::size_t kl_vocab = 64;
  int analysis_layer = 20;
  std::size_t dendrogram_components = 5;
};

// Everything a command needs; one JSON document on disk.
struct RunConfig {
  std::uint64_t seed = 1;
  world::WorldParams world;
  probes::ProbeTrainingConfig probes = probes::ProbeTrainingConfig::desk(32);
  GenConfig gen;
  RlRunConfig rl;
  InferRunConfig infer;
  EvalRunConfig eval;

  void validate() const;
};

// Full serialization; every field is written.
json to_json(const RunConfig& c);
// Fields absent from `j` keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json(const json& j);

json to_json(const probes::TransformerProbeConfig& c);
json to_json(const probes::AttentionProbeConfig& c);
probes::TransformerProbeConfig transformer_config_from_json(const json& j, const std::string& path);
probes::AttentionProbeConfig attention_config_from_json(const json& j, const std::string& path);

// Canonical text (sorted keys, 2-space indent, trailing newline) and its
// 64-bit FNV-1a hash.
std::string canonical_text(const json& j);
std::uint64_t config_hash(const RunConfig& c);
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Strict reader for JSON objects: each key may be consumed once and any key
// left unread at finish() is an error of type E.
template <typename E>
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw E(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <typename T>
  bool optional(const char* key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return false;
    used_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw E(path_ + "." + key + ": wrong type");
    }
    return true;
  }

  template <typename T>
  void required(const char* key, T& out) {
    if (!optional(key, out)) throw E(path_ + "." + key + ": missing");
  }

  // Raw access to a child; marks it used.
  const json* child(const char* key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  const json& required_child(const char* key) {
    const json* c = child(key);
    if (!c) throw E(path_ + "." + key + ": missing");
    return *c;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw E(path_ + "." + k + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace rlfr
