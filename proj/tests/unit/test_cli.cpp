#include <filesystem>
#include <map>
#include <sstream>

#include "doctest.h"
#include "rlfr/cli.hpp"
#include "rlfr/io.hpp"

using namespace rlfr;
namespace fs = std::filesystem;

namespace {

const fs::path kData = RLFR_TEST_DATA_DIR;
const std::string kConfig = (kData / "small_config.json").string();

struct Result {
  int code = 0;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("rlfr-cli-" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

// Every command on the small config, outputs under `dir`.
void pipeline(const TempDir& d) {
  auto ok = [](std::vector<std::string> args) {
    const auto r = invoke(args);
    INFO(r.err);
    REQUIRE(r.code == cli::kOk);
  };
  ok({"gen", "--config", kConfig, "--out", d.path.string()});
  ok({"probe-train", "--config", kConfig, "--out", d.path.string()});
  ok({"probe-eval", "--config", kConfig, "--probes", d / "probes.bin", "--out", d / "pe"});
  ok({"rl-train", "--config", kConfig, "--probes", d / "probes.bin", "--out", d.path.string()});
  ok({"infer", "--config", kConfig, "--probes", d / "probes.bin", "--policy", d / "policy.bin", "--sampling",
      "best-of-n", "--n", "4", "--jobs", "2", "--out", d / "inf"});
  ok({"eval", "--config", kConfig, "--transcripts", d / "inf/transcripts.jsonl", "--out", d / "ev"});
  ok({"analyze", "--config", kConfig, "--out", d / "an"});
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).string();
    auto text = io::read_text(e.path());
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

}  // namespace

TEST_CASE("usage errors map to the config exit code") {
  CHECK(invoke({}).code == cli::kConfigError);
  CHECK(invoke({"frobnicate"}).code == cli::kConfigError);
  CHECK(invoke({"gen", "--bogus"}).code == cli::kConfigError);
  CHECK(invoke({"infer", "--config", kConfig}).code == cli::kConfigError);  // --probes is required
  CHECK(invoke({"gen", "--format", "xml"}).code == cli::kConfigError);
  CHECK(invoke({"--help"}).code == cli::kOk);
}

TEST_CASE("configuration, data and check failures") {
  TempDir d("errors");
  io::write_text(d / "typo.json", R"({"sed": 3})");
  CHECK(invoke({"gen", "--config", d / "typo.json", "--out", d.path.string()}).code == cli::kConfigError);
  io::write_text(d / "range.json", R"({"infer": {"loop": {"threshold": 2.0}}})");
  CHECK(invoke({"gen", "--config", d / "range.json", "--out", d.path.string()}).code == cli::kConfigError);
  CHECK(invoke({"gen", "--config", d / "absent.json", "--out", d.path.string()}).code == cli::kConfigError);

  CHECK(invoke({"probe-eval", "--config", kConfig, "--probes", d / "absent.bin", "--out", d.path.string()}).code ==
        cli::kDataError);
  io::write_text(d / "junk.bin", "not a weights file");
  CHECK(invoke({"probe-eval", "--config", kConfig, "--probes", d / "junk.bin", "--out", d.path.string()}).code ==
        cli::kDataError);
  io::write_text(d / "junk.jsonl", "{\"prompt_seed\": 1}\n");
  CHECK(invoke({"eval", "--config", kConfig, "--transcripts", d / "junk.jsonl", "--out", d.path.string()}).code ==
        cli::kDataError);

  // Transcripts generated in a different world.
  io::write_text(d / "other.json", R"({"world": {"truth_rate": 0.3}})");
  const auto other = (kData / "golden_run.jsonl").string();
  const auto mismatch = invoke({"eval", "--config", d / "other.json", "--transcripts", other, "--out", d.path.string()});
  CHECK(mismatch.code == cli::kCheckFailure);
  CHECK(mismatch.err.find("different world") != std::string::npos);
}

TEST_CASE("selfcheck and manifest verification") {
  TempDir d("verify");
  const auto sc = invoke({"selfcheck", "--out", d.path.string()});
  CHECK(sc.code == cli::kOk);
  CHECK(fs::exists(d.path / "selfcheck.json"));
  CHECK(invoke({"verify", d / "selfcheck.manifest.json"}).code == cli::kOk);

  io::write_text(d / "selfcheck.json", io::read_text(d / "selfcheck.json") + " ");
  const auto bad = invoke({"verify", d / "selfcheck.manifest.json"});
  CHECK(bad.code == cli::kCheckFailure);
  CHECK(bad.err.find("selfcheck.json") != std::string::npos);
  CHECK(invoke({"verify", d / "absent.manifest.json"}).code == cli::kDataError);
}

TEST_CASE("eval reproduces the golden fixture") {
  TempDir d("golden");
  const auto r = invoke({"eval", "--config", kConfig, "--transcripts", (kData / "golden_run.jsonl").string(), "--base",
                      (kData / "golden_base.jsonl").string(), "--rlfr", (kData / "golden_rlfr.jsonl").string(),
                      "--out", d.path.string()});
  INFO(r.err);
  REQUIRE(r.code == cli::kOk);
  const auto got = io::read_json(d.path / "metrics.json");
  const auto want = io::read_json(kData / "golden_metrics.json");
  CHECK(got == want);
  CHECK(invoke({"verify", d / "eval.manifest.json"}).code == cli::kOk);
  // The two-sided options travel together.
  CHECK(invoke({"eval", "--config", kConfig, "--transcripts", (kData / "golden_run.jsonl").string(), "--base",
             (kData / "golden_base.jsonl").string(), "--out", d.path.string()})
            .code == cli::kConfigError);
}

TEST_CASE("the full pipeline is byte-for-byte reproducible") {
  TempDir a("repro-a"), b("repro-b");
  pipeline(a);
  pipeline(b);
  const auto sa = snapshot(a.path), sb = snapshot(b.path);
  for (const char* f : {"completions.jsonl", "activations.bin", "probes.bin", "probe_history.jsonl", "policy.bin",
                        "rl_history.jsonl", "rl_summary.json", "pe/probe_eval.json", "inf/transcripts.jsonl",
                        "ev/metrics.json", "ev/metrics.csv", "ev/eval_log.jsonl", "an/kl.json", "an/dendrogram.txt",
                        "an/dendrogram.json", "gen.manifest.json", "inf/infer.manifest.json"}) {
    CHECK_MESSAGE(sa.count(f), f);
  }
  REQUIRE(sa.size() == sb.size());
  for (const auto& [name, text] : sa) {
    REQUIRE(sb.count(name));
    CHECK_MESSAGE(sb.at(name) == text, name);
  }
  for (const auto& [name, text] : sa) {
    if (!name.ends_with(".manifest.json")) continue;
    CHECK_MESSAGE(invoke({"verify", (a.path / name).string()}).code == cli::kOk, name);
  }

  // --seed changes seed-driven outputs but not the generated corpus.
  TempDir c("repro-c");
  REQUIRE(invoke({"gen", "--config", kConfig, "--seed", "9", "--out", c.path.string()}).code == cli::kOk);
  CHECK(io::read_text(c.path / "completions.jsonl") == sa.at("completions.jsonl"));
  REQUIRE(invoke({"analyze", "--config", kConfig, "--seed", "9", "--out", c.path.string()}).code == cli::kOk);
  CHECK(io::read_text(c.path / "kl.json") != sa.at("an/kl.json"));
}

TEST_CASE("table output") {
  TempDir d("table");
  const auto r = invoke({"selfcheck", "--format", "table", "--out", d.path.string()});
  CHECK(r.code == cli::kOk);
  CHECK(r.out.find('{') == std::string::npos);
  CHECK(r.out.find("command") != std::string::npos);
}
