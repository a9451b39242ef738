#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlfr/eval.hpp"

// Built-in verification suite run by `rlfr selfcheck`.
namespace rlfr::check {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

struct GradFidelity {
  std::size_t configurations = 0;
  double max_rel_error = 0.0;
  std::vector<std::string> failures;
};

// Central-difference checks of both probe architectures over randomized
// small configurations (half transformer, half attention).
GradFidelity probe_grad_fidelity(std::size_t configurations, std::uint64_t seed, double tol = 1e-4);

// Literal O(|P||G|) restatement of the matching rules.
eval::MatchResult match_reference(std::span<const Span> detections, std::span<const Span> ground_truth,
                                  const eval::Verifier& verifier);

struct RandomMatchCase {
  std::vector<Span> detections, ground_truth;
  std::vector<VerificationLabel> verdicts;  // per detection, used by the verifier
};
RandomMatchCase random_match_case(Rng& rng);
eval::Verifier case_verifier(const RandomMatchCase& c);

// Number of random configurations on which match() and the reference differ.
std::size_t match_mismatches(std::size_t cases, std::uint64_t seed);

std::vector<CheckResult> run_selfcheck(std::uint64_t seed);

}  // namespace rlfr::check
