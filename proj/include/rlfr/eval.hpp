#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlfr/infer.hpp"
#include "rlfr/kernel.hpp"
#include "rlfr/labels.hpp"
#include "rlfr/span.hpp"
#include "rlfr/world.hpp"

// Ground-truth evaluation of detections and interventions.
namespace rlfr::eval {

using kernel::Matrix;
using kernel::Vector;

// ---- matching ---------------------------------------------------------------

enum class Provenance : std::uint8_t { NoOverlap, Contained, Adjudicated, Verified };
std::string_view to_string(Provenance p);
std::optional<Provenance> parse_provenance(std::string_view s);

struct Flag {
  bool correct = false;
  Provenance provenance = Provenance::NoOverlap;
  friend bool operator==(const Flag&, const Flag&) = default;
};

struct MatchResult {
  std::vector<Flag> p;  // per detection: p_correct
  std::vector<Flag> g;  // per ground-truth hallucination: g_correct

  std::size_t true_positives() const;
  std::size_t caught() const;
  friend bool operator==(const MatchResult&, const MatchResult&) = default;
};

using Verifier = std::function<VerificationLabel(const Span&)>;

// Significant overlap: more than half of either span is shared.
bool significant_overlap(const Span& a, const Span& b);

// Three-phase matching. Adjudication marks g (resp. p) correct iff some
// significantly overlapping counterpart covers at least half of its tokens;
// detections with no counterpart are verified directly.
MatchResult match(std::span<const Span> detections, std::span<const Span> ground_truth, const Verifier& verifier);

// ---- per-sequence evaluation ------------------------------------------------

struct GradedIntervention {
  std::size_t detection = 0;
  Action action = Action::Maintain;
  RewardLabel label = RewardLabel::Stable;
  std::optional<RewardLabel> original;  // set when a Retracted correction was regraded
};

struct SequenceEval {
  std::uint64_t prompt_seed = 0;
  std::vector<Span> detections;
  std::vector<Span> ground_truth;
  MatchResult match;
  std::vector<GradedIntervention> graded;
};

// Grades an intervention against the detection's p_correct flag, then
// replaces a Retracted label with the retraction-rubric regrade.
GradedIntervention grade_intervention(const world::Intervention& iv, std::size_t detection, bool p_correct);

SequenceEval evaluate_transcript(const infer::InferenceTranscript& tr);

// ---- metrics ----------------------------------------------------------------

struct Counts {
  std::size_t sequences = 0;
  std::size_t detections = 0;
  std::size_t true_positives = 0;
  std::size_t ground_truth = 0;
  std::size_t caught = 0;
  std::size_t fixed = 0;
  std::size_t correct_retract = 0;
  std::size_t stable = 0;

  std::size_t false_positives() const { return detections - true_positives; }
  void add(const MatchResult& m);
  void add(std::span<const GradedIntervention> graded);
  void add(const SequenceEval& s);
  friend bool operator==(const Counts&, const Counts&) = default;
};

struct MetricsReport {
  Counts counts;
  std::optional<double> precision, recall;
  double caught_per_seq = 0.0;         // C_M
  double hallucinations_per_seq = 0.0;  // G+_M
  double false_positives_per_seq = 0.0; // FP_M
  std::optional<double> fixed_rate, correct_retract_rate, stable_rate;  // F_M, CR_M, S_M
};

// Fills the detection fields. Throws std::invalid_argument when N_seq is 0.
MetricsReport detection_metrics(const Counts& c);
// Detection metrics from match results over `sequences` prompts.
MetricsReport detection_metrics(std::span<const MatchResult> matches, std::size_t sequences);

struct RewardRates {
  std::optional<double> fixed_rate, correct_retract_rate, stable_rate;
};
RewardRates reward_metrics(std::span<const GradedIntervention> graded, const MatchResult& m);
RewardRates reward_metrics(const Counts& c);

MetricsReport metrics_report(const Counts& c);
MetricsReport metrics_report(std::span<const SequenceEval> seqs);

struct DerivedMetrics {
  std::optional<double> overall, policy, in_context, direct;
};

// Reductions of `rlfr_int` relative to `base`. A rate multiplied by a zero
// per-sequence count contributes zero; any other undefined component makes
// the dependent outputs undefined.
DerivedMetrics derived_metrics(const MetricsReport& base, const MetricsReport& rlfr, const MetricsReport& rlfr_int);

// ---- KL stratification ------------------------------------------------------

struct KlSequence {
  Matrix p;  // positions x vocabulary, rows are distributions
  Matrix q;
  std::vector<std::pair<Span, VerificationLabel>> spans;
  std::string source;  // token source, e.g. which policy sampled the text
};

struct KlStratum {
  double mean = 0.0;
  double std = 0.0;
  std::size_t sequences = 0;  // sequences contributing a finite per-sequence mean
};

struct KlSourceReport {
  std::string source;
  KlStratum supported, not_supported;
  std::size_t infinite_tokens = 0;  // excluded from the means
};

// KL(p || q) with 0 log 0 = 0; +inf when q(v) = 0 < p(v).
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Per-token KL averaged within Supported and NotSupported span tokens of each
// sequence, then mean and population std across sequences, per source.
std::vector<KlSourceReport> kl_stratified(std::span<const KlSequence> seqs);

// Token distributions softmax(W h_t) read from a layer, and a copy tilted by
// `eta` along a fixed random logit direction on NotSupported claim tokens only.
KlSequence tilted_policy_pair(const world::World& w, const world::Completion& c, const world::ActivationSheet& sheet,
                              int layer_id, std::size_t vocab, double eta, std::uint64_t seed);

// ---- dendrogram ---------------------------------------------------------------

struct Merge {
  std::size_t left = 0, right = 0;  // ids < leaves are tokens; leaves + i is merge i
  double height = 0.0;              // average cosine distance between the joined clusters
  std::size_t size = 0;
};

struct Dendrogram {
  std::size_t leaves = 0;
  std::size_t components = 0;
  double energy_fraction = 0.0;
  std::vector<Merge> merges;

  // Flat cluster labels 0..k-1 (ordered by first token) after undoing the last k-1 merges.
  std::vector<int> cut(std::size_t k) const;
  // Nested lists: a token is its index, a merge is [left, right, height].
  std::string to_text() const;
};

struct PcaResult {
  Matrix projected;  // tokens x components
  std::size_t components = 0;
  double energy_fraction = 0.0;
};

// Top principal components of the centred rows; rank-deficient input keeps
// only the components with nonzero variance.
PcaResult pca(const Matrix& x, std::size_t components);

// Cosine similarity with cos(0, 0) = 1 and cos(0, x) = 0.
double cosine_similarity(const Vector& a, const Vector& b);

// Average-linkage clustering on cosine distance; the lowest-index pair wins ties.
Dendrogram cluster(const Matrix& points);

// PCA to `components`, then cluster. Requires at least 6 rows.
Dendrogram dendrogram(const Matrix& x, std::size_t components = 5);
Dendrogram dendrogram(const world::ActivationSheet& sheet, int layer_id, std::size_t components = 5);

double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

struct PlantedClusters {
  Matrix points;
  std::vector<int> labels;
};

// `clusters` centres inside a random `rank`-dimensional subspace, points
// spread along that subspace plus isotropic noise of scale `sigma`.
PlantedClusters planted_clusters(std::size_t clusters, std::size_t per_cluster, std::size_t dim, std::size_t rank,
                                 double sigma, std::uint64_t seed);

}  // namespace rlfr::eval
