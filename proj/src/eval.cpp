#include "rlfr/eval.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "rlfr/rng.hpp"

namespace rlfr::eval {

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::NoOverlap: return "no-overlap";
    case Provenance::Contained: return "contained";
    case Provenance::Adjudicated: return "adjudicated";
    case Provenance::Verified: return "verified";
  }
  return "?";
}

std::optional<Provenance> parse_provenance(std::string_view s) {
  for (auto p : {Provenance::NoOverlap, Provenance::Contained, Provenance::Adjudicated, Provenance::Verified}) {
    if (to_string(p) == s) return p;
  }
  return std::nullopt;
}

std::size_t MatchResult::true_positives() const {
  return static_cast<std::size_t>(std::count_if(p.begin(), p.end(), [](const Flag& f) { return f.correct; }));
}

std::size_t MatchResult::caught() const {
  return static_cast<std::size_t>(std::count_if(g.begin(), g.end(), [](const Flag& f) { return f.correct; }));
}

bool significant_overlap(const Span& a, const Span& b) { return overlap_fractions(a, b).max() > 0.5; }

namespace {

// Flag for `x` against the significantly overlapping members of `others`.
std::optional<Flag> flag_against(const Span& x, std::span<const Span> others) {
  bool any = false, covered = false;
  for (const auto& o : others) {
    if (!significant_overlap(x, o)) continue;
    any = true;
    if (contains(o, x)) return Flag{true, Provenance::Contained};
    if (2 * intersection_size(x, o) >= x.length()) covered = true;
  }
  if (!any) return std::nullopt;
  return Flag{covered, Provenance::Adjudicated};
}

}  // namespace

MatchResult match(std::span<const Span> detections, std::span<const Span> ground_truth, const Verifier& verifier) {
  MatchResult r;
  r.g.reserve(ground_truth.size());
  for (const auto& g : ground_truth) {
    r.g.push_back(flag_against(g, detections).value_or(Flag{false, Provenance::NoOverlap}));
  }
  r.p.reserve(detections.size());
  for (const auto& p : detections) {
    bool any = false, contained = false, covered = false;
    for (const auto& g : ground_truth) {
      if (!significant_overlap(p, g)) continue;
      any = true;
      if (contains(p, g)) contained = true;
      if (2 * intersection_size(p, g) >= p.length()) covered = true;
    }
    if (!any) {
      r.p.push_back({verifier(p) == VerificationLabel::NotSupported, Provenance::Verified});
    } else if (contained) {
      r.p.push_back({true, Provenance::Contained});
    } else {
      r.p.push_back({covered, Provenance::Adjudicated});
    }
  }
  return r;
}

GradedIntervention grade_intervention(const world::Intervention& iv, std::size_t detection, bool p_correct) {
  GradedIntervention g;
  g.detection = detection;
  g.action = iv.action;
  g.label = world::grade_with_truth(iv, p_correct ? VerificationLabel::NotSupported : VerificationLabel::Supported);
  if (g.label == RewardLabel::Retracted) {
    g.original = g.label;
    g.label = world::regrade_retracted(iv);
  }
  return g;
}

SequenceEval evaluate_transcript(const infer::InferenceTranscript& tr) {
  SequenceEval s;
  s.prompt_seed = tr.prompt_seed;
  const auto& c = tr.completion;
  for (const auto& d : tr.flagged) s.detections.push_back(d.span);
  for (const auto& cl : c.claims) {
    if (cl.truth == VerificationLabel::NotSupported) s.ground_truth.push_back(cl.span);
  }
  s.match = match(s.detections, s.ground_truth, [&](const Span& sp) { return world::oracle_verify_span(c, sp); });
  for (const auto& rec : tr.interventions) {
    if (rec.flagged_index >= s.detections.size()) throw std::invalid_argument("evaluate_transcript: dangling detection index");
    s.graded.push_back(grade_intervention(rec.intervention, rec.flagged_index, s.match.p[rec.flagged_index].correct));
  }
  return s;
}

// ---- metrics ----------------------------------------------------------------

void Counts::add(const MatchResult& m) {
  detections += m.p.size();
  true_positives += m.true_positives();
  ground_truth += m.g.size();
  caught += m.caught();
}

void Counts::add(std::span<const GradedIntervention> graded) {
  for (const auto& g : graded) {
    fixed += g.label == RewardLabel::Fixed;
    correct_retract += g.label == RewardLabel::CorrectRetract;
    stable += g.label == RewardLabel::Stable;
  }
}

void Counts::add(const SequenceEval& s) {
  ++sequences;
  add(s.match);
  add(s.graded);
}

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport detection_metrics(const Counts& c) {
  if (c.sequences == 0) throw std::invalid_argument("detection_metrics: N_seq must be positive");
  MetricsReport r;
  r.counts = c;
  const double n = static_cast<double>(c.sequences);
  r.precision = ratio(c.true_positives, c.detections);
  r.recall = ratio(c.caught, c.ground_truth);
  r.caught_per_seq = static_cast<double>(c.caught) / n;
  r.hallucinations_per_seq = static_cast<double>(c.ground_truth) / n;
  r.false_positives_per_seq = static_cast<double>(c.false_positives()) / n;
  return r;
}

MetricsReport detection_metrics(std::span<const MatchResult> matches, std::size_t sequences) {
  Counts c;
  c.sequences = sequences;
  for (const auto& m : matches) c.add(m);
  return detection_metrics(c);
}

RewardRates reward_metrics(const Counts& c) {
  return {ratio(c.fixed, c.true_positives), ratio(c.correct_retract, c.true_positives),
          ratio(c.stable, c.false_positives())};
}

RewardRates reward_metrics(std::span<const GradedIntervention> graded, const MatchResult& m) {
  for (const auto& g : graded) {
    if (g.detection >= m.p.size()) throw std::invalid_argument("reward_metrics: intervention without a detection");
  }
  Counts c;
  c.add(m);
  c.add(graded);
  return reward_metrics(c);
}

MetricsReport metrics_report(const Counts& c) {
  auto r = detection_metrics(c);
  const auto rates = reward_metrics(c);
  r.fixed_rate = rates.fixed_rate;
  r.correct_retract_rate = rates.correct_retract_rate;
  r.stable_rate = rates.stable_rate;
  return r;
}

MetricsReport metrics_report(std::span<const SequenceEval> seqs) {
  Counts c;
  for (const auto& s : seqs) c.add(s);
  return metrics_report(c);
}

DerivedMetrics derived_metrics(const MetricsReport& base, const MetricsReport& rlfr, const MetricsReport& rlfr_int) {
  DerivedMetrics d;
  const double g_base = base.hallucinations_per_seq;
  const double g_rlfr = rlfr.hallucinations_per_seq;
  const double g_int = rlfr_int.hallucinations_per_seq;

  std::optional<double> removed;  // C (F + CR)
  if (rlfr_int.caught_per_seq == 0.0) {
    removed = 0.0;
  } else if (rlfr_int.fixed_rate && rlfr_int.correct_retract_rate) {
    removed = rlfr_int.caught_per_seq * (*rlfr_int.fixed_rate + *rlfr_int.correct_retract_rate);
  }
  std::optional<double> introduced;  // FP (1 - S)
  if (rlfr_int.false_positives_per_seq == 0.0) {
    introduced = 0.0;
  } else if (rlfr_int.stable_rate) {
    introduced = rlfr_int.false_positives_per_seq * (1.0 - *rlfr_int.stable_rate);
  }

  if (!(g_base > 0.0)) return d;
  d.policy = 1.0 - g_rlfr / g_base;
  if (removed && introduced) d.overall = 1.0 - (g_int + *introduced - *removed) / g_base;
  if (!(g_rlfr > 0.0)) return d;
  d.in_context = 1.0 - (g_int / g_rlfr) * (1.0 - *d.policy);
  if (removed && introduced) d.direct = (*removed - *introduced) / g_rlfr * (1.0 - *d.policy);
  return d;
}

// ---- KL -----------------------------------------------------------------------

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] < 0.0 || q[v] < 0.0) throw std::invalid_argument("kl_divergence: negative probability");
    if (p[v] == 0.0) continue;
    if (q[v] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[v] * std::log(p[v] / q[v]);
  }
  return kl;
}

namespace {

KlStratum summarize(const std::vector<double>& means) {
  KlStratum s;
  s.sequences = means.size();
  if (means.empty()) return s;
  const double n = static_cast<double>(means.size());
  s.mean = std::accumulate(means.begin(), means.end(), 0.0) / n;
  double ss = 0.0;
  for (double m : means) ss += (m - s.mean) * (m - s.mean);
  s.std = std::sqrt(ss / n);
  return s;
}

}  // namespace

std::vector<KlSourceReport> kl_stratified(std::span<const KlSequence> seqs) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> per_source;
  std::map<std::string, std::size_t> infinite;
  for (const auto& s : seqs) {
    if (s.p.rows() != s.q.rows() || s.p.cols() != s.q.cols()) throw std::invalid_argument("kl_stratified: shape mismatch");
    if (!per_source.count(s.source)) order.push_back(s.source);
    auto& [sup, ns] = per_source[s.source];
    auto& inf = infinite[s.source];
    double sum[2] = {0, 0};
    std::size_t cnt[2] = {0, 0};
    for (const auto& [span, label] : s.spans) {
      if (label == VerificationLabel::InsufficientInformation) continue;
      if (span.end > static_cast<std::size_t>(s.p.rows())) throw std::invalid_argument("kl_stratified: span out of range");
      const int k = label == VerificationLabel::NotSupported ? 1 : 0;
      for (std::size_t t = span.start; t < span.end; ++t) {
        const Vector pr = s.p.row(static_cast<Eigen::Index>(t)).transpose();
        const Vector qr = s.q.row(static_cast<Eigen::Index>(t)).transpose();
        const double kl = kl_divergence({pr.data(), static_cast<std::size_t>(pr.size())},
                                        {qr.data(), static_cast<std::size_t>(qr.size())});
        if (std::isinf(kl)) {
          ++inf;
          continue;
        }
        sum[k] += kl;
        ++cnt[k];
      }
    }
    if (cnt[0] > 0) sup.push_back(sum[0] / static_cast<double>(cnt[0]));
    if (cnt[1] > 0) ns.push_back(sum[1] / static_cast<double>(cnt[1]));
  }
  std::vector<KlSourceReport> out;
  for (const auto& src : order) {
    const auto& [sup, ns] = per_source[src];
    out.push_back({src, summarize(sup), summarize(ns), infinite[src]});
  }
  return out;
}

KlSequence tilted_policy_pair(const world::World& w, const world::Completion& c, const world::ActivationSheet& sheet,
                              int layer_id, std::size_t vocab, double eta, std::uint64_t seed) {
  if (vocab < 2) throw std::invalid_argument("tilted_policy_pair: vocabulary must have at least 2 entries");
  const Matrix& h = sheet.layer(layer_id);
  const auto d = static_cast<Eigen::Index>(w.params().feature_dim);
  if (h.cols() != d) throw std::invalid_argument("tilted_policy_pair: feature dimension mismatch");
  Rng rng(derive_key(seed, "tilted-policy"));
  Matrix unembed(d, static_cast<Eigen::Index>(vocab));
  for (Eigen::Index i = 0; i < unembed.size(); ++i) unembed.data()[i] = rng.normal() / std::sqrt(static_cast<double>(d));
  Vector tilt(static_cast<Eigen::Index>(vocab));
  for (Eigen::Index i = 0; i < tilt.size(); ++i) tilt(i) = rng.normal();

  KlSequence s;
  s.spans = world::oracle_extract_entities(c);
  s.source = "base";
  const Matrix logits = h * unembed;
  s.p = kernel::softmax_rows(logits);
  Matrix tilted = logits;
  for (const auto& cl : c.claims) {
    if (cl.truth != VerificationLabel::NotSupported) continue;
    for (std::size_t t = cl.span.start; t < cl.span.end; ++t) tilted.row(static_cast<Eigen::Index>(t)) += eta * tilt.transpose();
  }
  s.q = kernel::softmax_rows(tilted);
  return s;
}

// ---- dendrogram ---------------------------------------------------------------

PcaResult pca(const Matrix& x, std::size_t components) {
  if (x.rows() < 2) throw std::invalid_argument("pca: need at least two rows");
  if (components == 0) throw std::invalid_argument("pca: need at least one component");
  const Matrix centred = x.rowwise() - x.colwise().mean();
  const Matrix cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");
  const Vector ev = es.eigenvalues().cwiseMax(0.0);  // ascending
  const double total = ev.sum();
  const double tol = std::max(total, 1.0) * 1e-12 * static_cast<double>(ev.size());
  PcaResult r;
  std::size_t k = 0;
  for (Eigen::Index i = ev.size() - 1; i >= 0 && k < components; --i, ++k) {
    if (ev(i) <= tol) break;
  }
  r.components = k;
  r.projected = Matrix::Zero(x.rows(), static_cast<Eigen::Index>(std::max<std::size_t>(k, 1)));
  double kept = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const Eigen::Index col = ev.size() - 1 - static_cast<Eigen::Index>(j);
    r.projected.col(static_cast<Eigen::Index>(j)) = centred * es.eigenvectors().col(col);
    kept += ev(col);
  }
  r.energy_fraction = total > 0.0 ? kept / total : 0.0;
  return r;
}

double cosine_similarity(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  if (a == b) return 1.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

Dendrogram cluster(const Matrix& points) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n < 2) throw std::invalid_argument("cluster: need at least two points");
  Matrix dist(points.rows(), points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    dist(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      const double d = 1.0 - cosine_similarity(points.row(i).transpose(), points.row(j).transpose());
      dist(i, j) = dist(j, i) = d;
    }
  }
  std::vector<std::size_t> id(n), size(n, 1);
  std::iota(id.begin(), id.end(), 0);
  std::vector<bool> active(n, true);
  Dendrogram dg;
  dg.leaves = n;
  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!active[j]) continue;
        const double d = dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    dg.merges.push_back({id[bi], id[bj], best, size[bi] + size[bj]});
    const double wi = static_cast<double>(size[bi]), wj = static_cast<double>(size[bj]);
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const auto ik = static_cast<Eigen::Index>(k);
      const double d = (wi * dist(static_cast<Eigen::Index>(bi), ik) + wj * dist(static_cast<Eigen::Index>(bj), ik)) / (wi + wj);
      dist(static_cast<Eigen::Index>(bi), ik) = dist(ik, static_cast<Eigen::Index>(bi)) = d;
    }
    active[bj] = false;
    size[bi] += size[bj];
    id[bi] = n + step;
  }
  return dg;
}

std::vector<int> Dendrogram::cut(std::size_t k) const {
  if (k == 0 || k > leaves) throw std::invalid_argument("Dendrogram::cut: k must lie in [1, leaves]");
  std::vector<std::size_t> parent(leaves + merges.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i + k < leaves; ++i) {
    parent[find(merges[i].left)] = leaves + i;
    parent[find(merges[i].right)] = leaves + i;
  }
  std::vector<int> labels(leaves);
  std::map<std::size_t, int> names;
  for (std::size_t t = 0; t < leaves; ++t) {
    const auto root = find(t);
    const auto it = names.try_emplace(root, static_cast<int>(names.size())).first;
    labels[t] = it->second;
  }
  return labels;
}

std::string Dendrogram::to_text() const {
  std::vector<std::string> text(leaves + merges.size());
  for (std::size_t t = 0; t < leaves; ++t) text[t] = std::to_string(t);
  for (std::size_t i = 0; i < merges.size(); ++i) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, merges[i].height);
    text[leaves + i] = "[" + text[merges[i].left] + ", " + text[merges[i].right] + ", " + std::string(buf, res.ptr) + "]";
  }
  return merges.empty() ? (leaves ? text[0] : "[]") : text.back();
}

Dendrogram dendrogram(const Matrix& x, std::size_t components) {
  if (x.rows() < 6) throw std::invalid_argument("dendrogram: need at least 6 tokens");
  const auto p = pca(x, components);
  auto dg = cluster(p.projected);
  dg.components = p.components;
  dg.energy_fraction = p.energy_fraction;
  return dg;
}

Dendrogram dendrogram(const world::ActivationSheet& sheet, int layer_id, std::size_t components) {
  return dendrogram(sheet.layer(layer_id), components);
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw std::invalid_argument("adjusted_rand_index: size mismatch");
  if (a.empty()) throw std::invalid_argument("adjusted_rand_index: empty labelling");
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1;
    rows[a[i]] += 1;
    cols[b[i]] += 1;
  }
  auto c2 = [](double n) { return n * (n - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (const auto& [k, n] : table) index += c2(n);
  for (const auto& [k, n] : rows) sa += c2(n);
  for (const auto& [k, n] : cols) sb += c2(n);
  const double expected = sa * sb / c2(static_cast<double>(a.size()));
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

PlantedClusters planted_clusters(std::size_t clusters, std::size_t per_cluster, std::size_t dim, std::size_t rank,
                                 double sigma, std::uint64_t seed) {
  if (clusters == 0 || per_cluster == 0 || rank == 0 || rank > dim) {
    throw std::invalid_argument("planted_clusters: invalid shape");
  }
  Rng rng(derive_key(seed, "planted-clusters"));
  const auto d = static_cast<Eigen::Index>(dim), r = static_cast<Eigen::Index>(rank);
  Matrix g(d, r);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Matrix basis = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(d, r);
  std::vector<Vector> centres;
  for (std::size_t k = 0; k < clusters; ++k) {
    Vector z(r);
    for (Eigen::Index i = 0; i < r; ++i) z(i) = 3.0 * rng.normal();
    centres.push_back(basis * z);
  }
  PlantedClusters pc;
  pc.points.resize(static_cast<Eigen::Index>(clusters * per_cluster), d);
  for (std::size_t k = 0; k < clusters; ++k) {
    for (std::size_t i = 0; i < per_cluster; ++i) {
      Vector z(r), noise(d);
      for (Eigen::Index j = 0; j < r; ++j) z(j) = 0.5 * rng.normal();
      for (Eigen::Index j = 0; j < d; ++j) noise(j) = sigma * rng.normal();
      pc.points.row(static_cast<Eigen::Index>(k * per_cluster + i)) = (centres[k] + basis * z + noise).transpose();
      pc.labels.push_back(static_cast<int>(k));
    }
  }
  return pc;
}

}  // namespace rlfr::eval
