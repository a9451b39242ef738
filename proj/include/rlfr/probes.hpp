#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rlfr/kernel.hpp"
#include "rlfr/span.hpp"
#include "rlfr/world.hpp"

namespace rlfr::probes {

using kernel::Matrix;
using kernel::Vector;

// Named view of a parameter tensor, used by the optimizer, gradient checks
// and serialization.
struct ParamView {
  std::string name;
  std::span<double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// ---- localization: causal transformer over one layer ----------------------

struct TransformerProbeConfig {
  std::size_t input_dim = 32;
  int input_layer = 20;
  std::size_t layers = 4;
  std::size_t embed = 128;
  std::size_t heads = 8;
  std::size_t mlp = 256;
  std::size_t window = 256;
  double rope_theta = 32.0;
  std::size_t max_positions = 4096;

  std::size_t head_dim() const { return embed / heads; }
  void validate() const;
};

struct TransformerLayer {
  Matrix wqkv;    // 3E x E, rows ordered (qkv, head, dim)
  Matrix wo;      // E x E
  Matrix wattng;  // H x E, per-head output gate
  Matrix wmlpg;   // F x E
  Matrix wu;      // F x E
  Matrix wd;      // E x F
  Vector wnorm1, wnorm2;
};

struct TransformerProbeWeights {
  TransformerProbeConfig config;
  Matrix in_proj;  // E x input_dim
  std::vector<TransformerLayer> layers;
  Vector output_norm;
  Matrix out_proj;  // 1 x E

  static TransformerProbeWeights zeros(const TransformerProbeConfig& cfg);
  static TransformerProbeWeights init(const TransformerProbeConfig& cfg, std::uint64_t seed);
  std::vector<ParamView> params();
  std::size_t parameter_count();
};

struct TransformerCache;

// Raw boundary logits, one per token. Causal: logit t depends only on
// tokens <= t.
Vector transformer_forward(const Matrix& x, const TransformerProbeWeights& w, TransformerCache* cache = nullptr);
Vector localization_forward(const world::ActivationSheet& sheet, const TransformerProbeWeights& w);
// Per-token probability that token t continues the entity of token t-1.
Vector localization_probs(const world::ActivationSheet& sheet, const TransformerProbeWeights& w);

// Token t joins the span of t-1 iff p_t >= threshold; maximal runs become
// spans. Positions are offset by `first`, which always opens a span.
std::vector<Span> segment(std::span<const double> boundary_probs, double threshold, std::size_t first = 0);

// Token labels for localization: 1 iff t and t-1 lie in the same claim.
std::vector<int> continuation_labels(const world::Completion& c);

// ---- span/intervention classifiers: attention pooling ----------------------

enum class HeadType { Sigmoid, Softmax };

struct AttentionProbeConfig {
  std::size_t input_dim = 32;
  std::vector<int> input_layers{20};
  std::size_t embed = 32;
  std::size_t heads = 4;
  std::size_t classes = 2;

  HeadType head() const { return classes == 2 ? HeadType::Sigmoid : HeadType::Softmax; }
  std::size_t outputs() const { return classes == 2 ? 1 : classes; }
  std::size_t head_dim() const { return embed / heads; }
  void validate() const;
};

struct AttentionProbeWeights {
  AttentionProbeConfig config;
  std::vector<Vector> wnorms;  // one per input layer
  Matrix wkv;                  // 2E x input_dim, rows ordered (kv, head, dim)
  Matrix query;                // H x D
  Matrix wout;                 // outputs x E

  static AttentionProbeWeights zeros(const AttentionProbeConfig& cfg);
  static AttentionProbeWeights init(const AttentionProbeConfig& cfg, std::uint64_t seed);
  std::vector<ParamView> params();
};

// Rows selected by the attention mask, one matrix per input layer.
struct PooledInput {
  std::vector<Matrix> layers;
  std::size_t tokens() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().rows()); }
};

struct AttentionProbeOutput {
  Vector logits;  // raw head outputs
  Vector probs;   // class probabilities (2 entries for the sigmoid head)
  Matrix attention;  // heads x pooled tokens; tokens ordered (token, layer)
};

struct AttentionCache;

PooledInput gather(const world::ActivationSheet& sheet, std::span<const int> layer_ids,
                   const std::vector<bool>& mask);
PooledInput gather(const world::ActivationSheet& sheet, std::span<const int> layer_ids, const Span& span);

AttentionProbeOutput attention_forward(const PooledInput& x, const AttentionProbeWeights& w,
                                       AttentionCache* cache = nullptr);
AttentionProbeOutput attention_probe_forward(const world::ActivationSheet& sheet, const std::vector<bool>& mask,
                                             const AttentionProbeWeights& w);
AttentionProbeOutput attention_probe_forward(const world::ActivationSheet& sheet, const Span& span,
                                             const AttentionProbeWeights& w);

// ---- training ---------------------------------------------------------------

struct TrainRecipe {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t epochs = 5;
  int positive_class = 1;
  double positive_weight = 1.0;
  std::size_t batch_size = 16;
  double warmup_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// Cosine decay with linear warmup over `total` optimizer steps.
double scheduled_lr(const TrainRecipe& r, std::size_t step, std::size_t total);

struct TokenExample {
  Matrix x;                 // tokens x input_dim
  std::vector<int> labels;  // per token, 0/1
};

struct PooledExample {
  PooledInput input;
  int label = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr_end = 0.0;
};

template <typename W>
struct TrainResult {
  W weights;
  std::vector<EpochRecord> history;
};

// Class weights: 1 everywhere except positive_class.
std::vector<double> class_weights(const TrainRecipe& r, std::size_t classes);

// Weighted cross-entropy summed over examples (or tokens) plus the total
// weight, so that loss = sum / weight. Gradients accumulate into `grad`
// (already scaled by 1/weight_total when weight_total > 0 is supplied).
struct LossSum {
  double weighted_loss = 0.0;
  double weight = 0.0;
  double mean() const { return weight > 0 ? weighted_loss / weight : 0.0; }
};

LossSum transformer_loss(const TokenExample& ex, const TransformerProbeWeights& w, std::span<const double> cw,
                         TransformerProbeWeights* grad, double grad_scale);
LossSum attention_loss(const PooledExample& ex, const AttentionProbeWeights& w, std::span<const double> cw,
                       AttentionProbeWeights* grad, double grad_scale);

// Mean weighted loss over a dataset and its exact gradient.
double transformer_dataset_loss(std::span<const TokenExample> data, const TransformerProbeWeights& w,
                                std::span<const double> cw, TransformerProbeWeights* grad);
double attention_dataset_loss(std::span<const PooledExample> data, const AttentionProbeWeights& w,
                              std::span<const double> cw, AttentionProbeWeights* grad);

TrainResult<TransformerProbeWeights> train_localization(std::span<const TokenExample> data,
                                                        const TransformerProbeConfig& cfg,
                                                        const TrainRecipe& recipe, std::uint64_t seed);
TrainResult<AttentionProbeWeights> train_attention(std::span<const PooledExample> data,
                                                   const AttentionProbeConfig& cfg, const TrainRecipe& recipe,
                                                   std::uint64_t seed);

// ---- evaluation -------------------------------------------------------------

// Mann-Whitney AUC with midranks for ties. Throws on single-class input.
double auc(std::span<const double> scores, std::span<const int> labels);

struct CalibrationBin {
  double lower = 0.0, upper = 0.0;
  std::size_t count = 0;
  double mean_prediction = 0.0;
  double empirical_rate = 0.0;
};

struct Calibration {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

// Equal-width bins on [0,1]; ECE weights each bin's |mean - rate| by its share.
Calibration calibrate(std::span<const double> scores, std::span<const int> labels, std::size_t bins = 10);

struct ProbeEvaluation {
  double auc = 0.0;
  Calibration calibration;
  std::vector<double> scores;       // positive-class probability per example
  std::vector<Matrix> attention;    // per example, heads x tokens
};

// Positive-class scoring: label == positive_class counts as positive.
ProbeEvaluation evaluate_probe(const AttentionProbeWeights& w, std::span<const PooledExample> data,
                               int positive_class = 1);
// Token-level evaluation of the localization probe.
ProbeEvaluation evaluate_probe(const TransformerProbeWeights& w, std::span<const TokenExample> data);

// Exact-match span F1 between predicted multi-token segments and gold claims.
struct SpanF1 {
  std::size_t true_positive = 0, predicted = 0, gold = 0;
  double precision() const { return predicted ? double(true_positive) / double(predicted) : 0.0; }
  double recall() const { return gold ? double(true_positive) / double(gold) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  SpanF1& operator+=(const SpanF1& o) {
    true_positive += o.true_positive;
    predicted += o.predicted;
    gold += o.gold;
    return *this;
  }
};
SpanF1 span_f1(std::span<const Span> predicted, std::span<const Span> gold);

}  // namespace rlfr::probes
