#include "rlfr/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "rlfr/error.hpp"
#include "rlfr/rng.hpp"

namespace rlfr::probes {

using kernel::Mask;
using kernel::RowVector;

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double sd, Rng& rng) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

Matrix zeros(std::size_t rows, std::size_t cols) {
  return Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ParamView view(std::string name, Matrix& m) {
  return {std::move(name), std::span<double>(m.data(), static_cast<std::size_t>(m.size())),
          static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
}

ParamView view(std::string name, Vector& v) {
  return {std::move(name), std::span<double>(v.data(), static_cast<std::size_t>(v.size())),
          static_cast<std::size_t>(v.size()), 1};
}

// Binary cross-entropy on a logit, weighted; returns loss and dloss/dlogit.
std::pair<double, double> weighted_bce(double logit, int label, double weight) {
  const double p = kernel::sigmoid(logit);
  const double loss = label == 1 ? -kernel::log_sigmoid(logit) : -kernel::log_sigmoid(-logit);
  return {weight * loss, weight * (p - static_cast<double>(label))};
}

}  // namespace

// ---- transformer -------------------------------------------------------------

void TransformerProbeConfig::validate() const {
  if (embed == 0 || heads == 0 || embed % heads != 0) throw ConfigError("transformer probe: embed must divide into heads");
  if (head_dim() % 2 != 0) throw ConfigError("transformer probe: head dim must be even for RoPE");
  if (input_dim == 0 || mlp == 0 || window == 0) throw ConfigError("transformer probe: zero dimension");
  if (!(rope_theta > 0)) throw ConfigError("transformer probe: rope theta must be positive");
}

TransformerProbeWeights TransformerProbeWeights::zeros(const TransformerProbeConfig& cfg) {
  cfg.validate();
  TransformerProbeWeights w;
  w.config = cfg;
  const std::size_t e = cfg.embed, f = cfg.mlp;
  w.in_proj = probes::zeros(e, cfg.input_dim);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    TransformerLayer layer{probes::zeros(3 * e, e), probes::zeros(e, e), probes::zeros(cfg.heads, e),
                           probes::zeros(f, e),     probes::zeros(f, e), probes::zeros(e, f),
                           Vector::Zero(static_cast<Eigen::Index>(e)), Vector::Zero(static_cast<Eigen::Index>(e))};
    w.layers.push_back(std::move(layer));
  }
  w.output_norm = Vector::Zero(static_cast<Eigen::Index>(e));
  w.out_proj = probes::zeros(1, e);
  return w;
}

TransformerProbeWeights TransformerProbeWeights::init(const TransformerProbeConfig& cfg, std::uint64_t seed) {
  auto w = zeros(cfg);
  Rng rng(derive_key(seed, "transformer-init"));
  const double e = static_cast<double>(cfg.embed), f = static_cast<double>(cfg.mlp);
  const double depth = std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.layers, 1)));
  w.in_proj = gaussian(cfg.embed, cfg.input_dim, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)), rng);
  for (auto& layer : w.layers) {
    layer.wqkv = gaussian(3 * cfg.embed, cfg.embed, 1.0 / std::sqrt(e), rng);
    layer.wo = gaussian(cfg.embed, cfg.embed, 1.0 / (std::sqrt(e) * depth), rng);
    layer.wattng = gaussian(cfg.heads, cfg.embed, 1.0 / std::sqrt(e), rng);
    layer.wmlpg = gaussian(cfg.mlp, cfg.embed, 1.0 / std::sqrt(e), rng);
    layer.wu = gaussian(cfg.mlp, cfg.embed, 1.0 / std::sqrt(e), rng);
    layer.wd = gaussian(cfg.embed, cfg.mlp, 1.0 / (std::sqrt(f) * depth), rng);
    layer.wnorm1.setOnes();
    layer.wnorm2.setOnes();
  }
  w.output_norm.setOnes();
  w.out_proj = gaussian(1, cfg.embed, 1.0 / std::sqrt(e), rng);
  return w;
}

std::vector<ParamView> TransformerProbeWeights::params() {
  std::vector<ParamView> out;
  out.push_back(view("in_proj", in_proj));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& L = layers[l];
    out.push_back(view(p + "wqkv", L.wqkv));
    out.push_back(view(p + "wo", L.wo));
    out.push_back(view(p + "wattng", L.wattng));
    out.push_back(view(p + "wmlpg", L.wmlpg));
    out.push_back(view(p + "wu", L.wu));
    out.push_back(view(p + "wd", L.wd));
    out.push_back(view(p + "wnorm1", L.wnorm1));
    out.push_back(view(p + "wnorm2", L.wnorm2));
  }
  out.push_back(view("output_norm", output_norm));
  out.push_back(view("out_proj", out_proj));
  return out;
}

std::size_t TransformerProbeWeights::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.values.size();
  return n;
}

struct LayerCache {
  Matrix h_in, a, gate, qkv, gated, h_mid, b;
  std::vector<Matrix> q, k, v, o;
  std::vector<kernel::AttentionCache> attn;
  kernel::GegluCache mlp;
};

struct TransformerCache {
  Matrix x;
  std::vector<LayerCache> layers;
  Matrix h_final, out_normed;
  std::vector<std::size_t> positions;
  Mask mask;
};

namespace {

const kernel::RopeTable& rope_table_for(const TransformerProbeConfig& cfg, std::size_t tokens) {
  // One table per (head_dim, theta, length) combination seen; probes use few.
  thread_local std::vector<std::pair<std::tuple<std::size_t, double, std::size_t>, kernel::RopeTable>> tables;
  std::size_t need = std::max<std::size_t>(tokens, 64);
  for (auto& [key, table] : tables) {
    if (std::get<0>(key) == cfg.head_dim() && std::get<1>(key) == cfg.rope_theta && std::get<2>(key) >= tokens) {
      return table;
    }
  }
  need = std::max(need, std::size_t{512});
  tables.emplace_back(std::make_tuple(cfg.head_dim(), cfg.rope_theta, need),
                      kernel::RopeTable(need, cfg.head_dim(), cfg.rope_theta));
  return tables.back().second;
}

}  // namespace

Vector transformer_forward(const Matrix& x, const TransformerProbeWeights& w, TransformerCache* cache) {
  const auto& cfg = w.config;
  if (static_cast<std::size_t>(x.cols()) != cfg.input_dim) throw std::invalid_argument("transformer probe: input dim mismatch");
  const auto tokens = static_cast<std::size_t>(x.rows());
  if (tokens == 0) return Vector(0);
  if (tokens > cfg.max_positions) throw std::invalid_argument("transformer probe: sequence exceeds max positions");
  const auto e = static_cast<Eigen::Index>(cfg.embed);
  const auto d = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& rope = rope_table_for(cfg, tokens);
  std::vector<std::size_t> positions(tokens);
  std::iota(positions.begin(), positions.end(), 0);
  const Mask mask = kernel::causal_window_mask(tokens, cfg.window);

  Matrix h = x * w.in_proj.transpose();
  if (cache) {
    cache->x = x;
    cache->layers.clear();
    cache->positions = positions;
    cache->mask = mask;
  }
  for (const auto& L : w.layers) {
    LayerCache lc;
    lc.h_in = h;
    lc.a = kernel::rms_norm(h, L.wnorm1);
    lc.gate = (lc.a * L.wattng.transpose()).unaryExpr([](double v) { return kernel::sigmoid(v); });
    lc.qkv = lc.a * L.wqkv.transpose();
    lc.gated.resize(h.rows(), e);
    for (Eigen::Index hd = 0; hd < static_cast<Eigen::Index>(cfg.heads); ++hd) {
      auto [q, k] = kernel::rope_apply(lc.qkv.middleCols(hd * d, d), lc.qkv.middleCols(e + hd * d, d), rope, positions);
      Matrix v = lc.qkv.middleCols(2 * e + hd * d, d);
      kernel::AttentionCache ac;
      Matrix o = kernel::masked_attention(q, k, v, mask, scale, &ac);
      lc.gated.middleCols(hd * d, d) = o.array().colwise() * lc.gate.col(hd).array();
      if (cache) {
        lc.q.push_back(std::move(q));
        lc.k.push_back(std::move(k));
        lc.v.push_back(std::move(v));
        lc.o.push_back(std::move(o));
        lc.attn.push_back(std::move(ac));
      }
    }
    h = h + lc.gated * L.wo.transpose();
    lc.h_mid = h;
    lc.b = kernel::rms_norm(h, L.wnorm2);
    h = h + kernel::geglu(lc.b, L.wu, L.wmlpg, L.wd, cache ? &lc.mlp : nullptr);
    if (cache) cache->layers.push_back(std::move(lc));
  }
  Matrix normed = kernel::rms_norm(h, w.output_norm);
  Vector logits = normed * w.out_proj.transpose();
  if (cache) {
    cache->h_final = std::move(h);
    cache->out_normed = std::move(normed);
  }
  return logits;
}

namespace {

// Accumulates grad_scale * d(loss)/d(weights) into `g` given dlogits.
void transformer_backward(const TransformerProbeWeights& w, const TransformerCache& c, const Vector& dlogits,
                          TransformerProbeWeights& g, double grad_scale) {
  const auto& cfg = w.config;
  const auto e = static_cast<Eigen::Index>(cfg.embed);
  const auto d = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& rope = rope_table_for(cfg, c.positions.size());
  const Vector dl = dlogits * grad_scale;

  g.out_proj += dl.transpose() * c.out_normed;
  const Matrix dnormed = dl * w.out_proj;
  auto rn = kernel::rms_norm_backward(c.h_final, w.output_norm, dnormed);
  g.output_norm += rn.dw;
  Matrix dh = std::move(rn.dx);

  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const auto& L = w.layers[li];
    const auto& lc = c.layers[li];
    auto& G = g.layers[li];

    auto mg = kernel::geglu_backward(lc.b, L.wu, L.wmlpg, L.wd, lc.mlp, dh);
    G.wu += mg.dwu;
    G.wmlpg += mg.dwg;
    G.wd += mg.dwd;
    auto r2 = kernel::rms_norm_backward(lc.h_mid, L.wnorm2, mg.dx);
    G.wnorm2 += r2.dw;
    Matrix dh_mid = dh + r2.dx;

    G.wo += dh_mid.transpose() * lc.gated;
    const Matrix dgated = dh_mid * L.wo;
    Matrix dgate(lc.gate.rows(), lc.gate.cols());
    Matrix dqkv(lc.qkv.rows(), lc.qkv.cols());
    for (Eigen::Index hd = 0; hd < static_cast<Eigen::Index>(cfg.heads); ++hd) {
      const auto hs = static_cast<std::size_t>(hd);
      const Matrix dg_block = dgated.middleCols(hd * d, d);
      dgate.col(hd) = dg_block.cwiseProduct(lc.o[hs]).rowwise().sum();
      const Matrix dout = dg_block.array().colwise() * lc.gate.col(hd).array();
      auto ag = kernel::masked_attention_backward(lc.q[hs], lc.k[hs], lc.v[hs], scale, lc.attn[hs], dout);
      kernel::rope_rotate(ag.dq, rope, c.positions, true);
      kernel::rope_rotate(ag.dk, rope, c.positions, true);
      dqkv.middleCols(hd * d, d) = ag.dq;
      dqkv.middleCols(e + hd * d, d) = ag.dk;
      dqkv.middleCols(2 * e + hd * d, d) = ag.dv;
    }
    const Matrix dgate_logits = dgate.cwiseProduct(lc.gate).cwiseProduct((1.0 - lc.gate.array()).matrix());
    G.wattng += dgate_logits.transpose() * lc.a;
    G.wqkv += dqkv.transpose() * lc.a;
    const Matrix da = dgate_logits * L.wattng + dqkv * L.wqkv;
    auto r1 = kernel::rms_norm_backward(lc.h_in, L.wnorm1, da);
    G.wnorm1 += r1.dw;
    dh = dh_mid + r1.dx;
  }
  g.in_proj += dh.transpose() * c.x;
}

}  // namespace

Vector localization_forward(const world::ActivationSheet& sheet, const TransformerProbeWeights& w) {
  return transformer_forward(sheet.layer(w.config.input_layer), w);
}

Vector localization_probs(const world::ActivationSheet& sheet, const TransformerProbeWeights& w) {
  return localization_forward(sheet, w).unaryExpr([](double v) { return kernel::sigmoid(v); });
}

std::vector<Span> segment(std::span<const double> probs, double threshold, std::size_t first) {
  std::vector<Span> spans;
  if (first >= probs.size()) return spans;
  std::size_t start = first;
  for (std::size_t t = first + 1; t < probs.size(); ++t) {
    if (!(probs[t] >= threshold)) {
      spans.emplace_back(start, t);
      start = t;
    }
  }
  spans.emplace_back(start, probs.size());
  return spans;
}

std::vector<int> continuation_labels(const world::Completion& c) {
  std::vector<int> labels(c.size(), 0);
  for (const auto& cl : c.claims) {
    for (std::size_t t = cl.span.start + 1; t < cl.span.end; ++t) labels[t] = 1;
  }
  return labels;
}

// ---- attention probe --------------------------------------------------------

void AttentionProbeConfig::validate() const {
  if (embed == 0 || heads == 0 || embed % heads != 0) throw ConfigError("attention probe: embed must divide into heads");
  if (input_layers.empty()) throw ConfigError("attention probe: no input layers");
  if (classes < 2) throw ConfigError("attention probe: need at least two classes");
  if (input_dim == 0) throw ConfigError("attention probe: zero input dim");
}

AttentionProbeWeights AttentionProbeWeights::zeros(const AttentionProbeConfig& cfg) {
  cfg.validate();
  AttentionProbeWeights w;
  w.config = cfg;
  for (std::size_t l = 0; l < cfg.input_layers.size(); ++l) {
    w.wnorms.push_back(Vector::Zero(static_cast<Eigen::Index>(cfg.input_dim)));
  }
  w.wkv = probes::zeros(2 * cfg.embed, cfg.input_dim);
  w.query = probes::zeros(cfg.heads, cfg.head_dim());
  w.wout = probes::zeros(cfg.outputs(), cfg.embed);
  return w;
}

AttentionProbeWeights AttentionProbeWeights::init(const AttentionProbeConfig& cfg, std::uint64_t seed) {
  auto w = zeros(cfg);
  Rng rng(derive_key(seed, "attention-init"));
  for (auto& n : w.wnorms) n.setOnes();
  w.wkv = gaussian(2 * cfg.embed, cfg.input_dim, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)), rng);
  w.query = gaussian(cfg.heads, cfg.head_dim(), 0.1 / std::sqrt(static_cast<double>(cfg.head_dim())), rng);
  w.wout = gaussian(cfg.outputs(), cfg.embed, 1.0 / std::sqrt(static_cast<double>(cfg.embed)), rng);
  return w;
}

std::vector<ParamView> AttentionProbeWeights::params() {
  std::vector<ParamView> out;
  for (std::size_t l = 0; l < wnorms.size(); ++l) out.push_back(view("wnorms." + std::to_string(l), wnorms[l]));
  out.push_back(view("wkv", wkv));
  out.push_back(view("query", query));
  out.push_back(view("wout", wout));
  return out;
}

PooledInput gather(const world::ActivationSheet& sheet, std::span<const int> layer_ids, const std::vector<bool>& mask) {
  if (mask.size() != sheet.tokens()) throw std::invalid_argument("gather: mask length mismatch");
  std::vector<Eigen::Index> rows;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) rows.push_back(static_cast<Eigen::Index>(t));
  }
  if (rows.empty()) throw std::invalid_argument("attention probe: empty mask");
  PooledInput in;
  for (int id : layer_ids) {
    const Matrix& src = sheet.layer(id);
    Matrix m(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    in.layers.push_back(std::move(m));
  }
  return in;
}

PooledInput gather(const world::ActivationSheet& sheet, std::span<const int> layer_ids, const Span& span) {
  if (!span.valid_within(sheet.tokens())) throw std::invalid_argument("gather: span out of range");
  PooledInput in;
  for (int id : layer_ids) {
    in.layers.push_back(sheet.layer(id).middleRows(static_cast<Eigen::Index>(span.start),
                                                   static_cast<Eigen::Index>(span.length())));
  }
  return in;
}

struct AttentionCache {
  std::vector<Matrix> normed_src;  // per layer, before interleaving
  Matrix z;                        // (tokens*layers) x input_dim
  Matrix k, v;                     // (tokens*layers) x E
  Matrix scores;                   // H x n
  RowVector pooled;                // 1 x E
};

AttentionProbeOutput attention_forward(const PooledInput& x, const AttentionProbeWeights& w, AttentionCache* cache) {
  const auto& cfg = w.config;
  if (x.layers.size() != cfg.input_layers.size()) throw std::invalid_argument("attention probe: layer count mismatch");
  const std::size_t tokens = x.tokens();
  if (tokens == 0) throw std::invalid_argument("attention probe: empty mask");
  const std::size_t nl = x.layers.size();
  const auto e = static_cast<Eigen::Index>(cfg.embed);
  const auto d = static_cast<Eigen::Index>(cfg.head_dim());
  const auto n = static_cast<Eigen::Index>(tokens * nl);

  Matrix z(n, static_cast<Eigen::Index>(cfg.input_dim));
  std::vector<Matrix> normed(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    if (static_cast<std::size_t>(x.layers[l].cols()) != cfg.input_dim ||
        static_cast<std::size_t>(x.layers[l].rows()) != tokens) {
      throw std::invalid_argument("attention probe: input shape mismatch");
    }
    normed[l] = kernel::rms_norm(x.layers[l], w.wnorms[l]);
    for (std::size_t t = 0; t < tokens; ++t) {
      z.row(static_cast<Eigen::Index>(t * nl + l)) = normed[l].row(static_cast<Eigen::Index>(t));
    }
  }
  Matrix k = z * w.wkv.topRows(e).transpose();
  Matrix v = z * w.wkv.bottomRows(e).transpose();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix scores(static_cast<Eigen::Index>(cfg.heads), n);
  RowVector pooled(e);
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(cfg.heads); ++h) {
    Vector logits = k.middleCols(h * d, d) * w.query.row(h).transpose() * scale;
    const Vector s = kernel::softmax(logits);
    scores.row(h) = s.transpose();
    pooled.segment(h * d, d) = s.transpose() * v.middleCols(h * d, d);
  }

  AttentionProbeOutput out;
  out.logits = w.wout * pooled.transpose();
  if (cfg.head() == HeadType::Sigmoid) {
    const double p = kernel::sigmoid(out.logits(0));
    out.probs = Vector(2);
    out.probs << 1.0 - p, p;
  } else {
    out.probs = kernel::softmax(out.logits);
  }
  out.attention = scores;
  if (cache) {
    cache->normed_src = std::move(normed);
    cache->z = std::move(z);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->scores = std::move(scores);
    cache->pooled = std::move(pooled);
  }
  return out;
}

namespace {

void attention_backward(const PooledInput& x, const AttentionProbeWeights& w, const AttentionCache& c,
                        const Vector& dlogits, AttentionProbeWeights& g) {
  const auto& cfg = w.config;
  const auto e = static_cast<Eigen::Index>(cfg.embed);
  const auto d = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t nl = x.layers.size();
  const std::size_t tokens = x.tokens();

  g.wout += dlogits * c.pooled;
  const RowVector dpooled = dlogits.transpose() * w.wout;
  Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
  Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(cfg.heads); ++h) {
    const RowVector s = c.scores.row(h);
    const RowVector dval = dpooled.segment(h * d, d);
    dv.middleCols(h * d, d) = s.transpose() * dval;
    const Vector ds = c.v.middleCols(h * d, d) * dval.transpose();
    const double sds = s.dot(ds.transpose());
    const Vector dlogit = s.transpose().cwiseProduct((ds.array() - sds).matrix()) * scale;
    g.query.row(h) += dlogit.transpose() * c.k.middleCols(h * d, d);
    dk.middleCols(h * d, d) = dlogit * w.query.row(h);
  }
  g.wkv.topRows(e) += dk.transpose() * c.z;
  g.wkv.bottomRows(e) += dv.transpose() * c.z;
  const Matrix dz = dk * w.wkv.topRows(e) + dv * w.wkv.bottomRows(e);
  for (std::size_t l = 0; l < nl; ++l) {
    Matrix dl(static_cast<Eigen::Index>(tokens), dz.cols());
    for (std::size_t t = 0; t < tokens; ++t) {
      dl.row(static_cast<Eigen::Index>(t)) = dz.row(static_cast<Eigen::Index>(t * nl + l));
    }
    g.wnorms[l] += kernel::rms_norm_backward(x.layers[l], w.wnorms[l], dl).dw;
  }
}

}  // namespace

AttentionProbeOutput attention_probe_forward(const world::ActivationSheet& sheet, const std::vector<bool>& mask,
                                             const AttentionProbeWeights& w) {
  return attention_forward(gather(sheet, w.config.input_layers, mask), w);
}

AttentionProbeOutput attention_probe_forward(const world::ActivationSheet& sheet, const Span& span,
                                             const AttentionProbeWeights& w) {
  return attention_forward(gather(sheet, w.config.input_layers, span), w);
}

// ---- losses -----------------------------------------------------------------

std::vector<double> class_weights(const TrainRecipe& r, std::size_t classes) {
  std::vector<double> w(classes, 1.0);
  if (r.positive_class >= 0 && static_cast<std::size_t>(r.positive_class) < classes) {
    w[static_cast<std::size_t>(r.positive_class)] = r.positive_weight;
  }
  return w;
}

LossSum transformer_loss(const TokenExample& ex, const TransformerProbeWeights& w, std::span<const double> cw,
                         TransformerProbeWeights* grad, double grad_scale) {
  if (ex.labels.size() != static_cast<std::size_t>(ex.x.rows())) throw std::invalid_argument("token labels mismatch");
  TransformerCache cache;
  const Vector logits = transformer_forward(ex.x, w, grad ? &cache : nullptr);
  LossSum sum;
  Vector dlogits(logits.size());
  for (Eigen::Index t = 0; t < logits.size(); ++t) {
    const int y = ex.labels[static_cast<std::size_t>(t)];
    const double wt = cw[static_cast<std::size_t>(y)];
    auto [l, dl] = weighted_bce(logits(t), y, wt);
    sum.weighted_loss += l;
    sum.weight += wt;
    dlogits(t) = dl;
  }
  if (grad) transformer_backward(w, cache, dlogits, *grad, grad_scale);
  return sum;
}

LossSum attention_loss(const PooledExample& ex, const AttentionProbeWeights& w, std::span<const double> cw,
                       AttentionProbeWeights* grad, double grad_scale) {
  AttentionCache cache;
  const auto out = attention_forward(ex.input, w, grad ? &cache : nullptr);
  const auto y = static_cast<std::size_t>(ex.label);
  if (y >= w.config.classes) throw std::invalid_argument("attention probe: label out of range");
  const double wt = cw[y];
  LossSum sum;
  sum.weight = wt;
  Vector dlogits(out.logits.size());
  if (w.config.head() == HeadType::Sigmoid) {
    auto [l, dl] = weighted_bce(out.logits(0), ex.label, wt);
    sum.weighted_loss = l;
    dlogits(0) = dl;
  } else {
    const double m = out.logits.maxCoeff();
    const double lse = m + std::log((out.logits.array() - m).exp().sum());
    sum.weighted_loss = wt * (lse - out.logits(static_cast<Eigen::Index>(y)));
    dlogits = wt * out.probs;
    dlogits(static_cast<Eigen::Index>(y)) -= wt;
  }
  if (grad) attention_backward(ex.input, w, cache, dlogits * grad_scale, *grad);
  return sum;
}

namespace {

template <typename W, typename Ex, typename LossFn>
double dataset_loss(std::span<const Ex> data, const W& w, std::span<const double> cw, W* grad, LossFn loss_fn) {
  double total_w = 0.0;
  // Two passes: weights first so gradients can be scaled once.
  for (const auto& ex : data) total_w += loss_fn(ex, w, cw, nullptr, 0.0).weight;
  if (!(total_w > 0)) throw std::invalid_argument("dataset loss: zero total weight");
  double total = 0.0;
  for (const auto& ex : data) total += loss_fn(ex, w, cw, grad, 1.0 / total_w).weighted_loss;
  return total / total_w;
}

}  // namespace

double transformer_dataset_loss(std::span<const TokenExample> data, const TransformerProbeWeights& w,
                                std::span<const double> cw, TransformerProbeWeights* grad) {
  return dataset_loss(data, w, cw, grad, transformer_loss);
}

double attention_dataset_loss(std::span<const PooledExample> data, const AttentionProbeWeights& w,
                              std::span<const double> cw, AttentionProbeWeights* grad) {
  return dataset_loss(data, w, cw, grad, attention_loss);
}

// ---- training ---------------------------------------------------------------

void TrainRecipe::validate() const {
  if (!(learning_rate >= 0)) throw ConfigError("train recipe: learning rate must be >= 0");
  if (epochs < 1) throw ConfigError("train recipe: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train recipe: batch size must be >= 1");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("train recipe: warmup fraction in [0,1)");
  if (!(positive_weight > 0)) throw ConfigError("train recipe: positive weight must be positive");
}

double scheduled_lr(const TrainRecipe& r, std::size_t step, std::size_t total) {
  const auto warm = static_cast<std::size_t>(std::ceil(r.warmup_fraction * static_cast<double>(total)));
  if (step < warm) return r.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(total - warm, 1));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return r.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

class AdamW {
 public:
  AdamW(const TrainRecipe& r, std::size_t n) : r_(r), m_(n, 0.0), v_(n, 0.0) {}

  template <typename W>
  void step(W& weights, W& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(r_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(r_.beta2, static_cast<double>(t_));
    auto pw = weights.params();
    auto pg = grads.params();
    std::size_t idx = 0;
    for (std::size_t b = 0; b < pw.size(); ++b) {
      for (std::size_t i = 0; i < pw[b].values.size(); ++i, ++idx) {
        const double g = pg[b].values[i];
        m_[idx] = r_.beta1 * m_[idx] + (1.0 - r_.beta1) * g;
        v_[idx] = r_.beta2 * v_[idx] + (1.0 - r_.beta2) * g * g;
        double& theta = pw[b].values[i];
        theta -= lr * r_.weight_decay * theta;
        theta -= lr * (m_[idx] / bc1) / (std::sqrt(v_[idx] / bc2) + r_.adam_eps);
      }
    }
  }

 private:
  TrainRecipe r_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

template <typename W>
void zero_grads(W& g) {
  for (auto& p : g.params()) std::fill(p.values.begin(), p.values.end(), 0.0);
}

template <typename W, typename Ex, typename LossFn, typename ZeroFn>
TrainResult<W> train_loop(std::span<const Ex> data, W weights, const TrainRecipe& recipe, std::size_t classes,
                          std::uint64_t seed, LossFn loss_fn, ZeroFn make_zero) {
  recipe.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const auto cw = class_weights(recipe, classes);
  std::size_t n_params = 0;
  for (auto& p : weights.params()) n_params += p.values.size();
  AdamW opt(recipe, n_params);
  W grads = make_zero();

  const std::size_t batches = (data.size() + recipe.batch_size - 1) / recipe.batch_size;
  const std::size_t total = batches * recipe.epochs;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_key(seed, "shuffle"));

  TrainResult<W> result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    LossSum epoch_sum;
    double lr = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * recipe.batch_size, hi = std::min(order.size(), lo + recipe.batch_size);
      double batch_w = 0.0;
      for (std::size_t i = lo; i < hi; ++i) batch_w += loss_fn(data[order[i]], weights, cw, nullptr, 0.0).weight;
      zero_grads(grads);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto s = loss_fn(data[order[i]], weights, cw, batch_w > 0 ? &grads : nullptr,
                               batch_w > 0 ? 1.0 / batch_w : 0.0);
        epoch_sum.weighted_loss += s.weighted_loss;
        epoch_sum.weight += s.weight;
      }
      lr = scheduled_lr(recipe, step++, total);
      if (batch_w > 0) opt.step(weights, grads, lr);
    }
    result.history.push_back({epoch, epoch_sum.mean(), lr});
  }
  result.weights = std::move(weights);
  return result;
}

template <typename Ex>
void require_two_classes(std::span<const Ex> data, auto label_of) {
  bool seen0 = false, seen_other = false;
  for (const auto& ex : data) label_of(ex, seen0, seen_other);
  if (!(seen0 && seen_other)) throw std::invalid_argument("train: dataset must contain more than one class");
}

}  // namespace

TrainResult<TransformerProbeWeights> train_localization(std::span<const TokenExample> data,
                                                        const TransformerProbeConfig& cfg,
                                                        const TrainRecipe& recipe, std::uint64_t seed) {
  require_two_classes(data, [](const TokenExample& ex, bool& a, bool& b) {
    for (int y : ex.labels) (y == 0 ? a : b) = true;
  });
  return train_loop(data, TransformerProbeWeights::init(cfg, seed), recipe, 2, seed, transformer_loss,
                    [&] { return TransformerProbeWeights::zeros(cfg); });
}

TrainResult<AttentionProbeWeights> train_attention(std::span<const PooledExample> data,
                                                   const AttentionProbeConfig& cfg, const TrainRecipe& recipe,
                                                   std::uint64_t seed) {
  std::vector<bool> seen(cfg.classes, false);
  for (const auto& ex : data) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.classes) {
      throw std::invalid_argument("train: label out of range");
    }
    seen[static_cast<std::size_t>(ex.label)] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw std::invalid_argument("train: dataset must contain more than one class");
  }
  return train_loop(data, AttentionProbeWeights::init(cfg, seed), recipe, cfg.classes, seed, attention_loss,
                    [&] { return AttentionProbeWeights::zeros(cfg); });
}

// ---- evaluation -------------------------------------------------------------

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      pos += 1;
      rank_sum += rank[i];
    } else {
      neg += 1;
    }
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc: need both classes");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

Calibration calibrate(std::span<const double> scores, std::span<const int> labels, std::size_t bins) {
  if (scores.size() != labels.size()) throw std::invalid_argument("calibrate: size mismatch");
  if (scores.empty() || bins == 0) throw std::invalid_argument("calibrate: empty input");
  Calibration cal;
  cal.bins.resize(bins);
  std::vector<double> sum_p(bins, 0.0), sum_y(bins, 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto b = static_cast<std::size_t>(scores[i] * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    cal.bins[b].count += 1;
    sum_p[b] += scores[i];
    sum_y[b] += labels[i] ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < bins; ++b) {
    auto& bin = cal.bins[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(bins);
    if (bin.count) {
      bin.mean_prediction = sum_p[b] / static_cast<double>(bin.count);
      bin.empirical_rate = sum_y[b] / static_cast<double>(bin.count);
      cal.ece += static_cast<double>(bin.count) / static_cast<double>(scores.size()) *
                 std::abs(bin.mean_prediction - bin.empirical_rate);
    }
  }
  return cal;
}

ProbeEvaluation evaluate_probe(const AttentionProbeWeights& w, std::span<const PooledExample> data, int positive_class) {
  ProbeEvaluation ev;
  std::vector<int> labels;
  for (const auto& ex : data) {
    const auto out = attention_forward(ex.input, w);
    ev.scores.push_back(out.probs(positive_class));
    ev.attention.push_back(out.attention);
    labels.push_back(ex.label == positive_class ? 1 : 0);
  }
  ev.auc = auc(ev.scores, labels);
  ev.calibration = calibrate(ev.scores, labels);
  return ev;
}

ProbeEvaluation evaluate_probe(const TransformerProbeWeights& w, std::span<const TokenExample> data) {
  ProbeEvaluation ev;
  std::vector<int> labels;
  for (const auto& ex : data) {
    const Vector logits = transformer_forward(ex.x, w);
    for (Eigen::Index t = 0; t < logits.size(); ++t) {
      ev.scores.push_back(kernel::sigmoid(logits(t)));
      labels.push_back(ex.labels[static_cast<std::size_t>(t)]);
    }
  }
  ev.auc = auc(ev.scores, labels);
  ev.calibration = calibrate(ev.scores, labels);
  return ev;
}

SpanF1 span_f1(std::span<const Span> predicted, std::span<const Span> gold) {
  SpanF1 f;
  f.gold = gold.size();
  for (const auto& p : predicted) {
    if (p.length() < 2) continue;
    ++f.predicted;
    if (std::find(gold.begin(), gold.end(), p) != gold.end()) ++f.true_positive;
  }
  return f;
}

}  // namespace rlfr::probes
