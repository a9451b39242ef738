#include <cmath>
#include <vector>

#include "doctest.h"
#include "rlfr/probes.hpp"
#include "rlfr/rng.hpp"

using namespace rlfr;
using namespace rlfr::probes;
using kernel::Matrix;
using kernel::Vector;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

template <typename W>
void randomize(W& w, Rng& rng, double sd) {
  for (auto& p : w.params()) {
    for (double& v : p.values) v = sd * rng.normal();
  }
}

template <typename W>
std::vector<kernel::ParamRef> refs(W& w, W& g) {
  std::vector<kernel::ParamRef> out;
  auto pw = w.params();
  auto pg = g.params();
  for (std::size_t i = 0; i < pw.size(); ++i) out.push_back({pw[i].name, pw[i].values, pg[i].values});
  return out;
}

// ---- straight-line references, no shared kernel code ----

double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix ref_rms(const Matrix& x, const Vector& w) {
  Matrix y = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double ss = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) ss += x(r, c) * x(r, c);
    const double den = std::sqrt(ss / double(x.cols()) + 1e-6);
    for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = w(c) * x(r, c) / den;
  }
  return y;
}

Matrix ref_linear(const Matrix& x, const Matrix& w) {  // x W^T
  Matrix y = Matrix::Zero(x.rows(), w.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index o = 0; o < w.rows(); ++o)
      for (Eigen::Index k = 0; k < x.cols(); ++k) y(i, o) += x(i, k) * w(o, k);
  return y;
}

void ref_rope(Matrix& m, double theta) {
  const auto d = m.cols();
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    for (Eigen::Index i = 0; i < d / 2; ++i) {
      const double ang = double(t) / std::pow(theta, 2.0 * double(i) / double(d));
      const double a = m(t, 2 * i), b = m(t, 2 * i + 1);
      m(t, 2 * i) = a * std::cos(ang) - b * std::sin(ang);
      m(t, 2 * i + 1) = a * std::sin(ang) + b * std::cos(ang);
    }
  }
}

Vector ref_transformer(const Matrix& x, const TransformerProbeWeights& w) {
  const auto& cfg = w.config;
  const auto E = Eigen::Index(cfg.embed), H = Eigen::Index(cfg.heads), D = E / H;
  const auto T = x.rows();
  Matrix h = ref_linear(x, w.in_proj);
  for (const auto& L : w.layers) {
    const Matrix a = ref_rms(h, L.wnorm1);
    const Matrix gate = ref_linear(a, L.wattng);
    const Matrix qkv = ref_linear(a, L.wqkv);
    Matrix att(T, E);
    for (Eigen::Index hd = 0; hd < H; ++hd) {
      Matrix q = qkv.block(0, hd * D, T, D), k = qkv.block(0, E + hd * D, T, D), v = qkv.block(0, 2 * E + hd * D, T, D);
      ref_rope(q, cfg.rope_theta);
      ref_rope(k, cfg.rope_theta);
      for (Eigen::Index i = 0; i < T; ++i) {
        std::vector<double> wts;
        double mx = -1e300;
        for (Eigen::Index j = 0; j <= i; ++j) {
          double s = 0;
          if (i - j >= Eigen::Index(cfg.window)) {
            wts.push_back(-1e300);
            continue;
          }
          for (Eigen::Index c = 0; c < D; ++c) s += q(i, c) * k(j, c);
          s /= std::sqrt(double(D));
          wts.push_back(s);
          mx = std::max(mx, s);
        }
        double tot = 0;
        for (auto& s : wts) tot += (s = s < -1e299 ? 0.0 : std::exp(s - mx));
        for (Eigen::Index c = 0; c < D; ++c) {
          double o = 0;
          for (Eigen::Index j = 0; j <= i; ++j) o += wts[std::size_t(j)] / tot * v(j, c);
          att(i, hd * D + c) = o * ref_sigmoid(gate(i, hd));
        }
      }
    }
    h = h + ref_linear(att, L.wo);
    const Matrix b = ref_rms(h, L.wnorm2);
    const Matrix up = ref_linear(b, L.wu), g = ref_linear(b, L.wmlpg);
    Matrix act(up.rows(), up.cols());
    for (Eigen::Index i = 0; i < act.size(); ++i) {
      const double z = g.data()[i];
      act.data()[i] = 0.5 * z * (1 + std::erf(z / std::sqrt(2.0))) * up.data()[i];
    }
    h = h + ref_linear(act, L.wd);
  }
  const Matrix out = ref_linear(ref_rms(h, w.output_norm), w.out_proj);
  return out.col(0);
}

Vector ref_attention(const PooledInput& in, const AttentionProbeWeights& w) {
  const auto& cfg = w.config;
  const auto E = Eigen::Index(cfg.embed), H = Eigen::Index(cfg.heads), D = E / H;
  const std::size_t nl = in.layers.size();
  std::vector<Matrix> normed;
  for (std::size_t l = 0; l < nl; ++l) normed.push_back(ref_rms(in.layers[l], w.wnorms[l]));
  // rows ordered (token, layer)
  std::vector<Eigen::Index> src_layer, src_tok;
  for (Eigen::Index t = 0; t < in.layers[0].rows(); ++t)
    for (std::size_t l = 0; l < nl; ++l) {
      src_layer.push_back(Eigen::Index(l));
      src_tok.push_back(t);
    }
  const auto n = Eigen::Index(src_tok.size());
  Matrix z(n, in.layers[0].cols());
  for (Eigen::Index r = 0; r < n; ++r) z.row(r) = normed[std::size_t(src_layer[std::size_t(r)])].row(src_tok[std::size_t(r)]);
  const Matrix kv = ref_linear(z, w.wkv);
  Vector pooled = Vector::Zero(E);
  for (Eigen::Index hd = 0; hd < H; ++hd) {
    std::vector<double> s(static_cast<std::size_t>(n));
    double mx = -1e300, tot = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      double dot = 0;
      for (Eigen::Index c = 0; c < D; ++c) dot += kv(r, hd * D + c) * w.query(hd, c);
      s[std::size_t(r)] = dot / std::sqrt(double(D));
      mx = std::max(mx, s[std::size_t(r)]);
    }
    for (auto& v : s) tot += (v = std::exp(v - mx));
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < D; ++c) pooled(hd * D + c) += s[std::size_t(r)] / tot * kv(r, E + hd * D + c);
  }
  return w.wout * pooled;
}

TransformerProbeConfig small_transformer(std::size_t layers = 2) {
  TransformerProbeConfig cfg;
  cfg.input_dim = 6;
  cfg.layers = layers;
  cfg.embed = 8;
  cfg.heads = 2;
  cfg.mlp = 12;
  cfg.window = 5;
  return cfg;
}

AttentionProbeConfig small_attention(std::size_t classes, std::size_t layers) {
  AttentionProbeConfig cfg;
  cfg.input_dim = 6;
  cfg.embed = 8;
  cfg.heads = 2;
  cfg.classes = classes;
  cfg.input_layers.clear();
  for (std::size_t l = 0; l < layers; ++l) cfg.input_layers.push_back(int(10 * (l + 1)));
  return cfg;
}

PooledInput random_input(const AttentionProbeConfig& cfg, Eigen::Index tokens, Rng& rng) {
  PooledInput in;
  for (std::size_t l = 0; l < cfg.input_layers.size(); ++l) in.layers.push_back(random_matrix(tokens, Eigen::Index(cfg.input_dim), rng));
  return in;
}

}  // namespace

TEST_CASE("transformer probe gradients match finite differences") {
  Rng rng(11);
  auto cfg = small_transformer(2);
  auto w = TransformerProbeWeights::init(cfg, 3);
  randomize(w, rng, 0.4);
  TokenExample ex{random_matrix(8, 6, rng), {0, 1, 1, 0, 1, 0, 0, 1}};
  const std::vector<double> cw{1.0, 2.0};
  auto g = TransformerProbeWeights::zeros(cfg);
  transformer_loss(ex, w, cw, &g, 1.0);
  auto report = kernel::grad_check([&] { return transformer_loss(ex, w, cw, nullptr, 0.0).weighted_loss; }, refs(w, g), 1e-4);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("attention probe gradients match finite differences") {
  Rng rng(12);
  for (std::size_t classes : {2, 3, 5}) {
    for (std::size_t layers : {1, 2}) {
      auto cfg = small_attention(classes, layers);
      auto w = AttentionProbeWeights::init(cfg, 5);
      randomize(w, rng, 0.5);
      PooledExample ex{random_input(cfg, 4, rng), int(classes - 1)};
      const auto cw = class_weights(TrainRecipe{.positive_class = 1, .positive_weight = 2.0}, classes);
      auto g = AttentionProbeWeights::zeros(cfg);
      attention_loss(ex, w, cw, &g, 1.0);
      auto report = kernel::grad_check([&] { return attention_loss(ex, w, cw, nullptr, 0.0).weighted_loss; }, refs(w, g), 1e-4);
      CHECK(report.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("transformer forward matches straight-line reference") {
  Rng rng(13);
  auto cfg = small_transformer(2);
  auto w = TransformerProbeWeights::init(cfg, 9);
  randomize(w, rng, 0.5);
  const Matrix x = random_matrix(12, 6, rng);
  const Vector got = transformer_forward(x, w);
  const Vector want = ref_transformer(x, w);
  REQUIRE(got.size() == 12);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("transformer forward is causal bit-exactly and zero weights give zero logits") {
  Rng rng(14);
  auto cfg = small_transformer(2);
  auto w = TransformerProbeWeights::init(cfg, 4);
  Matrix x = random_matrix(10, 6, rng);
  const Vector before = transformer_forward(x, w);
  x.row(9) = random_matrix(1, 6, rng);
  const Vector after = transformer_forward(x, w);
  for (int t = 0; t < 9; ++t) CHECK(before(t) == after(t));

  const auto zero = TransformerProbeWeights::zeros(cfg);
  const Vector z = transformer_forward(x, zero);
  CHECK(z.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention forward matches naive reference and ignores masked tokens") {
  Rng rng(15);
  auto cfg = small_attention(5, 2);
  auto w = AttentionProbeWeights::init(cfg, 8);
  randomize(w, rng, 0.5);
  const auto in = random_input(cfg, 5, rng);
  const auto out = attention_forward(in, w);
  CHECK((out.logits - ref_attention(in, w)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(out.probs.sum() == doctest::Approx(1.0).epsilon(1e-12));

  world::ActivationSheet sheet;
  sheet.layer_ids = cfg.input_layers;
  for (int l = 0; l < 2; ++l) sheet.layers.push_back(random_matrix(7, 6, rng));
  const std::vector<bool> mask{false, true, true, false, true, false, false};
  const auto a = attention_probe_forward(sheet, mask, w);
  auto other = sheet;
  other.layers[0].row(0) = random_matrix(1, 6, rng);
  other.layers[1].row(6) = other.layers[1].row(5);
  const auto b = attention_probe_forward(other, mask, w);
  CHECK((a.probs - b.probs).cwiseAbs().maxCoeff() == 0.0);
  const std::vector<bool> none(7, false);
  CHECK_THROWS(attention_probe_forward(sheet, none, w));
}

TEST_CASE("single pooled token returns its value projection") {
  Rng rng(16);
  auto cfg = small_attention(2, 1);
  auto w = AttentionProbeWeights::init(cfg, 1);
  const auto in = random_input(cfg, 1, rng);
  const auto out = attention_forward(in, w);
  const Matrix z = kernel::rms_norm(in.layers[0], w.wnorms[0]);
  const Vector value = w.wkv.bottomRows(8) * z.row(0).transpose();
  CHECK(out.logits(0) == doctest::Approx((w.wout * value)(0)).epsilon(1e-12));
}

TEST_CASE("segment follows the join rule") {
  const std::vector<double> p{0, 1, 1, 0, 1};
  const auto s = segment(p, 0.5);
  REQUIRE(s.size() == 2);
  CHECK(s[0] == Span(0, 3));
  CHECK(s[1] == Span(3, 5));
  CHECK(segment(std::vector<double>(4, 0.0), 0.5).size() == 4);
  const auto all = segment(std::vector<double>(4, 1.0), 0.5);
  REQUIRE(all.size() == 1);
  CHECK(all[0] == Span(0, 4));
  const auto off = segment(p, 0.5, 2);
  REQUIRE(off.size() == 2);
  CHECK(off[0] == Span(2, 3));
}

TEST_CASE("auc agrees with pairwise count") {
  Rng rng(17);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 200; ++i) {
    y.push_back(rng.bernoulli(0.4));
    s.push_back(std::round((rng.uniform() + 0.3 * y.back()) * 20) / 20);  // forces ties
  }
  double wins = 0, pairs = 0;
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 200; ++j)
      if (y[i] && !y[j]) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  CHECK(auc(s, y) == doctest::Approx(wins / pairs).epsilon(1e-12));
  CHECK(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}) == 1.0);
  CHECK_THROWS(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 1}));

  std::vector<double> rs;
  std::vector<int> ry;
  for (int i = 0; i < 10000; ++i) {
    rs.push_back(rng.uniform());
    ry.push_back(rng.bernoulli(0.5));
  }
  CHECK(std::abs(auc(rs, ry) - 0.5) < 0.02);
}

TEST_CASE("calibration bins") {
  const std::vector<double> s{0.05, 0.05, 0.95, 0.95};
  const std::vector<int> y{0, 0, 1, 1};
  const auto c = calibrate(s, y);
  CHECK(c.bins.size() == 10);
  CHECK(c.ece == doctest::Approx(0.05));
  CHECK(c.bins[9].count == 2);
}

TEST_CASE("unit class weights equal the unweighted loss") {
  Rng rng(18);
  auto cfg = small_attention(2, 1);
  auto w = AttentionProbeWeights::init(cfg, 2);
  PooledExample ex{random_input(cfg, 3, rng), 1};
  const std::vector<double> ones{1.0, 1.0};
  const auto out = attention_forward(ex.input, w);
  CHECK(attention_loss(ex, w, ones, nullptr, 0).weighted_loss == doctest::Approx(-std::log(out.probs(1))).epsilon(1e-12));
}

TEST_CASE("training: zero learning rate keeps weights and separable data trains") {
  Rng rng(19);
  auto cfg = small_attention(2, 1);
  cfg.input_dim = 6;
  std::vector<PooledExample> data;
  Vector dir = Vector::Zero(6);
  dir(0) = 1.0;
  for (int i = 0; i < 64; ++i) {
    const int y = i % 2;
    Matrix x = random_matrix(3, 6, rng, 0.3);
    x.col(0).array() += y ? 2.0 : -2.0;
    x.col(1).array() += 1.0;
    data.push_back({PooledInput{{x}}, y});
  }
  TrainRecipe r;
  r.learning_rate = 0.0;
  r.epochs = 2;
  const auto frozen = train_attention(data, cfg, r, 7);
  auto init = AttentionProbeWeights::init(cfg, 7);
  CHECK((frozen.weights.wkv - init.wkv).cwiseAbs().maxCoeff() == 0.0);

  r.learning_rate = 3e-2;
  r.epochs = 8;
  r.weight_decay = 0.0;
  const auto trained = train_attention(data, cfg, r, 7);
  REQUIRE(trained.history.size() == 8);
  for (std::size_t e = 2; e < trained.history.size(); ++e) {
    CHECK(trained.history[e].loss <= trained.history[e - 1].loss + 1e-3);
  }
  CHECK(trained.history.back().loss < trained.history.front().loss);
  CHECK(evaluate_probe(trained.weights, data).auc > 0.99);

  const auto again = train_attention(data, cfg, r, 7);
  CHECK((again.weights.wout - trained.weights.wout).cwiseAbs().maxCoeff() == 0.0);

  std::vector<PooledExample> single(data.begin(), data.begin() + 1);
  CHECK_THROWS(train_attention(single, cfg, r, 7));
}

TEST_CASE("cosine schedule with warmup") {
  TrainRecipe r;
  r.learning_rate = 1.0;
  CHECK(scheduled_lr(r, 0, 100) == doctest::Approx(0.1));
  CHECK(scheduled_lr(r, 9, 100) == doctest::Approx(1.0));
  CHECK(scheduled_lr(r, 10, 100) == doctest::Approx(1.0));
  CHECK(scheduled_lr(r, 55, 100) == doctest::Approx(0.5));
  CHECK(scheduled_lr(r, 100, 100) == doctest::Approx(0.0));
}

TEST_CASE("span f1 counts exact multi-token matches") {
  const std::vector<Span> pred{{0, 1}, {1, 4}, {4, 6}, {6, 9}};
  const std::vector<Span> gold{{1, 4}, {6, 8}};
  const auto f = span_f1(pred, gold);
  CHECK(f.true_positive == 1);
  CHECK(f.predicted == 3);
  CHECK(f.gold == 2);
}
