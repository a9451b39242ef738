#include "rlfr/kernel.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace rlfr::kernel {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix rms_norm(const Matrix& x, const Vector& w) {
  if (x.cols() != w.size()) throw std::invalid_argument("rms_norm: length mismatch");
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double inv = 1.0 / std::sqrt(x.row(r).squaredNorm() / static_cast<double>(x.cols()) + kRmsEps);
    y.row(r) = x.row(r).cwiseProduct(w.transpose()) * inv;
  }
  return y;
}

Vector rms_norm(const Vector& x, const Vector& w) {
  if (x.size() != w.size()) throw std::invalid_argument("rms_norm: length mismatch");
  const double inv = 1.0 / std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + kRmsEps);
  return x.cwiseProduct(w) * inv;
}

RmsNormGrad rms_norm_backward(const Matrix& x, const Vector& w, const Matrix& dy) {
  const double n = static_cast<double>(x.cols());
  RmsNormGrad g{Matrix(x.rows(), x.cols()), Vector::Zero(w.size())};
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double inv = 1.0 / std::sqrt(x.row(r).squaredNorm() / n + kRmsEps);
    const RowVector dyw = dy.row(r).cwiseProduct(w.transpose());
    const double dot = dyw.dot(x.row(r));
    g.dx.row(r) = dyw * inv - x.row(r) * (inv * inv * inv * dot / n);
    g.dw += (dy.row(r).cwiseProduct(x.row(r)) * inv).transpose();
  }
  return g;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits, const Mask& mask) {
  if (mask.rows() != logits.rows() || mask.cols() != logits.cols()) {
    throw std::invalid_argument("softmax_rows: mask shape mismatch");
  }
  Matrix out = Matrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (mask(r, c)) m = std::max(m, logits(r, c));
    }
    if (!std::isfinite(m)) throw std::invalid_argument("softmax_rows: fully masked row");
    double total = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (mask(r, c)) {
        out(r, c) = std::exp(logits(r, c) - m);
        total += out(r, c);
      }
    }
    out.row(r) /= total;
  }
  return out;
}

Vector softmax(const Vector& logits) {
  Vector out = (logits.array() - logits.maxCoeff()).exp();
  return out / out.sum();
}

Matrix geglu(const Matrix& x, const Matrix& wu, const Matrix& wg, const Matrix& wd,
             GegluCache* cache) {
  Matrix up = x * wu.transpose();
  Matrix gate = x * wg.transpose();
  Matrix act = gate.unaryExpr([](double v) { return gelu(v); }).cwiseProduct(up);
  Matrix y = act * wd.transpose();
  if (cache) *cache = {std::move(up), std::move(gate), std::move(act)};
  return y;
}

GegluGrad geglu_backward(const Matrix& x, const Matrix& wu, const Matrix& wg, const Matrix& wd,
                         const GegluCache& cache, const Matrix& dy) {
  GegluGrad g;
  g.dwd = dy.transpose() * cache.act;
  const Matrix dact = dy * wd;
  const Matrix dup = dact.cwiseProduct(cache.gate.unaryExpr([](double v) { return gelu(v); }));
  const Matrix dgate =
      dact.cwiseProduct(cache.up).cwiseProduct(cache.gate.unaryExpr([](double v) { return gelu_grad(v); }));
  g.dwu = dup.transpose() * x;
  g.dwg = dgate.transpose() * x;
  g.dx = dup * wu + dgate * wg;
  return g;
}

RopeTable::RopeTable(std::size_t max_positions, std::size_t head_dim, double theta)
    : head_dim_(head_dim) {
  if (head_dim % 2 != 0) throw std::invalid_argument("RopeTable: head dim must be even");
  const std::size_t pairs = head_dim / 2;
  cos_.resize(static_cast<Eigen::Index>(max_positions), static_cast<Eigen::Index>(pairs));
  sin_.resize(static_cast<Eigen::Index>(max_positions), static_cast<Eigen::Index>(pairs));
  for (std::size_t p = 0; p < max_positions; ++p) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cos_(p, i) = std::cos(angle);
      sin_(p, i) = std::sin(angle);
    }
  }
}

void rope_rotate(Eigen::Ref<Matrix> x, const RopeTable& table, std::span<const std::size_t> positions,
                 bool inverse) {
  if (static_cast<std::size_t>(x.cols()) != table.head_dim()) {
    throw std::invalid_argument("rope: head dim mismatch");
  }
  if (static_cast<std::size_t>(x.rows()) != positions.size()) {
    throw std::invalid_argument("rope: position count mismatch");
  }
  const double sign = inverse ? -1.0 : 1.0;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const std::size_t pos = positions[static_cast<std::size_t>(t)];
    if (pos >= table.max_positions()) throw std::out_of_range("rope: position beyond table");
    for (std::size_t i = 0; i < table.head_dim() / 2; ++i) {
      const double c = table.cos(pos, i);
      const double s = sign * table.sin(pos, i);
      const double a = x(t, 2 * i), b = x(t, 2 * i + 1);
      x(t, 2 * i) = a * c - b * s;
      x(t, 2 * i + 1) = a * s + b * c;
    }
  }
}

RopePair rope_apply(const Matrix& q, const Matrix& k, const RopeTable& table,
                    std::span<const std::size_t> positions) {
  if (q.cols() % 2 != 0 || k.cols() % 2 != 0) throw std::invalid_argument("rope: odd head dim");
  RopePair out{q, k};
  rope_rotate(out.q, table, positions);
  rope_rotate(out.k, table, positions);
  return out;
}

Matrix masked_attention(const Matrix& q, const Matrix& k, const Matrix& v, const Mask& mask,
                        double scale, AttentionCache* cache) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw std::invalid_argument("masked_attention: shape mismatch");
  }
  const Matrix logits = (q * k.transpose()) * scale;
  Matrix probs = softmax_rows(logits, mask);
  Matrix out = probs * v;
  if (cache) cache->probs = std::move(probs);
  return out;
}

AttentionGrad masked_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                        double scale, const AttentionCache& cache,
                                        const Matrix& dout) {
  const Matrix& p = cache.probs;
  AttentionGrad g;
  g.dv = p.transpose() * dout;
  const Matrix dp = dout * v.transpose();
  Matrix ds(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double row_dot = dp.row(r).dot(p.row(r));
    ds.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - row_dot).matrix());
  }
  g.dq = (ds * k) * scale;
  g.dk = (ds.transpose() * q) * scale;
  return g;
}

Mask causal_window_mask(std::size_t tokens, std::size_t window) {
  const auto n = static_cast<Eigen::Index>(tokens);
  Mask m = Mask::Constant(n, n, false);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      if (static_cast<std::size_t>(i - j) < window) m(i, j) = true;
    }
  }
  return m;
}

GradCheckReport grad_check(const std::function<double()>& loss, std::vector<ParamRef> params,
                           double tol) {
  GradCheckReport report;
  report.tolerance = tol;
  const double base = loss();
  if (!std::isfinite(base)) throw std::domain_error("grad_check: non-finite loss");
  for (auto& p : params) {
    if (p.values.size() != p.analytic.size()) {
      throw std::invalid_argument("grad_check: gradient size mismatch for " + p.name);
    }
    GradCheckEntry entry{p.name, 0.0};
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double saved = p.values[i];
      p.values[i] = saved + kGradCheckStep;
      const double up = loss();
      p.values[i] = saved - kGradCheckStep;
      const double down = loss();
      p.values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::domain_error("grad_check: non-finite loss at " + p.name);
      }
      const double numeric = (up - down) / (2.0 * kGradCheckStep);
      const double rel = std::abs(numeric - p.analytic[i]) / std::max(1.0, std::abs(p.analytic[i]));
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace rlfr::kernel
