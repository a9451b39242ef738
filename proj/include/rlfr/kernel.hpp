#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

// Dense kernels used by the probes. Every differentiable op has a matching
// *_backward that maps an upstream gradient to input/parameter gradients.
namespace rlfr::kernel {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kRmsEps = 1e-6;

double sigmoid(double x);
double log_sigmoid(double x);
double gelu(double x);
double gelu_grad(double x);

// Row-wise y = w * x / sqrt(mean(x^2) + eps).
Matrix rms_norm(const Matrix& x, const Vector& w);
Vector rms_norm(const Vector& x, const Vector& w);
struct RmsNormGrad {
  Matrix dx;
  Vector dw;
};
RmsNormGrad rms_norm_backward(const Matrix& x, const Vector& w, const Matrix& dy);

// Numerically stable softmax per row; masked entries get exactly zero.
Matrix softmax_rows(const Matrix& logits);
Matrix softmax_rows(const Matrix& logits, const Mask& mask);
Vector softmax(const Vector& logits);

// GeGLU: (gelu(x Wg^T) * (x Wu^T)) Wd^T.
struct GegluCache {
  Matrix up;    // x Wu^T
  Matrix gate;  // x Wg^T
  Matrix act;   // gelu(gate) * up
};
Matrix geglu(const Matrix& x, const Matrix& wu, const Matrix& wg, const Matrix& wd,
             GegluCache* cache = nullptr);
struct GegluGrad {
  Matrix dx, dwu, dwg, dwd;
};
GegluGrad geglu_backward(const Matrix& x, const Matrix& wu, const Matrix& wg, const Matrix& wd,
                         const GegluCache& cache, const Matrix& dy);

// Rotary position embedding over interleaved pairs (2i, 2i+1) with
// angle pos * theta^(-2i/head_dim).
class RopeTable {
 public:
  RopeTable(std::size_t max_positions, std::size_t head_dim, double theta);
  std::size_t head_dim() const { return head_dim_; }
  std::size_t max_positions() const { return cos_.rows(); }
  double cos(std::size_t pos, std::size_t pair) const { return cos_(pos, pair); }
  double sin(std::size_t pos, std::size_t pair) const { return sin_(pos, pair); }

 private:
  std::size_t head_dim_;
  Matrix cos_, sin_;
};

// Rotates rows of a (T x head_dim) block in place. `inverse` applies the
// transpose rotation, which is also the backward map.
void rope_rotate(Eigen::Ref<Matrix> x, const RopeTable& table, std::span<const std::size_t> positions,
                 bool inverse = false);
struct RopePair {
  Matrix q, k;
};
RopePair rope_apply(const Matrix& q, const Matrix& k, const RopeTable& table,
                    std::span<const std::size_t> positions);

// Masked scaled dot-product attention for one head.
// q: T x D, k: S x D, v: S x Dv, mask: T x S (true = attend).
struct AttentionCache {
  Matrix probs;  // T x S
};
Matrix masked_attention(const Matrix& q, const Matrix& k, const Matrix& v, const Mask& mask,
                        double scale, AttentionCache* cache = nullptr);
struct AttentionGrad {
  Matrix dq, dk, dv;
};
AttentionGrad masked_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                        double scale, const AttentionCache& cache,
                                        const Matrix& dout);

// Causal mask where query i sees keys in (i - window, i].
Mask causal_window_mask(std::size_t tokens, std::size_t window);

// ---- gradient checking ------------------------------------------------------

struct ParamRef {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;  // reverse-mode gradient at `values`
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckStep = 1e-5;

// Central differences with step 1e-5 compared against the supplied analytic
// gradients; relative error uses a max(1, |analytic|) denominator. `loss`
// reads the (temporarily perturbed) parameter values. Throws on non-finite
// loss values.
GradCheckReport grad_check(const std::function<double()>& loss, std::vector<ParamRef> params,
                           double tol);

}  // namespace rlfr::kernel
