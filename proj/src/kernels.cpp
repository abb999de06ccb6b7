#include "dva/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dva::kernels {
namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCoeff = 0.044715;

// tanh(u) = 1 - 2 / (exp(2u) + 1); matches the vectorized matrix form below.
double tanh_via_exp(double u) { return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0); }
// Eight batch rows side by side, one per lane.
typedef double Lanes __attribute__((vector_size(64)));
constexpr int kLanes = 8;
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + tanh_via_exp(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
}

double gelu_derivative(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  const double t = tanh_via_exp(inner);
  const double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
}

Matrix gelu(const Matrix& x) {
  const auto a = x.array();
  const auto inner = kSqrt2OverPi * (a + kGeluCoeff * a * a * a);
  const auto t = 1.0 - 2.0 / ((2.0 * inner).exp() + 1.0);
  return (0.5 * a * (1.0 + t)).matrix();
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* normalized,
                  std::vector<double>* inv_std) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  Matrix y(rows, cols);
  if (normalized) normalized->resize(rows, cols);
  if (inv_std) inv_std->assign(static_cast<std::size_t>(rows), 0.0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double n = (x(r, c) - mean) * rstd;
      if (normalized) (*normalized)(r, c) = n;
      y(r, c) = n * gain(0, c) + bias(0, c);
    }
    if (inv_std) (*inv_std)[static_cast<std::size_t>(r)] = rstd;
  }
  return y;
}

void attend(const Matrix& q, const Matrix& k, const Matrix& v, int n_heads, Eigen::Index query_base,
            std::span<const char> key_valid, Matrix& out, std::vector<Matrix>* probs) {
  const Eigen::Index tq = q.rows();
  const Eigen::Index d = q.cols();
  const Eigen::Index hs = d / n_heads;
  const Eigen::Index tk = query_base + tq;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
  out.setZero(tq, d);
  if (probs) probs->assign(static_cast<std::size_t>(n_heads), Matrix::Zero(tq, tk));

  Eigen::VectorXd scores(tk);
  for (int h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = h * hs;
    for (Eigen::Index t = 0; t < tq; ++t) {
      const Eigen::Index n = query_base + t + 1;
      auto sc = scores.head(n);
      sc.noalias() = k.block(0, c0, n, hs) * q.row(t).segment(c0, hs).transpose();
      sc *= scale;
      double max_score = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (key_valid[static_cast<std::size_t>(j)]) max_score = std::max(max_score, sc(j));
      }
      if (max_score == -std::numeric_limits<double>::infinity()) continue;
      sc = (sc.array() - max_score).exp();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!key_valid[static_cast<std::size_t>(j)]) sc(j) = 0.0;
      }
      sc /= sc.sum();
      if (probs) (*probs)[static_cast<std::size_t>(h)].row(t).head(n) = sc.transpose();
      out.row(t).segment(c0, hs).noalias() = sc.transpose() * v.block(0, c0, n, hs);
    }
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double l : logits) max_logit = std::max(max_logit, l);
  std::vector<double> p(logits.size(), 0.0);
  if (max_logit == -std::numeric_limits<double>::infinity()) return p;
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == -std::numeric_limits<double>::infinity()) continue;
    p[i] = std::exp(logits[i] - max_logit);
    denom += p[i];
  }
  for (auto& x : p) x /= denom;
  return p;
}

void row_dots(const Matrix& hidden, const Matrix& table, Matrix& out, Eigen::Index col_offset) {
  const Eigen::Index d = table.cols(), V = table.rows();
  if (hidden.cols() != d) throw std::invalid_argument("row_dots: width mismatch");
  if (out.rows() != hidden.rows() || out.cols() < col_offset + V) throw std::invalid_argument("row_dots: output too small");
  // reused across calls: a fresh buffer this size is page-faulted in every time
  thread_local std::vector<Lanes> h, acc;
  h.resize(static_cast<std::size_t>(d));
  acc.resize(static_cast<std::size_t>(V));
  for (Eigen::Index b0 = 0; b0 < hidden.rows(); b0 += kLanes) {
    const Eigen::Index nb = std::min<Eigen::Index>(kLanes, hidden.rows() - b0);
    for (Eigen::Index k = 0; k < d; ++k) {
      Lanes v{};
      for (Eigen::Index b = 0; b < nb; ++b) v[b] = hidden(b0 + b, k);
      h[static_cast<std::size_t>(k)] = v;
    }
    const double* t = table.data();
    Eigen::Index r = 0;
    // eight table rows per pass keep eight independent accumulation chains
    for (; r + 8 <= V; r += 8) {
      const double* p = t + r * d;
      Lanes a0{}, a1{}, a2{}, a3{}, a4{}, a5{}, a6{}, a7{};
      for (Eigen::Index k = 0; k < d; ++k) {
        const Lanes x = h[static_cast<std::size_t>(k)];
        a0 += p[k] * x;
        a1 += p[d + k] * x;
        a2 += p[2 * d + k] * x;
        a3 += p[3 * d + k] * x;
        a4 += p[4 * d + k] * x;
        a5 += p[5 * d + k] * x;
        a6 += p[6 * d + k] * x;
        a7 += p[7 * d + k] * x;
      }
      Lanes* o = acc.data() + r;
      o[0] = a0, o[1] = a1, o[2] = a2, o[3] = a3, o[4] = a4, o[5] = a5, o[6] = a6, o[7] = a7;
    }
    for (; r < V; ++r) {
      Lanes a{};
      for (Eigen::Index k = 0; k < d; ++k) a += t[r * d + k] * h[static_cast<std::size_t>(k)];
      acc[static_cast<std::size_t>(r)] = a;
    }
    for (Eigen::Index b = 0; b < nb; ++b) {
      double* row = out.row(b0 + b).data() + col_offset;
      for (Eigen::Index i = 0; i < V; ++i) row[i] = acc[static_cast<std::size_t>(i)][b];
    }
  }
}

}  // namespace dva::kernels
