#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace dva {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace kernels {

inline constexpr double kLayerNormEps = 1e-5;

// tanh-approximated GELU
double gelu(double x);
double gelu_derivative(double x);
Matrix gelu(const Matrix& x);

// Row-wise layer norm. `normalized` and `inv_std` receive the intermediates
// the backward pass needs when non-null.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* normalized = nullptr,
                  std::vector<double>* inv_std = nullptr);

// Multi-head causal attention for one sequence. Query row t sits at timeline
// position `query_base + t` and may attend keys 0..query_base+t whose
// `key_valid` flag is set; a query with no visible key yields zeros.
// `probs`, when given, receives one (queries x keys) matrix per head.
void attend(const Matrix& q, const Matrix& k, const Matrix& v, int n_heads, Eigen::Index query_base,
            std::span<const char> key_valid, Matrix& out, std::vector<Matrix>* probs = nullptr);

// out(b, col_offset + r) = hidden.row(b) . table.row(r). Streams `table` once
// for up to eight rows of `hidden` and sums every entry in the same order
// whatever the batch size, so a row's result does not depend on its batch.
void row_dots(const Matrix& hidden, const Matrix& table, Matrix& out, Eigen::Index col_offset);

// Softmax of a logit row; entries equal to -inf get probability exactly 0.
std::vector<double> softmax(std::span<const double> logits);

}  // namespace kernels
}  // namespace dva
