#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dva/kernels.hpp"

namespace dva::ag {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape over dense row-major matrices. Nodes are appended in
/// evaluation order; backward() walks them in reverse.
class Tape {
 public:
  Var constant(Matrix value);
  // Leaf whose gradient is accumulated into `*grad_sink` by backward();
  // a null sink makes it a constant.
  Var leaf(const Matrix& value, Matrix* grad_sink);

  // `loss` must be 1x1.
  void backward(Var loss);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var push(Matrix value, bool requires_grad, std::function<void(const Matrix& grad)> backprop);
  void accumulate(Var v, const Matrix& g);
  void accumulate_rows(Var v, std::span<const int> rows, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Matrix* sink = nullptr;
    std::function<void(const Matrix&)> backprop;
  };
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);     // a * b
Var matmul_bt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
Var scale(Var a, double s);
Var gelu(Var a);
Var layer_norm(Var x, Var gain, Var bias);
Var gather_rows(Var table, std::vector<int> rows);
Var select_rows(Var a, std::vector<int> rows);
Var concat_rows(Var a, Var b);

struct AttentionLayout {
  int batch = 1;
  int time = 1;
  int n_heads = 1;
  std::vector<char> key_valid;  // batch * time
};

// Causal multi-head attention on (batch*time) x d projections.
Var causal_attention(Var q, Var k, Var v, AttentionLayout layout);

// Mean cross-entropy over rows whose target is >= 0; returns 1x1.
Var cross_entropy(Var logits, std::vector<int> targets);

}  // namespace dva::ag
