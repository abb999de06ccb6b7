#include "dva/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace dva::ag {

const Matrix& Var::value() const { return tape->value(*this); }
bool Var::requires_grad() const { return tape->requires_grad(*this); }

Var Tape::push(Matrix value, bool requires_grad, std::function<void(const Matrix&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(const Matrix& value, Matrix* grad_sink) {
  Var v = push(value, grad_sink != nullptr, [](const Matrix&) {});
  nodes_.back().sink = grad_sink;
  return v;
}

void Tape::accumulate(Var v, const Matrix& g) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::accumulate_rows(Var v, std::span<const int> rows, const Matrix& g) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) n.grad.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw std::invalid_argument("backward() needs a scalar loss");
  if (!requires_grad(loss)) return;
  nodes_[static_cast<std::size_t>(loss.id)].grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    // copy: backprop may append to siblings' grads but never to this node
    const Matrix g = n.grad;
    if (n.sink) *n.sink += g;
    if (n.backprop) n.backprop(g);
  }
}

Var matmul(Var a, Var b) {
  Tape* t = a.tape;
  return t->push(a.value() * b.value(), a.requires_grad() || b.requires_grad(), [t, a, b](const Matrix& g) {
    if (a.requires_grad()) t->accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t->accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_bt(Var a, Var b) {
  Tape* t = a.tape;
  return t->push(a.value() * b.value().transpose(), a.requires_grad() || b.requires_grad(),
                 [t, a, b](const Matrix& g) {
                   if (a.requires_grad()) t->accumulate(a, g * b.value());
                   if (b.requires_grad()) t->accumulate(b, g.transpose() * a.value());
                 });
}

Var add(Var a, Var b) {
  Tape* t = a.tape;
  return t->push(a.value() + b.value(), a.requires_grad() || b.requires_grad(), [t, a, b](const Matrix& g) {
    t->accumulate(a, g);
    t->accumulate(b, g);
  });
}

Var add_row(Var a, Var row) {
  Tape* t = a.tape;
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t->push(std::move(out), a.requires_grad() || row.requires_grad(), [t, a, row](const Matrix& g) {
    t->accumulate(a, g);
    if (row.requires_grad()) t->accumulate(row, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tape* t = a.tape;
  return t->push(a.value() * s, a.requires_grad(), [t, a, s](const Matrix& g) { t->accumulate(a, g * s); });
}

Var gelu(Var a) {
  Tape* t = a.tape;
  return t->push(kernels::gelu(a.value()), a.requires_grad(), [t, a](const Matrix& g) {
    Matrix d = a.value().unaryExpr([](double x) { return kernels::gelu_derivative(x); });
    t->accumulate(a, g.cwiseProduct(d));
  });
}

Var layer_norm(Var x, Var gain, Var bias) {
  Tape* t = x.tape;
  Matrix normalized;
  std::vector<double> inv_std;
  Matrix y = kernels::layer_norm(x.value(), gain.value(), bias.value(), &normalized, &inv_std);
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return t->push(std::move(y), rg,
                 [t, x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](const Matrix& g) {
                   if (gain.requires_grad()) t->accumulate(gain, g.cwiseProduct(normalized).colwise().sum());
                   if (bias.requires_grad()) t->accumulate(bias, g.colwise().sum());
                   if (!x.requires_grad()) return;
                   const auto n = static_cast<double>(g.cols());
                   Matrix dx(g.rows(), g.cols());
                   for (Eigen::Index r = 0; r < g.rows(); ++r) {
                     Eigen::RowVectorXd dn = g.row(r).cwiseProduct(gain.value().row(0));
                     const double mean_dn = dn.sum() / n;
                     const double mean_dn_n = dn.dot(normalized.row(r)) / n;
                     dx.row(r) = (dn.array() - mean_dn - normalized.row(r).array() * mean_dn_n) *
                                 inv_std[static_cast<std::size_t>(r)];
                   }
                   t->accumulate(x, dx);
                 });
}

Var gather_rows(Var table, std::vector<int> rows) {
  Tape* t = table.tape;
  const Matrix& src = table.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows()) throw std::out_of_range("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  }
  return t->push(std::move(out), table.requires_grad(),
                 [t, table, rows = std::move(rows)](const Matrix& g) { t->accumulate_rows(table, rows, g); });
}

Var select_rows(Var a, std::vector<int> rows) { return gather_rows(a, std::move(rows)); }

Var concat_rows(Var a, Var b) {
  Tape* t = a.tape;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (bv.rows() > 0 && av.cols() != bv.cols()) throw std::invalid_argument("concat_rows: width mismatch");
  Matrix out(av.rows() + bv.rows(), av.cols());
  out.topRows(av.rows()) = av;
  if (bv.rows() > 0) out.bottomRows(bv.rows()) = bv;
  const auto split = av.rows();
  return t->push(std::move(out), a.requires_grad() || b.requires_grad(), [t, a, b, split](const Matrix& g) {
    if (a.requires_grad()) t->accumulate(a, g.topRows(split));
    if (b.requires_grad() && g.rows() > split) t->accumulate(b, g.bottomRows(g.rows() - split));
  });
}

Var causal_attention(Var q, Var k, Var v, AttentionLayout layout) {
  Tape* t = q.tape;
  const int B = layout.batch;
  const int T = layout.time;
  const Eigen::Index d = q.cols();
  Matrix out(static_cast<Eigen::Index>(B) * T, d);
  std::vector<std::vector<Matrix>> probs(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b) * T;
    Matrix qb = q.value().middleRows(r0, T);
    Matrix kb = k.value().middleRows(r0, T);
    Matrix vb = v.value().middleRows(r0, T);
    Matrix ob;
    std::span<const char> valid(layout.key_valid.data() + r0, static_cast<std::size_t>(T));
    kernels::attend(qb, kb, vb, layout.n_heads, 0, valid, ob, &probs[static_cast<std::size_t>(b)]);
    out.middleRows(r0, T) = ob;
  }
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return t->push(std::move(out), rg, [t, q, k, v, B, T, nh = layout.n_heads, probs = std::move(probs)](const Matrix& g) {
    const Eigen::Index d = q.cols();
    const Eigen::Index hs = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
    Matrix dq = Matrix::Zero(q.rows(), d), dk = Matrix::Zero(q.rows(), d), dv = Matrix::Zero(q.rows(), d);
    for (int b = 0; b < B; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * T;
      for (int h = 0; h < nh; ++h) {
        const Matrix& p = probs[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)];
        const auto c0 = static_cast<Eigen::Index>(h) * hs;
        Matrix go = g.block(r0, c0, T, hs);
        Matrix qh = q.value().block(r0, c0, T, hs);
        Matrix kh = k.value().block(r0, c0, T, hs);
        Matrix vh = v.value().block(r0, c0, T, hs);
        Matrix dp = go * vh.transpose();
        Matrix ds(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
          const double row_dot = dp.row(i).dot(p.row(i));
          ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - row_dot).matrix());
        }
        dq.block(r0, c0, T, hs) += ds * kh * scale;
        dk.block(r0, c0, T, hs) += ds.transpose() * qh * scale;
        dv.block(r0, c0, T, hs) += p.transpose() * go;
      }
    }
    t->accumulate(q, dq);
    t->accumulate(k, dk);
    t->accumulate(v, dv);
  });
}

Var cross_entropy(Var logits, std::vector<int> targets) {
  Tape* t = logits.tape;
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) {
    throw std::invalid_argument("cross_entropy: target count does not match logits rows");
  }
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  int count = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0) continue;
    if (y >= z.cols()) throw std::out_of_range("cross_entropy: target id out of range");
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    total += lse - z(r, y);
    probs.row(r) = (z.row(r).array() - lse).exp();
    ++count;
  }
  Matrix loss(1, 1);
  loss(0, 0) = count ? total / count : 0.0;
  return t->push(std::move(loss), logits.requires_grad(),
                 [t, logits, targets = std::move(targets), probs = std::move(probs), count](const Matrix& g) {
                   Matrix dz = Matrix::Zero(probs.rows(), probs.cols());
                   if (count == 0) return;
                   const double w = g(0, 0) / count;
                   for (Eigen::Index r = 0; r < dz.rows(); ++r) {
                     const int y = targets[static_cast<std::size_t>(r)];
                     if (y < 0) continue;
                     dz.row(r) = probs.row(r) * w;
                     dz(r, y) -= w;
                   }
                   t->accumulate(logits, dz);
                 });
}

}  // namespace dva::ag
