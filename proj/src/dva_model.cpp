#include "dva/dva_model.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

namespace dva {
namespace {

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

}  // namespace

EmbeddingMatrices base_embeddings(const DvaModel& model) {
  return {model.input_embeddings(), model.output_embeddings()};
}

PhraseEmbeddings encode_phrases(const PhraseTable& table, const DvaModel& model) {
  const auto d = static_cast<Eigen::Index>(model.config().backbone.d_model);
  if (table.empty()) return {Matrix(0, d)};

  std::vector<std::vector<int>> rows;
  rows.reserve(table.size());
  int longest = 0;
  for (const auto& p : table.phrases()) {
    if (static_cast<int>(p.length()) > model.config().max_seq_len) {
      throw std::invalid_argument(fmt::format("phrase '{}' has {} tokens; the phrase encoder accepts at most {}",
                                              p.surface, p.length(), model.config().max_seq_len));
    }
    rows.emplace_back(p.subword_ids.begin(), p.subword_ids.end());
    longest = std::max(longest, static_cast<int>(p.length()));
  }
  const IdBatch batch = IdBatch::right_padded(rows);
  const auto& enc = model.phrase_encoder();
  StackRunner runner(model, enc, batch.batch, batch.time);
  const Matrix hidden = runner.append(batch, model.value(enc.tok_emb));

  Matrix last(static_cast<Eigen::Index>(rows.size()), hidden.cols());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    last.row(static_cast<Eigen::Index>(j)) =
        hidden.row(static_cast<Eigen::Index>(j) * batch.time + static_cast<Eigen::Index>(rows[j].size()) - 1);
  }
  const auto& pr = model.projector();
  Matrix h1 = kernels::gelu(linear(last, model.value(pr.w1), model.value(pr.b1)));
  return {linear(h1, model.value(pr.w2), model.value(pr.b2))};
}

ExpandedEmbeddings expand_embeddings(const EmbeddingMatrices& base, const PhraseEmbeddings& phrases) {
  const auto d = base.input.cols();
  if (base.output.cols() != d || base.output.rows() != base.input.rows()) {
    throw std::invalid_argument("input and output embeddings disagree in shape");
  }
  if (phrases.rows.rows() > 0 && phrases.rows.cols() != d) {
    throw std::invalid_argument(fmt::format("phrase embedding width {} does not match model width {}",
                                            phrases.rows.cols(), d));
  }
  ExpandedEmbeddings out;
  out.vocab_size = static_cast<std::size_t>(base.input.rows());
  const auto v = base.input.rows();
  const auto m = phrases.rows.rows();
  out.input.resize(v + m, d);
  out.output.resize(v + m, d);
  out.input.topRows(v) = base.input;
  out.output.topRows(v) = base.output;
  if (m > 0) {
    out.input.bottomRows(m) = phrases.rows;
    out.output.bottomRows(m) = phrases.rows;
  }
  return out;
}

IdBatch IdBatch::left_padded(std::span<const std::vector<int>> rows) {
  IdBatch b;
  b.batch = static_cast<int>(rows.size());
  for (const auto& r : rows) b.time = std::max(b.time, static_cast<int>(r.size()));
  b.ids.assign(static_cast<std::size_t>(b.batch * b.time), kPadSlot);
  for (int i = 0; i < b.batch; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    const int pad = b.time - static_cast<int>(r.size());
    std::copy(r.begin(), r.end(), b.ids.begin() + i * b.time + pad);
  }
  return b;
}

IdBatch IdBatch::right_padded(std::span<const std::vector<int>> rows) {
  IdBatch b;
  b.batch = static_cast<int>(rows.size());
  for (const auto& r : rows) b.time = std::max(b.time, static_cast<int>(r.size()));
  b.ids.assign(static_cast<std::size_t>(b.batch * b.time), kPadSlot);
  for (int i = 0; i < b.batch; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    std::copy(r.begin(), r.end(), b.ids.begin() + i * b.time);
  }
  return b;
}

StackRunner::StackRunner(const DvaModel& model, const StackParams& stack, int batch, int capacity)
    : model_(&model), stack_(&stack), batch_(batch), capacity_(capacity) {
  if (batch < 1 || capacity < 1) throw std::invalid_argument("StackRunner needs batch >= 1 and capacity >= 1");
  const auto d = model.value(stack.tok_emb).cols();
  next_pos_.assign(static_cast<std::size_t>(batch), 0);
  valid_.assign(static_cast<std::size_t>(batch), std::vector<char>(static_cast<std::size_t>(capacity), 0));
  keys_.assign(stack.layers.size(), std::vector<Matrix>(static_cast<std::size_t>(batch), Matrix::Zero(capacity, d)));
  values_ = keys_;
}

Matrix StackRunner::append(const IdBatch& chunk, const Matrix& token_table) {
  return append(chunk, token_table, Matrix(0, token_table.cols()));
}

Matrix StackRunner::append(const IdBatch& chunk, const Matrix& token_table, const Matrix& extra) {
  if (chunk.batch != batch_) throw std::invalid_argument("chunk batch size does not match the runner");
  const int T = chunk.time;
  if (length_ + T > capacity_) {
    throw std::length_error(fmt::format("timeline of {} slots exceeds runner capacity {}", length_ + T, capacity_));
  }
  const DvaModel& m = *model_;
  const StackParams& s = *stack_;
  const Matrix& pos = m.value(s.pos_emb);
  const auto d = token_table.cols();
  const auto rows = static_cast<Eigen::Index>(batch_) * T;

  Matrix x = Matrix::Zero(rows, d);
  for (int b = 0; b < batch_; ++b) {
    auto& next = next_pos_[static_cast<std::size_t>(b)];
    for (int t = 0; t < T; ++t) {
      const int id = chunk.at(b, t);
      const auto slot = static_cast<std::size_t>(length_ + t);
      if (id == kPadSlot) {
        valid_[static_cast<std::size_t>(b)][slot] = 0;
        continue;
      }
      const auto table_rows = token_table.rows() + extra.rows();
      if (id < 0 || id >= table_rows) {
        throw std::out_of_range(fmt::format("id {} outside the {}-row embedding table", id, table_rows));
      }
      if (next >= pos.rows()) {
        throw std::length_error(fmt::format("sequence exceeds max_seq_len {}", pos.rows()));
      }
      valid_[static_cast<std::size_t>(b)][slot] = 1;
      x.row(static_cast<Eigen::Index>(b) * T + t) =
          (id < token_table.rows() ? token_table.row(id) : extra.row(id - token_table.rows())) + pos.row(next);
      ++next;
    }
  }

  const double lora_scale = m.lora_scale();
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const LayerParams& L = s.layers[l];
    Matrix h = kernels::layer_norm(x, m.value(L.ln1_gain), m.value(L.ln1_bias));
    Matrix q = linear(h, m.value(L.wq), m.value(L.bq));
    Matrix k = linear(h, m.value(L.wk), m.value(L.bk));
    Matrix v = linear(h, m.value(L.wv), m.value(L.bv));
    if (L.lora_q) q += (h * m.value(L.lora_q->down)) * m.value(L.lora_q->up) * lora_scale;
    if (L.lora_v) v += (h * m.value(L.lora_v->down)) * m.value(L.lora_v->up) * lora_scale;

    Matrix attn(rows, d);
    Matrix out;
    for (int b = 0; b < batch_; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * T;
      auto& kc = keys_[l][static_cast<std::size_t>(b)];
      auto& vc = values_[l][static_cast<std::size_t>(b)];
      kc.middleRows(length_, T) = k.middleRows(r0, T);
      vc.middleRows(length_, T) = v.middleRows(r0, T);
      kernels::attend(q.middleRows(r0, T), kc, vc, s.n_heads, length_, valid_[static_cast<std::size_t>(b)], out);
      attn.middleRows(r0, T) = out;
    }
    x += linear(attn, m.value(L.wo), m.value(L.bo));
    Matrix h2 = kernels::layer_norm(x, m.value(L.ln2_gain), m.value(L.ln2_bias));
    x += linear(kernels::gelu(linear(h2, m.value(L.w_fc), m.value(L.b_fc))), m.value(L.w_proj), m.value(L.b_proj));
  }
  length_ += T;
  return kernels::layer_norm(x, m.value(s.lnf_gain), m.value(s.lnf_bias));
}

Logits forward(const DvaModel& model, const ExpandedEmbeddings& emb, const IdBatch& ids) {
  for (int id : ids.ids) {
    if (id != kPadSlot && (id < 0 || static_cast<std::size_t>(id) >= emb.total_ids())) {
      throw std::out_of_range(fmt::format("id {} outside the expanded vocabulary of {}", id, emb.total_ids()));
    }
  }
  StackRunner runner(model, model.backbone(), ids.batch, std::max(ids.time, 1));
  const Matrix hidden = runner.append(ids, emb.input);
  Logits out;
  out.batch = ids.batch;
  out.time = ids.time;
  out.values = hidden * emb.output.transpose();
  return out;
}

Matrix backbone_hidden(const DvaModel& model, const Matrix& token_table, std::span<const int> ids) {
  std::vector<std::vector<int>> rows{std::vector<int>(ids.begin(), ids.end())};
  const IdBatch batch = IdBatch::right_padded(rows);
  StackRunner runner(model, model.backbone(), 1, std::max(batch.time, 1));
  return runner.append(batch, token_table);
}

Eigen::RowVectorXd output_logits(const Eigen::RowVectorXd& hidden, const ExpandedEmbeddings& emb) {
  return hidden * emb.output.transpose();
}

std::vector<double> next_distribution(const StepState& state, const ExpandedEmbeddings& emb, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  Eigen::RowVectorXd z = output_logits(state.hidden, emb) / temperature;
  return kernels::softmax(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
}

}  // namespace dva
