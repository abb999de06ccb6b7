#pragma once

#include <span>
#include <vector>

#include "dva/dva_tokenizer.hpp"
#include "dva/model.hpp"

namespace dva {

/// The backbone's own |V| x d input and output matrices.
struct EmbeddingMatrices {
  Matrix input;
  Matrix output;
};

/// One row per phrase of a PhraseTable (row j is the embedding of phrase j).
struct PhraseEmbeddings {
  Matrix rows;
  std::size_t size() const { return static_cast<std::size_t>(rows.rows()); }
};

/// Input and output matrices over the unified id space; rows [|V|, |V|+m)
/// are the phrase embeddings in both.
struct ExpandedEmbeddings {
  Matrix input;
  Matrix output;
  std::size_t vocab_size = 0;

  std::size_t total_ids() const { return static_cast<std::size_t>(input.rows()); }
  std::size_t num_phrases() const { return total_ids() - vocab_size; }
};

EmbeddingMatrices base_embeddings(const DvaModel& model);

// Encodes every phrase as the projected last-token state of the phrase
// encoder; phrases run as one right-padded batch.
PhraseEmbeddings encode_phrases(const PhraseTable& table, const DvaModel& model);

ExpandedEmbeddings expand_embeddings(const EmbeddingMatrices& base, const PhraseEmbeddings& phrases);

inline constexpr int kPadSlot = -1;

/// Rectangular batch of ids; kPadSlot marks padding.
struct IdBatch {
  int batch = 0;
  int time = 0;
  std::vector<int> ids;  // batch * time, row-major

  int at(int b, int t) const { return ids[static_cast<std::size_t>(b * time + t)]; }
  static IdBatch left_padded(std::span<const std::vector<int>> rows);
  static IdBatch right_padded(std::span<const std::vector<int>> rows);
};

/// Incremental forward over one transformer stack with a per-sample KV
/// cache. All samples advance in lockstep along a shared timeline; padded
/// slots are never attended to and do not consume positions.
class StackRunner {
 public:
  StackRunner(const DvaModel& model, const StackParams& stack, int batch, int capacity);

  // Runs `chunk` (batch x time) and returns final-norm hidden states,
  // (batch*time) x d. `token_table` supplies input embedding rows.
  Matrix append(const IdBatch& chunk, const Matrix& token_table);
  // Ids past the end of `token_table` index rows of `extra`.
  Matrix append(const IdBatch& chunk, const Matrix& token_table, const Matrix& extra);

  int timeline_length() const { return length_; }
  int valid_tokens(int b) const { return next_pos_[static_cast<std::size_t>(b)]; }
  int batch() const { return batch_; }

 private:
  const DvaModel* model_;
  const StackParams* stack_;
  int batch_;
  int capacity_;
  int length_ = 0;
  std::vector<int> next_pos_;
  std::vector<std::vector<char>> valid_;                 // per sample
  std::vector<std::vector<Matrix>> keys_, values_;       // [layer][sample]
};

/// batch x time x (|V|+m) logits stored as (batch*time) rows.
struct Logits {
  int batch = 0;
  int time = 0;
  Matrix values;

  auto row(int b, int t) const { return values.row(static_cast<Eigen::Index>(b) * time + t); }
};

// Full forward of the backbone over `ids` (all ids < |V|+m).
Logits forward(const DvaModel& model, const ExpandedEmbeddings& emb, const IdBatch& ids);

// Backbone final-norm hidden states for one unpadded id sequence.
Matrix backbone_hidden(const DvaModel& model, const Matrix& token_table, std::span<const int> ids);

struct StepState {
  Eigen::RowVectorXd hidden;
};

// h * E_out'^T as one row.
Eigen::RowVectorXd output_logits(const Eigen::RowVectorXd& hidden, const ExpandedEmbeddings& emb);

// softmax(h * E_out'^T / temperature); throws for temperature <= 0.
std::vector<double> next_distribution(const StepState& state, const ExpandedEmbeddings& emb, double temperature);

}  // namespace dva
