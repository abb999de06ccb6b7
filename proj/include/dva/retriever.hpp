#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "dva/dva_model.hpp"
#include "dva/text_base.hpp"

namespace dva {

// Mean of the backbone's final-norm hidden states over the text's tokens
// (after a leading <bos>, which is not pooled), L2-normalized.
Eigen::RowVectorXd embed_document(std::string_view text, const DvaModel& model, const StaticVocab& vocab);

struct Hit {
  std::int64_t doc_id = 0;
  double score = 0.0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Exact cosine index over unit-norm float32 rows.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  RetrievalIndex(std::vector<std::int64_t> doc_ids, Eigen::MatrixXf vectors, std::uint64_t embedder_fingerprint);

  static RetrievalIndex build(const DocumentSet& corpus, const DvaModel& model, const StaticVocab& vocab);

  std::size_t size() const { return doc_ids_.size(); }
  bool empty() const { return doc_ids_.empty(); }
  Eigen::Index dim() const { return vectors_.cols(); }
  const std::vector<std::int64_t>& doc_ids() const { return doc_ids_; }
  const Eigen::MatrixXf& vectors() const { return vectors_; }
  std::uint64_t embedder_fingerprint() const { return fingerprint_; }

  // Top-k by cosine similarity, descending, ties to the lower doc id.
  std::vector<Hit> search(const Eigen::RowVectorXd& query, std::size_t k) const;

  // Binary `dva-index v1`: header, row-major float32 rows, doc id table.
  void save(const std::filesystem::path& path) const;
  static RetrievalIndex load(const std::filesystem::path& path);

 private:
  std::vector<std::int64_t> doc_ids_;
  Eigen::MatrixXf vectors_;  // num_docs x d
  std::uint64_t fingerprint_ = 0;
};

std::vector<Hit> retrieve(std::string_view prefix, const RetrievalIndex& index, std::size_t k, const DvaModel& model,
                          const StaticVocab& vocab);

}  // namespace dva
