#include "dva/retriever.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

namespace dva {
namespace {

constexpr char kMagic[] = "dva-index v1\n";

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

Eigen::RowVectorXd embed_document(std::string_view text, const DvaModel& model, const StaticVocab& vocab) {
  const auto ids = encode_static(normalize_whitespace(text), vocab);
  if (ids.empty()) throw std::invalid_argument("cannot embed an empty text");
  std::vector<int> seq{vocab.bos_id()};
  seq.insert(seq.end(), ids.begin(), ids.end());
  const auto limit = static_cast<std::size_t>(model.config().max_seq_len);
  if (seq.size() > limit) seq.resize(limit);
  const Matrix hidden = backbone_hidden(model, model.input_embeddings(), seq);
  Eigen::RowVectorXd mean = hidden.bottomRows(hidden.rows() - 1).colwise().mean();
  const double norm = mean.norm();
  if (!(norm > 0.0)) throw std::runtime_error("document embedding has zero norm");
  return mean / norm;
}

RetrievalIndex::RetrievalIndex(std::vector<std::int64_t> doc_ids, Eigen::MatrixXf vectors,
                               std::uint64_t embedder_fingerprint)
    : doc_ids_(std::move(doc_ids)), vectors_(std::move(vectors)), fingerprint_(embedder_fingerprint) {
  if (static_cast<Eigen::Index>(doc_ids_.size()) != vectors_.rows()) {
    throw std::invalid_argument("retrieval index: doc id count does not match row count");
  }
}

RetrievalIndex RetrievalIndex::build(const DocumentSet& corpus, const DvaModel& model, const StaticVocab& vocab) {
  if (corpus.empty()) throw std::invalid_argument("cannot index an empty corpus");
  const auto d = static_cast<Eigen::Index>(model.config().backbone.d_model);
  Eigen::MatrixXf vectors(static_cast<Eigen::Index>(corpus.size()), d);
  std::vector<std::int64_t> ids;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Eigen::RowVectorXd v = embed_document(corpus.documents[i].text, model, vocab);
    Eigen::RowVectorXf f = v.cast<float>();
    f /= f.norm();
    vectors.row(static_cast<Eigen::Index>(i)) = f;
    ids.push_back(corpus.documents[i].doc_id);
  }
  return RetrievalIndex(std::move(ids), std::move(vectors), model.fingerprint());
}

std::vector<Hit> RetrievalIndex::search(const Eigen::RowVectorXd& query, std::size_t k) const {
  if (empty()) throw std::invalid_argument("retrieval index is empty");
  if (k == 0) throw std::invalid_argument("k must be >= 1");
  if (query.size() != dim()) {
    throw std::invalid_argument(fmt::format("query width {} does not match index width {}", query.size(), dim()));
  }
  const double qn = query.norm();
  if (!(qn > 0.0)) throw std::invalid_argument("query vector has zero norm");
  const Eigen::VectorXd scores = vectors_.cast<double>() * (query.transpose() / qn);
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t take = std::min(k, size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores(static_cast<Eigen::Index>(a));
                      const double sb = scores(static_cast<Eigen::Index>(b));
                      if (sa != sb) return sa > sb;
                      return doc_ids_[a] < doc_ids_[b];
                    });
  std::vector<Hit> hits;
  for (std::size_t i = 0; i < take; ++i) hits.push_back({doc_ids_[order[i]], scores(static_cast<Eigen::Index>(order[i]))});
  return hits;
}

void RetrievalIndex::save(const std::filesystem::path& path) const {
  static_assert(std::endian::native == std::endian::little, "index writer assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(fmt::format("cannot write index {}", path.string()));
  out.write(kMagic, sizeof(kMagic) - 1);
  write_pod(out, static_cast<std::uint64_t>(size()));
  write_pod(out, static_cast<std::uint64_t>(dim()));
  write_pod(out, fingerprint_);
  for (Eigen::Index r = 0; r < vectors_.rows(); ++r) {
    for (Eigen::Index c = 0; c < vectors_.cols(); ++c) write_pod(out, vectors_(r, c));
  }
  for (auto id : doc_ids_) write_pod(out, id);
  if (!out) throw InputError(fmt::format("failed writing index {}", path.string()));
}

RetrievalIndex RetrievalIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read index {}", path.string()));
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw InputError(fmt::format("{}: not a dva-index v1 file", path.string()));
  }
  const auto n = read_pod<std::uint64_t>(in);
  const auto d = read_pod<std::uint64_t>(in);
  const auto fp = read_pod<std::uint64_t>(in);
  if (!in || n > (1ULL << 32) || d > (1ULL << 20)) throw InputError(fmt::format("{}: corrupt index header", path.string()));
  Eigen::MatrixXf vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    for (Eigen::Index c = 0; c < vectors.cols(); ++c) vectors(r, c) = read_pod<float>(in);
  }
  std::vector<std::int64_t> ids(n);
  for (auto& id : ids) id = read_pod<std::int64_t>(in);
  if (!in) throw InputError(fmt::format("{}: truncated index", path.string()));
  return RetrievalIndex(std::move(ids), std::move(vectors), fp);
}

std::vector<Hit> retrieve(std::string_view prefix, const RetrievalIndex& index, std::size_t k, const DvaModel& model,
                          const StaticVocab& vocab) {
  return index.search(embed_document(prefix, model, vocab), k);
}

}  // namespace dva
