#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "dva/retriever.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dva;

namespace {

std::vector<double> row(const Eigen::MatrixXf& m, Eigen::Index r) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = m(r, c);
  return v;
}

}  // namespace

TEST(Retriever, SearchMatchesFullScanOracle) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> g;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 50 + trial * 10, d = 12;
    Eigen::MatrixXf v(n, d);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = g(rng);
    v.rowwise().normalize();
    std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(1000 - 3 * i);
    const RetrievalIndex index(ids, v, 0);

    std::vector<std::vector<double>> docs;
    for (Eigen::Index r = 0; r < n; ++r) docs.push_back(row(v, r));
    Eigen::RowVectorXd q(d);
    for (Eigen::Index c = 0; c < d; ++c) q(c) = g(rng);
    const std::vector<double> qv(q.data(), q.data() + d);

    const auto got = index.search(q, 7);
    const auto want = oracle::cosine_topk(docs, ids, qv, 7);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].doc_id, want[i].doc_id);
      EXPECT_NEAR(got[i].score, want[i].score, 1e-6);
    }
  }
}

TEST(Retriever, TiesGoToLowerDocId) {
  Eigen::MatrixXf v(4, 2);
  v << 1, 0, 0, 1, 1, 0, 1, 0;
  const RetrievalIndex index({9, 4, 2, 7}, v, 0);
  Eigen::RowVectorXd q(2);
  q << 1, 0;
  const auto hits = index.search(q, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].doc_id, 2);
  EXPECT_EQ(hits[1].doc_id, 7);
  EXPECT_EQ(hits[2].doc_id, 9);
  EXPECT_EQ(index.search(q, 100).size(), 4u);
}

TEST(Retriever, DocumentQueriesFindThemselves) {
  const auto vocab = fixtures::toy_vocab();
  const DvaModel m = fixtures::tiny_model(vocab, 3, 16, 1, 0.3);
  const std::vector<std::string> texts{"the cat sat", "on the mat", "the mat sat on the cat", "cat cat cat",
                                       "sat on"};
  const auto corpus = DocumentSet::from_texts(texts);
  const auto index = RetrievalIndex::build(corpus, m, vocab);
  EXPECT_EQ(index.embedder_fingerprint(), m.fingerprint());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto e = embed_document(texts[i], m, vocab);
    EXPECT_NEAR(e.norm(), 1.0, 1e-12);
    const auto hits = retrieve(texts[i], index, 1, m, vocab);
    EXPECT_EQ(hits[0].doc_id, corpus.documents[i].doc_id);
    EXPECT_NEAR(hits[0].score, 1.0, 1e-6);
  }
}

TEST(Retriever, EmbeddingIgnoresWhitespaceLayout) {
  const auto vocab = fixtures::toy_vocab();
  const DvaModel m = fixtures::tiny_model(vocab, 3);
  EXPECT_TRUE(embed_document("the  cat\n sat", m, vocab) == embed_document("the cat sat", m, vocab));
  EXPECT_THROW(embed_document("   ", m, vocab), std::invalid_argument);
}

TEST(Retriever, SaveLoadRoundTrip) {
  const auto vocab = fixtures::toy_vocab();
  const DvaModel m = fixtures::tiny_model(vocab, 3);
  const std::vector<std::string> texts{"the cat sat", "on the mat", "sat"};
  const auto index = RetrievalIndex::build(DocumentSet::from_texts(texts), m, vocab);
  const auto path = std::filesystem::temp_directory_path() / "dva_test_index.bin";
  index.save(path);
  const auto back = RetrievalIndex::load(path);
  EXPECT_EQ(back.doc_ids(), index.doc_ids());
  EXPECT_TRUE(back.vectors() == index.vectors());
  EXPECT_EQ(back.embedder_fingerprint(), index.embedder_fingerprint());
  std::filesystem::resize_file(path, 20);
  EXPECT_THROW(RetrievalIndex::load(path), InputError);
  std::filesystem::remove(path);
}

TEST(Retriever, RejectsBadQueries) {
  Eigen::MatrixXf v(1, 2);
  v << 1, 0;
  const RetrievalIndex index({1}, v, 0);
  EXPECT_THROW(index.search(Eigen::RowVectorXd::Zero(2), 1), std::invalid_argument);
  EXPECT_THROW(index.search(Eigen::RowVectorXd::Ones(3), 1), std::invalid_argument);
  EXPECT_THROW(index.search(Eigen::RowVectorXd::Ones(2), 0), std::invalid_argument);
  EXPECT_THROW(RetrievalIndex().search(Eigen::RowVectorXd::Ones(2), 1), std::invalid_argument);
}
