#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <cmath>
#include <random>
#include <sstream>

#include "dva/eval_bench.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dva;

namespace {

std::vector<int> random_ids(std::mt19937_64& rng, int len, int alphabet) {
  std::uniform_int_distribution<int> d(0, alphabet - 1);
  std::vector<int> v(static_cast<std::size_t>(len));
  for (auto& x : v) x = d(rng);
  return v;
}

std::size_t count_elements(const boost::property_tree::ptree& t, const std::string& name) {
  std::size_t n = 0;
  for (const auto& [key, child] : t) {
    if (key == name) ++n;
    n += count_elements(child, name);
  }
  return n;
}

}  // namespace

TEST(Metrics, RepAndDiversityMatchPairwiseOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_ids(rng, 5 + trial % 40, 2 + trial % 7);
    for (int n = 2; n <= 4; ++n) EXPECT_NEAR(rep_n(t, n), oracle::rep_n(t, n), 1e-9);
    EXPECT_NEAR(diversity(t), oracle::diversity(t), 1e-9);
  }
}

TEST(Metrics, RepEdgeCases) {
  const std::vector<int> same(6, 3);
  EXPECT_NEAR(rep_n(same, 2), 100.0 * (1.0 - 1.0 / 5.0), 1e-12);
  const std::vector<int> distinct{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(rep_n(distinct, 2), 0.0);
  EXPECT_EQ(diversity(distinct), 100.0);
  const std::vector<int> short_seq{1, 2, 3};
  EXPECT_EQ(rep_n(short_seq, 4), 0.0);
  EXPECT_THROW(diversity(std::vector<int>{1, 2, 3, 4}), std::invalid_argument);
}

TEST(Metrics, RougeLMatchesMemoizedOracle) {
  std::mt19937_64 rng(2);
  const std::vector<std::string> words{"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 200; ++trial) {
    const auto cand = fixtures::random_text(rng, words, 1, 15);
    const auto ref = fixtures::random_text(rng, words, 1, 15);
    const auto got = rouge_l(cand, ref);
    const auto want = oracle::rouge_l(cand, ref);
    EXPECT_NEAR(got.precision, want.p, 1e-9);
    EXPECT_NEAR(got.recall, want.r, 1e-9);
    EXPECT_NEAR(got.f1, want.f, 1e-9);
  }
  EXPECT_EQ(rouge_l("", "a b").f1, 0.0);
  EXPECT_EQ(rouge_l("x y", "a b").f1, 0.0);
}

TEST(Metrics, PerplexityFromLogProbs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-4, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(static_cast<std::size_t>(1 + trial)), lp;
    for (auto& x : p) {
      x = u(rng);
      lp.push_back(std::log(x));
    }
    EXPECT_NEAR(perplexity_from_log_probs(lp) / oracle::perplexity(p), 1.0, 1e-9);
  }
  EXPECT_THROW(perplexity_from_log_probs(std::vector<double>{}), std::invalid_argument);
}

TEST(Metrics, UniformModelPerplexityIsVocabularySize) {
  const auto vocab = fixtures::word_vocab(20);
  DvaModel m = fixtures::tiny_model(vocab, 4, 8, 1, 0.3);
  m.find("backbone.out_emb").value.setZero();
  const std::vector<std::string> texts{"w1 w2 w3", "w4 w4 w4 w4 w9", "w19"};
  EXPECT_NEAR(perplexity(m, vocab, texts), static_cast<double>(vocab.size()), 1e-9);
}

TEST(Metrics, ModelPerplexityMatchesSoftmaxOracle) {
  const auto vocab = fixtures::word_vocab(10);
  const DvaModel m = fixtures::tiny_model(vocab, 5, 8, 1, 0.3);
  const std::vector<std::string> texts{"w1 w2 w3 w0", "w5 w5"};
  std::vector<double> probs;
  const auto emb = expand_embeddings(base_embeddings(m), encode_phrases(PhraseTable::empty(vocab), m));
  for (const auto& t : texts) {
    std::vector<int> in{vocab.bos_id()};
    const auto ids = encode_static(t, vocab);
    in.insert(in.end(), ids.begin(), ids.end());
    std::vector<int> target(ids.begin(), ids.end());
    target.push_back(vocab.eos_id());
    const std::vector<std::vector<int>> rows{in};
    const Logits z = forward(m, emb, IdBatch::right_padded(rows));
    for (int s = 0; s < static_cast<int>(target.size()); ++s) {
      long double denom = 0;
      for (Eigen::Index c = 0; c < z.values.cols(); ++c) denom += std::exp(static_cast<long double>(z.row(0, s)(c)));
      probs.push_back(static_cast<double>(std::exp(static_cast<long double>(z.row(0, s)(target[s]))) / denom));
    }
  }
  EXPECT_NEAR(perplexity(m, vocab, texts) / oracle::perplexity(probs), 1.0, 1e-9);
}

TEST(Metrics, NslAndBytesPerToken) {
  const auto vocab = fixtures::toy_vocab();
  const std::vector<std::string> phrases{"the cat", "on the mat"};
  const auto table = PhraseTable::build(phrases, vocab);
  const auto seq = encode("the cat sat on the mat", table, vocab);
  EXPECT_DOUBLE_EQ(nsl(seq.ids, table, vocab), 3.0 / 6.0);
  EXPECT_DOUBLE_EQ(nsl(encode("the cat", PhraseTable::empty(vocab), vocab).ids, PhraseTable::empty(vocab), vocab), 1.0);
  EXPECT_DOUBLE_EQ(bytes_per_token("the cat", 2), 3.5);
  EXPECT_THROW(nsl(1, 0), std::invalid_argument);
}

TEST(Metrics, ReportSerialization) {
  MetricsReport r;
  r.rep_2 = 1.5;
  r.ppl = 12;
  const auto j = r.to_json();
  EXPECT_TRUE(j.at("mauve").is_null());
  EXPECT_EQ(j.at("rep_2").get<double>(), 1.5);
  const auto table = r.to_table();
  for (const char* col : {"MAUVE", "Rep-2", "Rep-3", "Rep-4", "Diversity", "PPL", "NSL", "Bytes/Token", "ROUGE-L"})
    EXPECT_NE(table.find(col), std::string::npos) << col;
}

class PipelineTest : public ::testing::Test {
 protected:
  StaticVocab vocab = fixtures::word_vocab(16);
  DvaModel model;
  DocumentSet docs;
  std::optional<RetrievalIndex> index;
  Pipeline pipeline;
  std::vector<std::string> texts;

  void SetUp() override {
    ModelConfig c = fixtures::tiny_config(vocab.size(), 16, 1);
    c.max_seq_len = 64;
    c.init_std = 0.2;
    model = DvaModel(c, vocab.fingerprint(), 2);
    std::mt19937_64 rng(4);
    const auto words = fixtures::content_words(vocab);
    for (int i = 0; i < 12; ++i) texts.push_back(fixtures::random_text(rng, words, 8, 14));
    docs = DocumentSet::from_texts(texts);
    index = RetrievalIndex::build(docs, model, vocab);
    pipeline.model = &model;
    pipeline.vocab = &vocab;
    pipeline.index = &*index;
    pipeline.documents = &docs;
    pipeline.sampler = SamplerRegistry::global().create("nword", vocab);
    pipeline.sampler_config.strategy = SamplerStrategy::kNWord;
    pipeline.sampler_config.n = 3;
  }
};

TEST_F(PipelineTest, EvaluateAggregatesPerSample) {
  GenerationConfig g;
  g.max_new_ids = 10;
  const auto r = evaluate(pipeline, texts, g, {4});
  EXPECT_EQ(r.samples, texts.size());
  EXPECT_GT(r.nsl, 0.0);
  EXPECT_LE(r.nsl, 1.0);
  EXPECT_GT(r.bytes_per_token, 0.0);
  EXPECT_NEAR(r.diversity, diversity_from_reps(r.rep_2, r.rep_3, r.rep_4), 1e-12);
  EXPECT_NEAR(r.ppl, perplexity(model, vocab, texts), 1e-9);

  // recompute NSL from the sessions themselves
  std::vector<std::string> prefixes;
  for (const auto& t : texts) {
    const auto w = split_words(t);
    prefixes.push_back(join_words(std::vector<std::string>(w.begin(), w.begin() + 4)));
  }
  std::size_t ids = 0, toks = 0;
  for (std::size_t at = 0; at < prefixes.size(); at += 8) {
    const std::size_t n = std::min<std::size_t>(8, prefixes.size() - at);
    for (const auto& s : generate_batch(std::span(prefixes).subspan(at, n), pipeline, g).sessions) {
      ids += s.ids.size();
      toks += encode_static(s.text(vocab), vocab).size();
    }
  }
  EXPECT_NEAR(r.nsl, static_cast<double>(ids) / static_cast<double>(toks), 1e-12);

  EXPECT_THROW(evaluate(pipeline, texts, g, {100}), InputError);
}

TEST_F(PipelineTest, TokenOnlyPipelineHasUnitNsl) {
  Pipeline bare = pipeline;
  bare.index = nullptr;
  bare.sampler = nullptr;
  GenerationConfig g;
  g.max_new_ids = 10;
  EXPECT_DOUBLE_EQ(evaluate(bare, texts, g, {4}).nsl, 1.0);
}

TEST_F(PipelineTest, BenchmarkRowsAndFractions) {
  GenerationConfig g;
  BenchmarkOptions o;
  o.batch_sizes = {4, 1, 2};
  o.forced_length = 6;
  o.repetitions = 2;
  const std::vector<std::string> prefixes{"w1 w2", "w3"};
  const auto rows = benchmark_throughput(pipeline, prefixes, g, o, "dva");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].batch_size, 1);
  EXPECT_EQ(rows[2].batch_size, 4);
  for (const auto& r : rows) {
    EXPECT_EQ(r.variant, "dva");
    EXPECT_GT(r.ids_per_second, 0.0);
    EXPECT_NEAR(r.ids_per_second * r.seconds, 6.0 * r.batch_size, 1e-6 * r.batch_size);
    EXPECT_NEAR(r.retrieval_fraction + r.sampling_fraction + r.generation_fraction, 1.0, 1e-9);
  }
  const auto stages = profile_inference(pipeline, prefixes, g, o);
  ASSERT_EQ(stages.size(), 3u);
  for (const auto& s : stages) {
    EXPECT_NEAR(s.retrieval_fraction + s.sampling_fraction + s.generation_fraction, 1.0, 1e-9);
    EXPECT_GT(s.seconds.retrieval, 0.0);
  }
  EXPECT_EQ(to_json(std::span<const ThroughputRow>(rows)).size(), 3u);
  EXPECT_NE(throughput_table(rows).find("ids/sec"), std::string::npos);

  o.forced_length = 0;
  EXPECT_THROW(benchmark_throughput(pipeline, prefixes, g, o, "dva"), std::invalid_argument);
}

TEST_F(PipelineTest, ChartsAreWellFormedSvg) {
  std::vector<ThroughputRow> rows;
  for (const char* v : {"dva", "token"})
    for (int b : {1, 2, 4, 8}) rows.push_back({v, b, 0.1, 100.0 * b, 400.0 * b, 0.1, 0.1, 0.8});
  std::vector<StageRow> stages;
  for (int b : {1, 2, 4, 8}) stages.push_back({b, {0.1, 0.1, 0.8}, 0.1, 0.1, 0.8});
  for (const auto& svg : {throughput_svg(rows), stage_svg(stages)}) {
    std::istringstream in(svg);
    boost::property_tree::ptree tree;
    ASSERT_NO_THROW(boost::property_tree::read_xml(in, tree)) << svg.substr(0, 200);
    EXPECT_EQ(tree.begin()->first, "svg");
    EXPECT_GE(count_elements(tree, "rect"), 8u);
  }
}
