#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "dva/commands.hpp"

using namespace dva;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

class CliTest : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("dva_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::string corpus;
    const char* phrases[] = {"the old map", "was found near", "a quiet river", "under the bridge", "in late autumn"};
    for (int i = 0; i < 30; ++i) {
      corpus += phrases[i % 5];
      corpus += ' ';
      corpus += phrases[(i * 3 + 1) % 5];
      corpus += ' ';
      corpus += phrases[(i * 7 + 2) % 5];
      corpus += '\n';
    }
    write(dir / "corpus.txt", corpus);
    write(dir / "test.txt", "the old map was found near a quiet river\nunder the bridge in late autumn the old map\n");
    write(dir / "config.json", R"({
      // tiny settings so the whole pipeline runs in about a second
      "paths": {"corpus": "corpus.txt", "test": "test.txt", "vocab": "out/vocab.txt",
                "checkpoint": "out/model.ckpt", "index": "out/docs.index", "output_dir": "out/eval"},
      "model": {"vocab_size": 64, "max_seq_len": 48,
                "backbone": {"d_model": 16, "n_layers": 1, "n_heads": 2},
                "phrase_encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2}},
      "train": {"batch_size": 4, "steps": 20, "learning_rate": 0.003, "seed": 2},
      "sampler": {"strategy": "nword", "n": 3},
      "generation": {"max_new_ids": 6, "k_docs": 2},
      "eval": {"prefix_words": 3, "batch_sizes": [1, 2], "forced_length": 4, "repetitions": 1}
    })");
  }
  void TearDown() override { fs::remove_all(dir); }

  AppConfig config() const { return AppConfig::load(dir / "config.json"); }

  void train() {
    std::ostringstream out, err;
    ASSERT_EQ(cmd_train(config(), out, err), 0) << err.str();
  }
};

int run(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(CliTest, ConfigRejectsUnknownKeysAndAppliesOverrides) {
  auto c = config();
  EXPECT_EQ(c.paths.corpus, (dir / "corpus.txt").string());
  c.apply_override("train.steps=7");
  c.apply_override("generation.strategy=sample");
  c.apply_override("model.backbone.d_model=32");
  EXPECT_EQ(c.train.steps, 7);
  EXPECT_EQ(c.generation.strategy, DecodeStrategy::kSample);
  EXPECT_EQ(c.model.backbone.d_model, 32);
  EXPECT_THROW(c.apply_override("train.stepz=1"), std::invalid_argument);
  EXPECT_THROW(c.apply_override("no-equals"), std::invalid_argument);

  try {
    AppConfig::from_json(nlohmann::json::parse(R"({"train": {"lr": 0.1}})"));
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("train.lr"), std::string::npos) << e.what();
  }
  auto bad = config();
  bad.server.port = 70000;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST_F(CliTest, TrainReportsMissingCorpusPath) {
  auto c = config();
  c.paths.corpus = (dir / "absent.txt").string();
  std::ostringstream out, err;
  EXPECT_NE(cmd_train(c, out, err), 0);
  EXPECT_NE(err.str().find("absent.txt"), std::string::npos) << err.str();
}

TEST_F(CliTest, TrainIsReproducible) {
  train();
  const auto first = slurp(dir / "out/model.ckpt");
  const auto first_index = slurp(dir / "out/docs.index");
  ASSERT_FALSE(first.empty());
  fs::remove(dir / "out/vocab.txt");
  train();
  EXPECT_EQ(slurp(dir / "out/model.ckpt"), first);
  EXPECT_EQ(slurp(dir / "out/docs.index"), first_index);
  EXPECT_TRUE(fs::exists(dir / "out/model.ckpt.train.jsonl"));
}

TEST_F(CliTest, EvalMatchesLibraryCall) {
  train();
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(config(), false, out, err), 0) << err.str();
  const auto written = nlohmann::json::parse(slurp(dir / "out/eval/metrics.json"));

  const auto c = config();
  const auto rt = load_runtime(c);
  std::vector<std::string> texts{"the old map was found near a quiet river",
                                 "under the bridge in late autumn the old map"};
  const auto direct = evaluate(rt->pipeline(), texts, c.generation, {c.eval.prefix_words}).to_json();
  EXPECT_EQ(written["metrics"], direct);
}

TEST_F(CliTest, EvalBenchmarkWritesCharts) {
  train();
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(config(), true, out, err), 0) << err.str();
  const auto j = nlohmann::json::parse(slurp(dir / "out/eval/metrics.json"));
  EXPECT_EQ(j["throughput"].size(), 4u);
  EXPECT_EQ(j["stages"].size(), 2u);
  EXPECT_EQ(slurp(dir / "out/eval/throughput.svg").rfind("<svg", 0), 0u);
  EXPECT_EQ(slurp(dir / "out/eval/stages.svg").rfind("<svg", 0), 0u);
}

TEST_F(CliTest, ChatIsDeterministicAndQuits) {
  train();
  const std::string script = "the old map\n/phrases a quiet river; under the bridge\nthe old map\n/phrases\n/quit\nnever read\n";
  std::istringstream in1(script), in2(script);
  std::ostringstream out1, out2, err;
  EXPECT_EQ(cmd_chat(config(), in1, out1, err), 0) << err.str();
  EXPECT_EQ(cmd_chat(config(), in2, out2, err), 0);
  EXPECT_EQ(out1.str(), out2.str());
  EXPECT_NE(out1.str().find("phrases set (2)"), std::string::npos);
  EXPECT_NE(out1.str().find("phrases cleared"), std::string::npos);
  EXPECT_EQ(out1.str().find("never read"), std::string::npos);
  EXPECT_EQ(out1.str().rfind("the old map ", 0), 0u);
}

TEST_F(CliTest, BinaryExitCodes) {
  const std::string bin = DVAGEN_BIN;
  const std::string cfg = (dir / "config.json").string();
  EXPECT_EQ(run(bin + " train --config " + cfg + " --set train.steps=2"), 0);
  EXPECT_EQ(run(bin + " train --config " + cfg + " --set train.nope=2"), 2);
  EXPECT_EQ(run(bin + " train --config " + (dir / "missing.json").string()), 2);
  EXPECT_NE(run(bin + " fly --config " + cfg), 0);
  EXPECT_EQ(run("echo /quit | " + bin + " chat --config " + cfg), 0);
}
