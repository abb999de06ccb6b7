#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dva/eval_bench.hpp"
#include "dva/inference_engine.hpp"
#include "dva/model.hpp"
#include "dva/trainer.hpp"
#include "json.hpp"

namespace dva {

struct PathsConfig {
  std::string corpus;
  std::string corpus_format = "plain";  // "plain" or "jsonl"
  std::string vocab;
  std::string checkpoint;
  std::string index;
  std::string test;
  std::string train_log;
  std::string output_dir;
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int session_capacity = 256;
};

struct EvalConfig {
  int prefix_words = 8;
  int max_texts = 0;  // 0 = all
  std::vector<int> batch_sizes{1, 2, 4, 8};
  int forced_length = 64;
  int repetitions = 3;
};

/// The whole configuration file. Every section is optional; unknown keys
/// anywhere are errors.
struct AppConfig {
  PathsConfig paths;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  GenerationConfig generation;
  ServerConfig server;
  EvalConfig eval;

  static AppConfig from_json(const nlohmann::json& j);
  static AppConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  // "section.key=value" (nested keys separated by dots). The value is read
  // as json when it parses, otherwise as a string.
  void apply_override(std::string_view assignment);

  void validate() const;
  // Paths relative to the config file are resolved against its directory.
  void resolve_paths(const std::filesystem::path& base);
};

// Field-wise update of `base` from a json object; unknown keys throw.
GenerationConfig generation_from_json(const nlohmann::json& j, GenerationConfig base);
SamplerConfig sampler_from_json(const nlohmann::json& j, SamplerConfig base);
nlohmann::json to_json(const GenerationConfig& c);
nlohmann::json to_json(const SamplerConfig& c);

}  // namespace dva
