#pragma once

#include <iosfwd>
#include <memory>
#include <optional>

#include "dva/app_config.hpp"
#include "dva/inference_engine.hpp"

namespace dva {

/// A checkpoint with its vocabulary, documents and (optional) index, ready
/// for generation. Pinned in place: the sampler refers to `vocab`.
struct Runtime {
  Runtime() = default;
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  StaticVocab vocab;
  DvaModel model;
  DocumentSet documents;
  std::optional<RetrievalIndex> index;
  std::shared_ptr<const PhraseSampler> sampler;
  SamplerConfig sampler_config;

  Pipeline pipeline() const;
  // The same model without retrieval, so it only ever emits tokens.
  Pipeline token_only() const;
};

// Loads vocab and checkpoint (required), corpus and index (when configured).
// An index built for a different model is rejected.
std::unique_ptr<Runtime> load_runtime(const AppConfig& config);

// Each returns a process exit status and reports failures on `err`.
int cmd_train(const AppConfig& config, std::ostream& out, std::ostream& err);
int cmd_eval(const AppConfig& config, bool benchmark, std::ostream& out, std::ostream& err);
int cmd_chat(const AppConfig& config, std::istream& in, std::ostream& out, std::ostream& err);
int cmd_serve(const AppConfig& config, std::ostream& out, std::ostream& err);

// Output line of the chat loop: phrases are wrapped in [[ ]].
std::string render_marked(const GenerationSession& session, const StaticVocab& vocab);

}  // namespace dva
