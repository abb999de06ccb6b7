#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dva/dva_model.hpp"
#include "dva/phrase_sampler.hpp"
#include "dva/retriever.hpp"
#include "json.hpp"

namespace dva {

enum class DecodeStrategy { kGreedy, kSample };

DecodeStrategy parse_decode_strategy(std::string_view name);
std::string_view to_string(DecodeStrategy s);

struct GenerationConfig {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  double temperature = 1.0;
  int top_k = 0;  // 0 = off
  int min_new_ids = 1;
  int max_new_ids = 32;
  std::uint64_t seed = 0;
  int k_docs = 4;
  int candidate_cap = 64;
  int top_candidates = 50;  // per-step candidates kept for inspection

  void validate() const;  // throws std::invalid_argument
};

/// Per-sample switch over the rows of a batch phrase table.
struct CandidateMask {
  std::vector<char> allowed;

  static CandidateMask all(std::size_t m, bool value) { return {std::vector<char>(m, value)}; }
  std::size_t size() const { return allowed.size(); }
};

// Phrase logits whose mask entry is false become -inf; everything else is
// copied unchanged. Throws when logits.size() != vocab_size + mask.size().
std::vector<double> process_logits(std::span<const double> logits, std::size_t vocab_size, const CandidateMask& mask);

struct Candidate {
  MixedId id = 0;
  double probability = 0.0;
};

/// One emitted id and the most likely alternatives at that step, descending.
struct GenStep {
  MixedId chosen = 0;
  double probability = 0.0;
  std::vector<Candidate> candidates;
};

// Samples phrases from each document in order, deduplicates by surface and
// keeps the first `cap`.
std::vector<std::string> build_phrase_candidates(std::string_view prefix, std::span<const std::string> docs,
                                                 const PhraseSampler& sampler, const SamplerConfig& config,
                                                 std::size_t cap);

/// Everything generation reads. Only `model` and `vocab` are required;
/// without an index there is no retrieval and candidates come out empty.
struct Pipeline {
  const DvaModel* model = nullptr;
  const StaticVocab* vocab = nullptr;
  const RetrievalIndex* index = nullptr;
  const DocumentSet* documents = nullptr;  // texts behind index doc ids
  std::shared_ptr<const PhraseSampler> sampler;
  SamplerConfig sampler_config;
};

struct StageTimings {
  double retrieval = 0.0;
  double sampling = 0.0;
  double generation = 0.0;

  double total() const { return retrieval + sampling + generation; }
  StageTimings& operator+=(const StageTimings& o);
};

/// One generated continuation. Ids, steps and candidates use the id space
/// of `table` (the sample's own candidates), so they are independent of
/// which other samples shared the batch.
struct GenerationSession {
  std::string session_id;
  std::string prefix;
  PhraseTable table;
  std::vector<Hit> hits;
  std::vector<MixedId> ids;
  std::vector<GenStep> steps;
  GenerationConfig config;

  std::string text(const StaticVocab& vocab) const;
  nlohmann::json to_json(const StaticVocab& vocab) const;
};

struct BatchResult {
  std::vector<GenerationSession> sessions;
  PhraseTable table;                       // union of the samples' candidates
  std::vector<CandidateMask> masks;        // per sample, over `table`
  std::vector<std::vector<MixedId>> union_ids;  // emitted ids in `table` space
  StageTimings timings;
};

// Retrieval and sampling per prefix (sequentially), then one batched decode.
BatchResult generate_batch(std::span<const std::string> prefixes, const Pipeline& pipeline,
                           const GenerationConfig& config);

// A batch of one. Explicit phrases, when given, replace retrieval.
GenerationSession generate_single(std::string_view prefix, const std::optional<std::vector<std::string>>& explicit_phrases,
                                  const Pipeline& pipeline, const GenerationConfig& config);

// Decodes from a prefix followed by already-chosen ids, continuing the step
// count at forced.size(); sampling draws are keyed by (seed, prefix, step)
// so a replay of the same choices reproduces the same continuation.
GenerationSession continue_generation(std::string_view prefix, const PhraseTable& table,
                                      std::span<const MixedId> forced, const Pipeline& pipeline,
                                      const GenerationConfig& config);

// New session equal to `session` before `position`, `replacement` at it and a
// regenerated suffix. Throws InputError unless `replacement` is one of the
// stored candidates at that step.
GenerationSession steer(const GenerationSession& session, std::size_t position, MixedId replacement,
                        const Pipeline& pipeline);

// Called once per decode step with the sample index, its step number and the
// full distribution over the batch id space (BatchResult::table).
using DecodeObserver = std::function<void(std::size_t sample, int step, std::span<const double> probs)>;

// Batched decode over prepared candidate tables (no retrieval). Exposed for
// harnesses that control candidates directly.
BatchResult decode_with_tables(std::span<const std::string> prefixes, std::span<const PhraseTable> tables,
                               const Pipeline& pipeline, const GenerationConfig& config,
                               const DecodeObserver* observer = nullptr);

}  // namespace dva
