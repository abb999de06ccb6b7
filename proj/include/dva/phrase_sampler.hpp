#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dva/text_base.hpp"

namespace dva {

enum class SamplerStrategy { kNToken, kNWord, kFmm };

SamplerStrategy parse_sampler_strategy(std::string_view name);
std::string_view to_string(SamplerStrategy s);

struct SamplerConfig {
  SamplerStrategy strategy = SamplerStrategy::kNToken;
  int n = 4;
  int max_phrases = 32;
  int min_phrase_tokens = 2;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

/// Exact membership over every contiguous token span of a sentence set,
/// backed by a generalized suffix automaton. Spans never cross sentences.
class CorpusIndex {
 public:
  CorpusIndex() = default;

  static CorpusIndex build(const DocumentSet& corpus, const StaticVocab& vocab);
  static CorpusIndex build(std::span<const std::vector<TokenId>> sentences);

  bool contains(std::span<const TokenId> span) const;
  bool contains(std::string_view text, const StaticVocab& vocab) const;

  // Length of the longest prefix of `ids` that occurs in the corpus.
  std::size_t longest_match(std::span<const TokenId> ids) const;

  std::uint64_t fingerprint() const { return fingerprint_; }
  std::size_t num_states() const { return states_.size(); }

 private:
  struct State {
    int len = 0;
    int link = -1;
    std::map<TokenId, int> next;
  };
  int extend(int last, TokenId c);

  std::vector<State> states_;
  std::uint64_t fingerprint_ = 0;
};

// Draws up to `count` distinct indices from [0, population) without
// replacement; order is draw order.
std::vector<std::size_t> draw_without_replacement(std::size_t population, std::size_t count,
                                                  std::uint64_t seed);

// Every contiguous n-word window of `text`, in position order.
std::vector<std::string> word_windows(std::string_view text, int n);

std::vector<std::string> sample_ntoken(std::span<const TokenId> token_ids, const SamplerConfig& config,
                                       const StaticVocab& vocab);
std::vector<std::string> sample_nword(std::string_view text, const SamplerConfig& config);
std::vector<std::string> sample_fmm(std::string_view text, const CorpusIndex& index,
                                    const SamplerConfig& config, const StaticVocab& vocab);

/// The P <- S(D, config) extension point. Implementations return phrase
/// surfaces drawn from `docs`, deduplicated in first-seen order.
class PhraseSampler {
 public:
  virtual ~PhraseSampler() = default;
  virtual std::vector<std::string> sample(std::span<const std::string> docs,
                                          const SamplerConfig& config) const = 0;
};

// Built-in samplers. The FMM sampler segments each document against a fixed
// reference index when given one; otherwise against the other documents of
// the same call (leave-one-out).
std::unique_ptr<PhraseSampler> make_ntoken_sampler(const StaticVocab& vocab);
std::unique_ptr<PhraseSampler> make_nword_sampler();
std::unique_ptr<PhraseSampler> make_fmm_sampler(const StaticVocab& vocab,
                                                std::shared_ptr<const CorpusIndex> reference = nullptr);

class SamplerRegistry {
 public:
  using Factory = std::function<std::unique_ptr<PhraseSampler>(const StaticVocab&)>;

  // Registry pre-populated with "ntoken", "nword" and "fmm".
  static SamplerRegistry& global();

  void add(std::string name, Factory factory);
  std::unique_ptr<PhraseSampler> create(std::string_view name, const StaticVocab& vocab) const;
  bool has(std::string_view name) const;

 private:
  std::map<std::string, Factory, std::less<>> factories_;
};

// Per-document seeding so that sampling one document never depends on which
// other documents are in the same call.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace dva
