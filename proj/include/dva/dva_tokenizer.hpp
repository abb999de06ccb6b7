#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dva/text_base.hpp"
#include "json.hpp"

namespace dva {

/// Ids over the unified space: [0, |V|) are tokens, [|V|, |V|+m) phrases.
using MixedId = std::int32_t;

struct Phrase {
  std::string surface;
  std::vector<TokenId> subword_ids;

  std::size_t length() const { return subword_ids.size(); }
};

/// The dynamic vocabulary P attached to one batch. Phrase j has id offset + j.
class PhraseTable {
 public:
  PhraseTable() = default;

  // Throws InputError for a surface that is too short, contains <unk> or
  // repeats an earlier one.
  static PhraseTable build(std::span<const std::string> surfaces, const StaticVocab& vocab,
                           int min_phrase_tokens = 2);

  // Skips invalid surfaces and duplicates instead of throwing.
  static PhraseTable build_lenient(std::span<const std::string> surfaces, const StaticVocab& vocab,
                                   int min_phrase_tokens = 2);

  static PhraseTable empty(const StaticVocab& vocab) { return build({}, vocab); }

  std::size_t offset() const { return offset_; }
  std::size_t size() const { return phrases_.size(); }
  bool empty() const { return phrases_.empty(); }
  std::size_t total_ids() const { return offset_ + phrases_.size(); }

  const std::vector<Phrase>& phrases() const { return phrases_; }
  const Phrase& phrase(std::size_t j) const { return phrases_.at(j); }
  MixedId id_of_phrase(std::size_t j) const { return static_cast<MixedId>(offset_ + j); }
  bool is_phrase_id(MixedId id) const {
    return id >= static_cast<MixedId>(offset_) && id < static_cast<MixedId>(total_ids());
  }
  // Index of `surface` in the table, or -1.
  int find(std::string_view surface) const;

  std::vector<std::string> surfaces() const;
  std::uint64_t vocab_fingerprint() const { return vocab_fingerprint_; }

 private:
  std::vector<Phrase> phrases_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t offset_ = 0;
  std::uint64_t vocab_fingerprint_ = 0;
};

enum class SegmentKind { kToken, kPhrase };

std::string_view to_string(SegmentKind k);

struct Segment {
  std::string text;
  SegmentKind kind = SegmentKind::kToken;
  std::size_t begin = 0;  // byte range in the source text
  std::size_t end = 0;
  MixedId id = 0;
};

struct MixedSequence {
  std::vector<MixedId> ids;
  std::vector<WordSpan> spans;  // per id; empty for generated sequences

  std::size_t length() const { return ids.size(); }
};

inline bool is_token_id(MixedId id, const StaticVocab& vocab) {
  return id >= 0 && static_cast<std::size_t>(id) < vocab.size();
}

// Greedy left-to-right longest match over phrase word sequences; ties on
// length resolve to the lowest phrase id.
std::vector<Segment> tokenize(std::string_view text, const PhraseTable& table, const StaticVocab& vocab);

MixedSequence encode(std::string_view text, const PhraseTable& table, const StaticVocab& vocab);

std::string decode(std::span<const MixedId> ids, const PhraseTable& table, const StaticVocab& vocab);

// Surface of one mixed id.
const std::string& surface_of(MixedId id, const PhraseTable& table, const StaticVocab& vocab);

// Debug json-lines record: {"ids":[...], "segments":[{"text":..., "kind":...}]}.
nlohmann::json segmentation_to_json(const MixedSequence& seq, const std::vector<Segment>& segments);

}  // namespace dva
