#include "dva/dva_tokenizer.hpp"

#include <algorithm>
#include <map>

#include <fmt/format.h>

namespace dva {

PhraseTable PhraseTable::build(std::span<const std::string> surfaces, const StaticVocab& vocab,
                               int min_phrase_tokens) {
  PhraseTable table;
  table.offset_ = vocab.size();
  table.vocab_fingerprint_ = vocab.fingerprint();
  for (const auto& raw : surfaces) {
    std::string surface = normalize_whitespace(raw);
    auto ids = encode_static(surface, vocab);
    if (static_cast<int>(ids.size()) < min_phrase_tokens) {
      throw InputError(fmt::format("phrase '{}' has {} tokens; at least {} required", raw, ids.size(),
                                   min_phrase_tokens));
    }
    if (std::find(ids.begin(), ids.end(), vocab.unk_id()) != ids.end()) {
      throw InputError(fmt::format("phrase '{}' contains out-of-vocabulary words", raw));
    }
    if (!table.index_.emplace(surface, table.phrases_.size()).second) {
      throw InputError(fmt::format("duplicate phrase '{}'", surface));
    }
    table.phrases_.push_back({std::move(surface), std::move(ids)});
  }
  return table;
}

PhraseTable PhraseTable::build_lenient(std::span<const std::string> surfaces, const StaticVocab& vocab,
                                       int min_phrase_tokens) {
  std::vector<std::string> kept;
  std::unordered_map<std::string, bool> seen;
  for (const auto& raw : surfaces) {
    std::string surface = normalize_whitespace(raw);
    auto ids = encode_static(surface, vocab);
    if (static_cast<int>(ids.size()) < min_phrase_tokens) continue;
    if (std::find(ids.begin(), ids.end(), vocab.unk_id()) != ids.end()) continue;
    if (!seen.emplace(surface, true).second) continue;
    kept.push_back(std::move(surface));
  }
  return build(kept, vocab, min_phrase_tokens);
}

int PhraseTable::find(std::string_view surface) const {
  auto it = index_.find(std::string(surface));
  return it == index_.end() ? -1 : static_cast<int>(it->second);
}

std::vector<std::string> PhraseTable::surfaces() const {
  std::vector<std::string> out;
  out.reserve(phrases_.size());
  for (const auto& p : phrases_) out.push_back(p.surface);
  return out;
}

std::string_view to_string(SegmentKind k) { return k == SegmentKind::kPhrase ? "phrase" : "token"; }

std::vector<Segment> tokenize(std::string_view text, const PhraseTable& table, const StaticVocab& vocab) {
  if (table.offset() != vocab.size()) {
    throw InputError(fmt::format("phrase table offset {} does not match vocab size {}", table.offset(), vocab.size()));
  }
  const auto spans = word_spans(text);
  auto word_at = [&](std::size_t i) { return text.substr(spans[i].begin, spans[i].end - spans[i].begin); };

  // Word-level trie over the phrase table; terminal holds the lowest phrase index.
  struct Node {
    std::map<std::string, int, std::less<>> next;
    int phrase = -1;
  };
  std::vector<Node> trie(1);
  for (std::size_t j = 0; j < table.size(); ++j) {
    int node = 0;
    for (const auto& w : split_words(table.phrase(j).surface)) {
      auto it = trie[node].next.find(w);
      if (it == trie[node].next.end()) {
        trie.emplace_back();
        it = trie[node].next.emplace(w, static_cast<int>(trie.size() - 1)).first;
      }
      node = it->second;
    }
    if (trie[node].phrase < 0) trie[node].phrase = static_cast<int>(j);
  }

  std::vector<Segment> segments;
  std::size_t i = 0;
  while (i < spans.size()) {
    int node = 0;
    int best_phrase = -1;
    std::size_t best_len = 0;
    for (std::size_t k = i; k < spans.size(); ++k) {
      auto it = trie[node].next.find(word_at(k));
      if (it == trie[node].next.end()) break;
      node = it->second;
      if (trie[node].phrase >= 0) {
        best_phrase = trie[node].phrase;
        best_len = k - i + 1;
      }
    }
    if (best_phrase >= 0) {
      const auto& p = table.phrase(static_cast<std::size_t>(best_phrase));
      segments.push_back({p.surface, SegmentKind::kPhrase, spans[i].begin, spans[i + best_len - 1].end,
                          table.id_of_phrase(static_cast<std::size_t>(best_phrase))});
      i += best_len;
    } else {
      auto w = word_at(i);
      segments.push_back({std::string(w), SegmentKind::kToken, spans[i].begin, spans[i].end, vocab.id_of(w)});
      ++i;
    }
  }
  return segments;
}

MixedSequence encode(std::string_view text, const PhraseTable& table, const StaticVocab& vocab) {
  MixedSequence seq;
  for (const auto& s : tokenize(text, table, vocab)) {
    seq.ids.push_back(s.id);
    seq.spans.push_back({s.begin, s.end});
  }
  return seq;
}

const std::string& surface_of(MixedId id, const PhraseTable& table, const StaticVocab& vocab) {
  if (is_token_id(id, vocab)) return vocab.surface(id);
  if (table.is_phrase_id(id)) return table.phrase(static_cast<std::size_t>(id) - table.offset()).surface;
  throw InputError(fmt::format("unknown id {} (|V| = {}, m = {})", id, vocab.size(), table.size()));
}

std::string decode(std::span<const MixedId> ids, const PhraseTable& table, const StaticVocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += surface_of(ids[i], table, vocab);
  }
  return out;
}

nlohmann::json segmentation_to_json(const MixedSequence& seq, const std::vector<Segment>& segments) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : segments) segs.push_back({{"text", s.text}, {"kind", to_string(s.kind)}});
  return {{"ids", seq.ids}, {"segments", std::move(segs)}};
}

}  // namespace dva
