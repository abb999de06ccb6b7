#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dva {

using TokenId = std::int32_t;

/// Raised for malformed inputs: unreadable files, bad records, bad ids.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kUnkSurface = "<unk>";
inline constexpr std::string_view kBosSurface = "<bos>";
inline constexpr std::string_view kEosSurface = "<eos>";
inline constexpr std::string_view kPadSurface = "<pad>";

// Collapses every run of ASCII whitespace to one space and trims both ends.
std::string normalize_whitespace(std::string_view text);

// Whitespace-delimited words of `text` (no normalization needed by callers).
std::vector<std::string> split_words(std::string_view text);

std::string join_words(std::span<const std::string> words);

struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Byte ranges of each whitespace-delimited word in `text`.
std::vector<WordSpan> word_spans(std::string_view text);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);

/// Fixed word-level vocabulary. Ids are dense in [0, size()).
class StaticVocab {
 public:
  StaticVocab() = default;

  // `entries` must contain the four reserved surfaces exactly once each.
  explicit StaticVocab(std::vector<std::string> entries);

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }
  const std::string& surface(TokenId id) const;

  TokenId id_of(std::string_view surface) const;  // unk_id() when absent
  bool contains(std::string_view surface) const;

  TokenId unk_id() const { return unk_; }
  TokenId bos_id() const { return bos_; }
  TokenId eos_id() const { return eos_; }
  TokenId pad_id() const { return pad_; }
  bool is_reserved(TokenId id) const {
    return id == unk_ || id == bos_ || id == eos_ || id == pad_;
  }

  std::uint64_t fingerprint() const;

  void save(const std::filesystem::path& path) const;
  static StaticVocab load(const std::filesystem::path& path);

  friend bool operator==(const StaticVocab& a, const StaticVocab& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> ids_;
  TokenId unk_ = -1, bos_ = -1, eos_ = -1, pad_ = -1;
};

struct Document {
  std::int64_t doc_id = 0;
  std::string text;
};

struct DocumentSet {
  std::vector<Document> documents;
  std::string source_path;

  std::size_t size() const { return documents.size(); }
  bool empty() const { return documents.empty(); }

  static DocumentSet from_texts(std::span<const std::string> texts);
};

enum class CorpusFormat { kPlainLines, kJsonLines };

CorpusFormat parse_corpus_format(std::string_view name);

// Blank lines are skipped in plain-lines format; doc ids stay dense.
DocumentSet load_corpus(const std::filesystem::path& path, CorpusFormat format);

// Reserved surfaces take ids 0..3, then the most frequent words with ties
// broken by first occurrence.
StaticVocab train_static_vocab(const DocumentSet& corpus, std::size_t target_size);

std::vector<TokenId> encode_static(std::string_view text, const StaticVocab& vocab);
std::string decode_static(std::span<const TokenId> ids, const StaticVocab& vocab);

}  // namespace dva
