#include "dva/text_base.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include "json.hpp"

namespace dva {
namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::vector<WordSpan> word_spans(std::string_view text) {
  std::vector<WordSpan> spans;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i == text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    spans.push_back({i, j});
    i = j;
  }
  return spans;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  for (const auto& s : word_spans(text)) words.emplace_back(text.substr(s.begin, s.end - s.begin));
  return words;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

StaticVocab::StaticVocab(std::vector<std::string> entries) : entries_(std::move(entries)) {
  ids_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.empty() || std::any_of(e.begin(), e.end(), is_space)) {
      throw InputError(fmt::format("vocab entry {} is empty or contains whitespace", i));
    }
    if (!ids_.emplace(e, static_cast<TokenId>(i)).second) {
      throw InputError(fmt::format("duplicate vocab entry '{}'", e));
    }
  }
  auto reserved = [&](std::string_view s) {
    auto it = ids_.find(std::string(s));
    if (it == ids_.end()) throw InputError(fmt::format("vocab is missing reserved entry {}", s));
    return it->second;
  };
  unk_ = reserved(kUnkSurface);
  bos_ = reserved(kBosSurface);
  eos_ = reserved(kEosSurface);
  pad_ = reserved(kPadSurface);
}

const std::string& StaticVocab::surface(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    throw InputError(fmt::format("token id {} out of range for vocab of size {}", id, entries_.size()));
  }
  return entries_[static_cast<std::size_t>(id)];
}

TokenId StaticVocab::id_of(std::string_view surface) const {
  auto it = ids_.find(std::string(surface));
  return it == ids_.end() ? unk_ : it->second;
}

bool StaticVocab::contains(std::string_view surface) const {
  return ids_.count(std::string(surface)) != 0;
}

std::uint64_t StaticVocab::fingerprint() const {
  std::uint64_t h = fnv1a("dva-vocab");
  for (const auto& e : entries_) {
    h = fnv1a(e, h);
    h = fnv1a(std::string_view("\n", 1), h);
  }
  return h;
}

void StaticVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(fmt::format("cannot write vocab file {}", path.string()));
  out << "dva-vocab v1 " << entries_.size() << '\n';
  for (const auto& e : entries_) out << e << '\n';
  if (!out) throw InputError(fmt::format("failed writing vocab file {}", path.string()));
}

StaticVocab StaticVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read vocab file {}", path.string()));
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic, version;
  std::size_t size = 0;
  if (!(hs >> magic >> version >> size) || magic != "dva-vocab" || version != "v1") {
    throw InputError(fmt::format("{}: not a dva-vocab v1 file", path.string()));
  }
  std::vector<std::string> entries;
  entries.reserve(size);
  std::string line;
  while (entries.size() < size && std::getline(in, line)) entries.push_back(line);
  if (entries.size() != size) {
    throw InputError(fmt::format("{}: expected {} entries, found {}", path.string(), size, entries.size()));
  }
  return StaticVocab(std::move(entries));
}

DocumentSet DocumentSet::from_texts(std::span<const std::string> texts) {
  DocumentSet set;
  set.documents.reserve(texts.size());
  for (const auto& t : texts) {
    set.documents.push_back({static_cast<std::int64_t>(set.documents.size()), normalize_whitespace(t)});
  }
  return set;
}

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "plain-lines" || name == "plain") return CorpusFormat::kPlainLines;
  if (name == "json-lines" || name == "jsonl") return CorpusFormat::kJsonLines;
  throw InputError(fmt::format("unknown corpus format '{}'", name));
}

DocumentSet load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read corpus file {}", path.string()));
  DocumentSet set;
  set.source_path = path.string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string text;
    if (format == CorpusFormat::kPlainLines) {
      text = normalize_whitespace(line);
      if (text.empty()) continue;
    } else {
      if (normalize_whitespace(line).empty()) continue;
      nlohmann::json record;
      try {
        record = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw InputError(fmt::format("{}:{}: malformed json record: {}", path.string(), line_no, e.what()));
      }
      if (!record.is_object() || !record.contains("text") || !record["text"].is_string()) {
        throw InputError(fmt::format("{}:{}: record has no string \"text\" field", path.string(), line_no));
      }
      text = normalize_whitespace(record["text"].get<std::string>());
    }
    set.documents.push_back({static_cast<std::int64_t>(set.documents.size()), std::move(text)});
  }
  return set;
}

StaticVocab train_static_vocab(const DocumentSet& corpus, std::size_t target_size) {
  constexpr std::size_t kReserved = 4;
  if (corpus.empty()) throw InputError("cannot train a vocabulary on an empty corpus");
  if (target_size < kReserved) {
    throw InputError(fmt::format("target vocab size {} leaves no room for {} reserved ids", target_size, kReserved));
  }
  struct Count {
    std::size_t freq = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Count> counts;
  std::vector<std::string> order;
  for (const auto& doc : corpus.documents) {
    for (auto& w : split_words(doc.text)) {
      auto [it, inserted] = counts.try_emplace(w, Count{0, order.size()});
      if (inserted) order.push_back(w);
      ++it->second.freq;
    }
  }
  std::vector<std::string> words;
  for (auto& w : order) {
    if (w != kUnkSurface && w != kBosSurface && w != kEosSurface && w != kPadSurface) words.push_back(w);
  }
  std::stable_sort(words.begin(), words.end(), [&](const std::string& a, const std::string& b) {
    return counts.at(a).freq > counts.at(b).freq;
  });
  if (words.size() > target_size - kReserved) words.resize(target_size - kReserved);

  std::vector<std::string> entries{std::string(kUnkSurface), std::string(kBosSurface),
                                   std::string(kEosSurface), std::string(kPadSurface)};
  entries.insert(entries.end(), words.begin(), words.end());
  return StaticVocab(std::move(entries));
}

std::vector<TokenId> encode_static(std::string_view text, const StaticVocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& s : word_spans(text)) ids.push_back(vocab.id_of(text.substr(s.begin, s.end - s.begin)));
  return ids;
}

std::string decode_static(std::span<const TokenId> ids, const StaticVocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.surface(ids[i]);
  }
  return out;
}

}  // namespace dva
