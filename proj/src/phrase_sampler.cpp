#include "dva/phrase_sampler.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include <fmt/format.h>

namespace dva {
namespace {

bool has_unk(std::span<const TokenId> ids, const StaticVocab& vocab) {
  return std::find(ids.begin(), ids.end(), vocab.unk_id()) != ids.end();
}

std::vector<std::string> dedup_capped(std::vector<std::string> surfaces, int cap) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (auto& s : surfaces) {
    if (static_cast<int>(out.size()) >= cap) break;
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

// Seeded window sampling shared by the ntoken and nword strategies.
template <typename Window>
std::vector<std::string> sample_windows(std::size_t length, const SamplerConfig& config, Window&& window) {
  const auto n = static_cast<std::size_t>(config.n);
  if (config.max_phrases <= 0 || n > length || config.n < config.min_phrase_tokens) return {};
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i + n <= length; ++i) {
    if (window(i, /*probe=*/true)) starts.push_back(i);
  }
  auto picks = draw_without_replacement(starts.size(), static_cast<std::size_t>(config.max_phrases), config.seed);
  std::vector<std::string> surfaces;
  surfaces.reserve(picks.size());
  for (auto p : picks) surfaces.push_back(*window(starts[p], false));
  return dedup_capped(std::move(surfaces), config.max_phrases);
}

}  // namespace

SamplerStrategy parse_sampler_strategy(std::string_view name) {
  if (name == "ntoken") return SamplerStrategy::kNToken;
  if (name == "nword") return SamplerStrategy::kNWord;
  if (name == "fmm") return SamplerStrategy::kFmm;
  throw std::invalid_argument(fmt::format("unknown sampler strategy '{}'", name));
}

std::string_view to_string(SamplerStrategy s) {
  switch (s) {
    case SamplerStrategy::kNToken: return "ntoken";
    case SamplerStrategy::kNWord: return "nword";
    case SamplerStrategy::kFmm: return "fmm";
  }
  return "?";
}

void SamplerConfig::validate() const {
  if (n < 1) throw std::invalid_argument("sampler.n must be >= 1");
  if (max_phrases < 0) throw std::invalid_argument("sampler.max_phrases must be >= 0");
  if (min_phrase_tokens < 2) throw std::invalid_argument("sampler.min_phrase_tokens must be >= 2");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::size_t> draw_without_replacement(std::size_t population, std::size_t count,
                                                  std::uint64_t seed) {
  count = std::min(count, population);
  std::vector<std::size_t> pool(population);
  for (std::size_t i = 0; i < population; ++i) pool[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

// --- CorpusIndex -------------------------------------------------------------

int CorpusIndex::extend(int last, TokenId c) {
  auto existing = states_[last].next.find(c);
  if (existing != states_[last].next.end()) {
    const int q = existing->second;
    if (states_[q].len == states_[last].len + 1) return q;
    const int clone = static_cast<int>(states_.size());
    State copy = states_[q];
    copy.len = states_[last].len + 1;
    states_.push_back(std::move(copy));
    states_[q].link = clone;
    for (int p = last; p != -1; p = states_[p].link) {
      auto it = states_[p].next.find(c);
      if (it == states_[p].next.end() || it->second != q) break;
      it->second = clone;
    }
    return clone;
  }

  const int cur = static_cast<int>(states_.size());
  states_.push_back(State{states_[last].len + 1, -1, {}});
  int p = last;
  while (p != -1 && !states_[p].next.count(c)) {
    states_[p].next[c] = cur;
    p = states_[p].link;
  }
  if (p == -1) {
    states_[cur].link = 0;
    return cur;
  }
  const int q = states_[p].next[c];
  if (states_[p].len + 1 == states_[q].len) {
    states_[cur].link = q;
    return cur;
  }
  const int clone = static_cast<int>(states_.size());
  State copy = states_[q];
  copy.len = states_[p].len + 1;
  states_.push_back(std::move(copy));
  while (p != -1) {
    auto it = states_[p].next.find(c);
    if (it == states_[p].next.end() || it->second != q) break;
    it->second = clone;
    p = states_[p].link;
  }
  states_[q].link = clone;
  states_[cur].link = clone;
  return cur;
}

CorpusIndex CorpusIndex::build(std::span<const std::vector<TokenId>> sentences) {
  CorpusIndex index;
  index.states_.push_back(State{0, -1, {}});
  std::uint64_t h = fnv1a("dva-corpus-index");
  for (const auto& sentence : sentences) {
    int last = 0;
    for (TokenId id : sentence) {
      last = index.extend(last, id);
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(&id), sizeof id), h);
    }
    h = fnv1a("|", h);
  }
  index.fingerprint_ = h;
  return index;
}

CorpusIndex CorpusIndex::build(const DocumentSet& corpus, const StaticVocab& vocab) {
  if (corpus.empty()) throw InputError("cannot index an empty corpus");
  std::vector<std::vector<TokenId>> sentences;
  sentences.reserve(corpus.size());
  for (const auto& doc : corpus.documents) sentences.push_back(encode_static(doc.text, vocab));
  return build(sentences);
}

std::size_t CorpusIndex::longest_match(std::span<const TokenId> ids) const {
  if (states_.empty()) return 0;
  int s = 0;
  std::size_t m = 0;
  for (TokenId id : ids) {
    auto it = states_[s].next.find(id);
    if (it == states_[s].next.end()) break;
    s = it->second;
    ++m;
  }
  return m;
}

bool CorpusIndex::contains(std::span<const TokenId> span) const {
  return longest_match(span) == span.size();
}

bool CorpusIndex::contains(std::string_view text, const StaticVocab& vocab) const {
  auto ids = encode_static(text, vocab);
  return contains(ids);
}

// --- strategies --------------------------------------------------------------

std::vector<std::string> word_windows(std::string_view text, int n) {
  std::vector<std::string> out;
  if (n < 1) return out;
  auto words = split_words(text);
  const auto w = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + w <= words.size(); ++i) {
    out.push_back(join_words(std::span<const std::string>(words).subspan(i, w)));
  }
  return out;
}

std::vector<std::string> sample_ntoken(std::span<const TokenId> token_ids, const SamplerConfig& config,
                                       const StaticVocab& vocab) {
  const auto n = static_cast<std::size_t>(config.n);
  return sample_windows(token_ids.size(), config, [&](std::size_t i, bool probe) -> std::optional<std::string> {
    auto window = token_ids.subspan(i, n);
    if (probe) return has_unk(window, vocab) ? std::nullopt : std::optional<std::string>("");
    return decode_static(window, vocab);
  });
}

std::vector<std::string> sample_nword(std::string_view text, const SamplerConfig& config) {
  auto words = split_words(text);
  const auto n = static_cast<std::size_t>(config.n);
  return sample_windows(words.size(), config, [&](std::size_t i, bool probe) -> std::optional<std::string> {
    if (probe) return std::string();
    return join_words(std::span<const std::string>(words).subspan(i, n));
  });
}

std::vector<std::string> sample_fmm(std::string_view text, const CorpusIndex& index, const SamplerConfig& config,
                                    const StaticVocab& vocab) {
  auto ids = encode_static(text, vocab);
  const auto min_len = static_cast<std::size_t>(config.min_phrase_tokens);
  std::vector<std::string> found;
  std::size_t i = 0;
  while (i < ids.size()) {
    // <unk> never takes part in a phrase
    std::size_t stop = i;
    while (stop < ids.size() && ids[stop] != vocab.unk_id()) ++stop;
    const auto m = index.longest_match(std::span<const TokenId>(ids).subspan(i, stop - i));
    if (m >= min_len) {
      found.push_back(decode_static(std::span<const TokenId>(ids).subspan(i, m), vocab));
      i += m;
    } else {
      ++i;
    }
  }
  return dedup_capped(std::move(found), config.max_phrases);
}

// --- PhraseSampler implementations -------------------------------------------

namespace {

class NTokenSampler final : public PhraseSampler {
 public:
  explicit NTokenSampler(const StaticVocab& vocab) : vocab_(vocab) {}
  std::vector<std::string> sample(std::span<const std::string> docs, const SamplerConfig& config) const override {
    std::vector<std::string> all;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      SamplerConfig c = config;
      c.seed = mix_seed(config.seed, fnv1a(docs[d]));
      auto got = sample_ntoken(encode_static(docs[d], vocab_), c, vocab_);
      all.insert(all.end(), got.begin(), got.end());
    }
    return dedup_capped(std::move(all), std::numeric_limits<int>::max());
  }

 private:
  const StaticVocab& vocab_;
};

class NWordSampler final : public PhraseSampler {
 public:
  std::vector<std::string> sample(std::span<const std::string> docs, const SamplerConfig& config) const override {
    std::vector<std::string> all;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      SamplerConfig c = config;
      c.seed = mix_seed(config.seed, fnv1a(docs[d]));
      auto got = sample_nword(docs[d], c);
      all.insert(all.end(), got.begin(), got.end());
    }
    return dedup_capped(std::move(all), std::numeric_limits<int>::max());
  }
};

class FmmSampler final : public PhraseSampler {
 public:
  FmmSampler(const StaticVocab& vocab, std::shared_ptr<const CorpusIndex> reference)
      : vocab_(vocab), reference_(std::move(reference)) {}

  std::vector<std::string> sample(std::span<const std::string> docs, const SamplerConfig& config) const override {
    std::vector<std::string> all;
    std::vector<std::vector<TokenId>> encoded;
    if (!reference_) {
      for (const auto& d : docs) encoded.push_back(encode_static(d, vocab_));
    }
    for (std::size_t d = 0; d < docs.size(); ++d) {
      std::vector<std::string> got;
      if (reference_) {
        got = sample_fmm(docs[d], *reference_, config, vocab_);
      } else {
        std::vector<std::vector<TokenId>> others;
        for (std::size_t o = 0; o < encoded.size(); ++o) {
          if (o != d) others.push_back(encoded[o]);
        }
        got = sample_fmm(docs[d], CorpusIndex::build(others), config, vocab_);
      }
      all.insert(all.end(), got.begin(), got.end());
    }
    return dedup_capped(std::move(all), std::numeric_limits<int>::max());
  }

 private:
  const StaticVocab& vocab_;
  std::shared_ptr<const CorpusIndex> reference_;
};

}  // namespace

std::unique_ptr<PhraseSampler> make_ntoken_sampler(const StaticVocab& vocab) {
  return std::make_unique<NTokenSampler>(vocab);
}

std::unique_ptr<PhraseSampler> make_nword_sampler() { return std::make_unique<NWordSampler>(); }

std::unique_ptr<PhraseSampler> make_fmm_sampler(const StaticVocab& vocab,
                                                std::shared_ptr<const CorpusIndex> reference) {
  return std::make_unique<FmmSampler>(vocab, std::move(reference));
}

SamplerRegistry& SamplerRegistry::global() {
  static SamplerRegistry registry = [] {
    SamplerRegistry r;
    r.add("ntoken", [](const StaticVocab& v) { return make_ntoken_sampler(v); });
    r.add("nword", [](const StaticVocab&) { return make_nword_sampler(); });
    r.add("fmm", [](const StaticVocab& v) { return make_fmm_sampler(v); });
    return r;
  }();
  return registry;
}

void SamplerRegistry::add(std::string name, Factory factory) { factories_[std::move(name)] = std::move(factory); }

bool SamplerRegistry::has(std::string_view name) const { return factories_.find(name) != factories_.end(); }

std::unique_ptr<PhraseSampler> SamplerRegistry::create(std::string_view name, const StaticVocab& vocab) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) throw std::invalid_argument(fmt::format("no phrase sampler registered as '{}'", name));
  return it->second(vocab);
}

}  // namespace dva
