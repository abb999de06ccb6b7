#include "dva/inference_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include <fmt/format.h>

namespace dva {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct DecodeTask {
  std::string prefix;
  const PhraseTable* table = nullptr;
  std::vector<MixedId> forced;
};

struct DecodeOutput {
  std::vector<MixedId> ids;
  std::vector<GenStep> steps;
  std::vector<MixedId> union_ids;
};

void check_pipeline(const Pipeline& p) {
  if (p.model == nullptr || p.vocab == nullptr) throw std::invalid_argument("pipeline needs a model and a vocabulary");
  if (p.model->config().vocab_size != p.vocab->size()) {
    throw std::invalid_argument("model and vocabulary sizes disagree");
  }
}

std::uint64_t rng_key(const GenerationConfig& config, std::string_view prefix) {
  return mix_seed(config.seed, fnv1a(normalize_whitespace(prefix)));
}

// Indices of the `count` largest positive probabilities, descending, ties
// to the lower id.
std::vector<int> top_indices(const std::vector<double>& probs, std::size_t count) {
  auto before = [&](int a, int b) {
    const double pa = probs[static_cast<std::size_t>(a)], pb = probs[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  };
  std::vector<int> heap;  // min-heap under `before`: front is the weakest kept entry
  heap.reserve(count + 1);
  double floor = 0.0;  // entries below the weakest kept one cannot enter
  for (std::size_t i = 0; i < probs.size() && count > 0; ++i) {
    if (probs[i] < floor || !(probs[i] > 0.0)) continue;
    const int id = static_cast<int>(i);
    if (heap.size() < count) {
      heap.push_back(id);
      std::push_heap(heap.begin(), heap.end(), before);
    } else if (before(id, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), before);
      heap.back() = id;
      std::push_heap(heap.begin(), heap.end(), before);
    } else {
      continue;
    }
    if (heap.size() == count) floor = probs[static_cast<std::size_t>(heap.front())];
  }
  std::sort(heap.begin(), heap.end(), before);
  return heap;
}

void mask_phrases(double* logits, std::size_t vocab_size, const CandidateMask& mask) {
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (!mask.allowed[j]) logits[vocab_size + j] = kNegInf;
  }
}

int sample_index(const std::vector<double>& probs, const GenerationConfig& config, std::uint64_t key, int step) {
  std::vector<int> pool;
  if (config.top_k > 0) {
    pool = top_indices(probs, static_cast<std::size_t>(config.top_k));
  } else {
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) pool.push_back(static_cast<int>(i));
    }
  }
  double mass = 0.0;
  for (int i : pool) mass += probs[static_cast<std::size_t>(i)];
  std::mt19937_64 rng(mix_seed(key, static_cast<std::uint64_t>(step)));
  const double u = std::uniform_real_distribution<double>(0.0, mass)(rng);
  double acc = 0.0;
  for (int i : pool) {
    acc += probs[static_cast<std::size_t>(i)];
    if (u < acc) return i;
  }
  return pool.back();
}

std::vector<DecodeOutput> run_decode(std::span<const DecodeTask> tasks, const Pipeline& pipeline,
                                     const GenerationConfig& config, PhraseTable& union_table,
                                     std::vector<CandidateMask>& masks, const DecodeObserver* observer = nullptr) {
  const DvaModel& model = *pipeline.model;
  const StaticVocab& vocab = *pipeline.vocab;
  const auto V = static_cast<MixedId>(vocab.size());
  const int B = static_cast<int>(tasks.size());

  // union table and own <-> union id maps
  std::vector<std::string> surfaces;
  std::unordered_map<std::string, int> position;
  std::vector<std::vector<int>> own_to_union(tasks.size());
  for (std::size_t b = 0; b < tasks.size(); ++b) {
    for (const auto& ph : tasks[b].table->phrases()) {
      auto [it, fresh] = position.emplace(ph.surface, static_cast<int>(surfaces.size()));
      if (fresh) surfaces.push_back(ph.surface);
      own_to_union[b].push_back(it->second);
    }
  }
  union_table = PhraseTable::build(surfaces, vocab, 1);
  const auto M = static_cast<MixedId>(union_table.size());
  masks.assign(tasks.size(), CandidateMask::all(union_table.size(), false));
  std::vector<std::vector<int>> union_to_own(tasks.size(), std::vector<int>(union_table.size(), -1));
  for (std::size_t b = 0; b < tasks.size(); ++b) {
    for (std::size_t j = 0; j < own_to_union[b].size(); ++j) {
      masks[b].allowed[static_cast<std::size_t>(own_to_union[b][j])] = 1;
      union_to_own[b][static_cast<std::size_t>(own_to_union[b][j])] = static_cast<int>(j);
    }
  }
  auto to_union = [&](std::size_t b, MixedId id) {
    return id < V ? id : V + own_to_union[b].at(static_cast<std::size_t>(id - V));
  };
  auto to_own = [&](std::size_t b, MixedId id) {
    return id < V ? id : V + union_to_own[b][static_cast<std::size_t>(id - V)];
  };

  // contexts: <bos> + prefix encoded with the sample's own table + forced ids
  const int remaining = config.max_new_ids;
  std::vector<std::vector<int>> contexts;
  std::vector<int> start_step(tasks.size());
  int longest = 0;
  for (std::size_t b = 0; b < tasks.size(); ++b) {
    const auto& t = tasks[b];
    std::vector<int> ctx{vocab.bos_id()};
    for (MixedId id : encode(normalize_whitespace(t.prefix), *t.table, vocab).ids) ctx.push_back(to_union(b, id));
    for (MixedId id : t.forced) {
      if (id < 0 || id >= static_cast<MixedId>(t.table->total_ids())) {
        throw InputError(fmt::format("forced id {} is outside the sample's id space", id));
      }
      ctx.push_back(to_union(b, id));
    }
    start_step[b] = static_cast<int>(t.forced.size());
    const int prefix_len = static_cast<int>(ctx.size()) - start_step[b];
    if (prefix_len + remaining > model.config().max_seq_len) {
      throw InputError(fmt::format("prefix of {} ids leaves no room for {} new ids within max_seq_len {}", prefix_len,
                                   remaining, model.config().max_seq_len));
    }
    longest = std::max(longest, static_cast<int>(ctx.size()));
    contexts.push_back(std::move(ctx));
  }

  // the token tables are read in place; only the phrase rows are new
  const Matrix& token_in = model.input_embeddings();
  const Matrix& token_out = model.output_embeddings();
  const Matrix phrase_rows = encode_phrases(union_table, model).rows;
  const int min_start = *std::min_element(start_step.begin(), start_step.end());
  StackRunner runner(model, model.backbone(), B, longest + (config.max_new_ids - min_start) + 1);
  const IdBatch prompt = IdBatch::left_padded(contexts);
  Matrix hidden_all = runner.append(prompt, token_in, phrase_rows);
  Matrix hidden(B, hidden_all.cols());
  for (int b = 0; b < B; ++b) hidden.row(b) = hidden_all.row(static_cast<Eigen::Index>(b) * prompt.time + prompt.time - 1);

  std::vector<DecodeOutput> out(tasks.size());
  std::vector<char> done(tasks.size(), 0);
  std::vector<int> step(start_step);
  std::vector<std::uint64_t> keys;
  for (const auto& t : tasks) keys.push_back(rng_key(config, t.prefix));
  for (std::size_t b = 0; b < tasks.size(); ++b) done[b] = step[b] >= config.max_new_ids;

  const auto width = static_cast<Eigen::Index>(V + M);
  std::vector<double> probs(static_cast<std::size_t>(width));
  Matrix logits(B, width);
  while (std::find(done.begin(), done.end(), 0) != done.end()) {
    kernels::row_dots(hidden, token_out, logits, 0);
    if (M > 0) kernels::row_dots(hidden, phrase_rows, logits, V);
    IdBatch next{B, 1, std::vector<int>(static_cast<std::size_t>(B), kPadSlot)};
    for (int b = 0; b < B; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      if (done[bi]) continue;
      auto z = logits.row(b);
      mask_phrases(z.data(), vocab.size(), masks[bi]);
      z(vocab.bos_id()) = kNegInf;
      z(vocab.pad_id()) = kNegInf;
      z(vocab.unk_id()) = kNegInf;
      if (step[bi] < config.min_new_ids) z(vocab.eos_id()) = kNegInf;
      // maxCoeff() vectorizes, the indexed form does not; the first entry
      // equal to the maximum is the same id either way
      const double zmax = z.maxCoeff();
      const auto argmax = std::find(z.data(), z.data() + width, zmax) - z.data();
      Eigen::Map<Eigen::RowVectorXd> p(probs.data(), width);
      p = ((z.array() - zmax) / config.temperature).exp();
      // the vectorized exp maps -inf to a denormal, not 0
      p = (z.array() == kNegInf).select(0.0, p.array());
      p /= p.sum();
      if (observer) (*observer)(bi, step[bi], probs);
      const int y = config.strategy == DecodeStrategy::kGreedy ? static_cast<int>(argmax)
                                                               : sample_index(probs, config, keys[bi], step[bi]);
      if (y == vocab.eos_id()) {
        done[bi] = 1;
        continue;
      }
      GenStep gs;
      gs.chosen = to_own(bi, y);
      gs.probability = probs[static_cast<std::size_t>(y)];
      auto top = top_indices(probs, static_cast<std::size_t>(config.top_candidates));
      if (std::find(top.begin(), top.end(), y) == top.end()) top.push_back(y);
      for (int c : top) gs.candidates.push_back({to_own(bi, c), probs[static_cast<std::size_t>(c)]});
      out[bi].steps.push_back(std::move(gs));
      out[bi].ids.push_back(to_own(bi, y));
      out[bi].union_ids.push_back(y);
      next.ids[bi] = y;
      if (++step[bi] >= config.max_new_ids) done[bi] = 1;
    }
    if (std::find(done.begin(), done.end(), 0) == done.end()) break;
    hidden = runner.append(next, token_in, phrase_rows);
  }
  return out;
}

BatchResult assemble(std::span<const std::string> prefixes, std::vector<PhraseTable> tables,
                     std::vector<std::vector<Hit>> hits, const Pipeline& pipeline, const GenerationConfig& config,
                     StageTimings timings, const DecodeObserver* observer = nullptr) {
  std::vector<DecodeTask> tasks;
  for (std::size_t i = 0; i < prefixes.size(); ++i) tasks.push_back({prefixes[i], &tables[i], {}});
  BatchResult result;
  const auto t0 = Clock::now();
  auto outs = run_decode(tasks, pipeline, config, result.table, result.masks, observer);
  timings.generation += seconds_since(t0);
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    GenerationSession s;
    s.prefix = normalize_whitespace(prefixes[i]);
    s.table = std::move(tables[i]);
    s.hits = std::move(hits[i]);
    s.ids = std::move(outs[i].ids);
    s.steps = std::move(outs[i].steps);
    s.config = config;
    result.union_ids.push_back(std::move(outs[i].union_ids));
    result.sessions.push_back(std::move(s));
  }
  result.timings = timings;
  return result;
}

}  // namespace

DecodeStrategy parse_decode_strategy(std::string_view name) {
  if (name == "greedy") return DecodeStrategy::kGreedy;
  if (name == "sample") return DecodeStrategy::kSample;
  throw std::invalid_argument(fmt::format("unknown decoding strategy '{}' (expected greedy or sample)", name));
}

std::string_view to_string(DecodeStrategy s) { return s == DecodeStrategy::kGreedy ? "greedy" : "sample"; }

void GenerationConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("generation.temperature must be positive");
  if (top_k < 0) throw std::invalid_argument("generation.top_k must be >= 0");
  if (min_new_ids < 0 || max_new_ids < 1) throw std::invalid_argument("generation.max_new_ids must be >= 1");
  if (min_new_ids > max_new_ids) throw std::invalid_argument("generation.min_new_ids exceeds max_new_ids");
  if (k_docs < 0) throw std::invalid_argument("generation.k_docs must be >= 0");
  if (candidate_cap < 0) throw std::invalid_argument("generation.candidate_cap must be >= 0");
  if (top_candidates < 1) throw std::invalid_argument("generation.top_candidates must be >= 1");
}

std::vector<double> process_logits(std::span<const double> logits, std::size_t vocab_size, const CandidateMask& mask) {
  if (logits.size() != vocab_size + mask.size()) {
    throw std::invalid_argument(fmt::format("logits length {} does not match |V|={} plus {} phrase slots", logits.size(),
                                            vocab_size, mask.size()));
  }
  std::vector<double> out(logits.begin(), logits.end());
  mask_phrases(out.data(), vocab_size, mask);
  return out;
}

std::vector<std::string> build_phrase_candidates(std::string_view /*prefix*/, std::span<const std::string> docs,
                                                 const PhraseSampler& sampler, const SamplerConfig& config,
                                                 std::size_t cap) {
  if (docs.empty() || cap == 0) return {};
  auto all = sampler.sample(docs, config);
  std::vector<std::string> out;
  std::unordered_map<std::string, bool> seen;
  for (auto& s : all) {
    if (out.size() >= cap) break;
    if (seen.emplace(s, true).second) out.push_back(std::move(s));
  }
  return out;
}

StageTimings& StageTimings::operator+=(const StageTimings& o) {
  retrieval += o.retrieval;
  sampling += o.sampling;
  generation += o.generation;
  return *this;
}

std::string GenerationSession::text(const StaticVocab& vocab) const { return decode(ids, table, vocab); }

nlohmann::json GenerationSession::to_json(const StaticVocab& vocab) const {
  auto kind = [&](MixedId id) { return std::string(to_string(is_token_id(id, vocab) ? SegmentKind::kToken : SegmentKind::kPhrase)); };
  nlohmann::json segments = nlohmann::json::array();
  nlohmann::json steps_json = nlohmann::json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    segments.push_back({{"id", ids[i]},
                        {"text", surface_of(ids[i], table, vocab)},
                        {"kind", kind(ids[i])},
                        {"probability", steps[i].probability}});
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : steps[i].candidates) {
      cands.push_back({{"id", c.id}, {"text", surface_of(c.id, table, vocab)}, {"kind", kind(c.id)},
                       {"probability", c.probability}});
    }
    steps_json.push_back({{"chosen", steps[i].chosen}, {"probability", steps[i].probability}, {"candidates", cands}});
  }
  nlohmann::json hits_json = nlohmann::json::array();
  for (const auto& h : hits) hits_json.push_back({{"doc_id", h.doc_id}, {"score", h.score}});
  return {{"session_id", session_id},
          {"prefix", prefix},
          {"vocab_size", vocab.size()},
          {"phrases", table.surfaces()},
          {"retrieved", hits_json},
          {"ids", ids},
          {"text", text(vocab)},
          {"segments", segments},
          {"steps", steps_json}};
}

BatchResult decode_with_tables(std::span<const std::string> prefixes, std::span<const PhraseTable> tables,
                               const Pipeline& pipeline, const GenerationConfig& config,
                               const DecodeObserver* observer) {
  check_pipeline(pipeline);
  config.validate();
  if (prefixes.empty()) throw std::invalid_argument("generation needs at least one prefix");
  if (tables.size() != prefixes.size()) throw std::invalid_argument("one phrase table per prefix is required");
  return assemble(prefixes, std::vector<PhraseTable>(tables.begin(), tables.end()),
                  std::vector<std::vector<Hit>>(prefixes.size()), pipeline, config, {}, observer);
}

BatchResult generate_batch(std::span<const std::string> prefixes, const Pipeline& pipeline,
                           const GenerationConfig& config) {
  check_pipeline(pipeline);
  config.validate();
  if (prefixes.empty()) throw std::invalid_argument("generation needs at least one prefix");
  StageTimings timings;
  std::vector<std::vector<Hit>> hits(prefixes.size());
  std::vector<PhraseTable> tables;
  const bool retrieval = pipeline.index != nullptr && !pipeline.index->empty() && config.k_docs > 0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    if (normalize_whitespace(prefixes[i]).empty()) throw InputError("prefix must not be empty");
    std::vector<std::string> docs;
    if (retrieval) {
      const auto t0 = Clock::now();
      hits[i] = retrieve(prefixes[i], *pipeline.index, static_cast<std::size_t>(config.k_docs), *pipeline.model,
                         *pipeline.vocab);
      timings.retrieval += seconds_since(t0);
      if (pipeline.documents == nullptr) throw std::invalid_argument("retrieval needs the indexed documents");
      for (const auto& h : hits[i]) docs.push_back(pipeline.documents->documents.at(static_cast<std::size_t>(h.doc_id)).text);
    }
    const auto t1 = Clock::now();
    std::vector<std::string> surfaces;
    if (pipeline.sampler) {
      surfaces = build_phrase_candidates(prefixes[i], docs, *pipeline.sampler, pipeline.sampler_config,
                                         static_cast<std::size_t>(config.candidate_cap));
    }
    tables.push_back(PhraseTable::build_lenient(surfaces, *pipeline.vocab, pipeline.sampler_config.min_phrase_tokens));
    timings.sampling += seconds_since(t1);
  }
  return assemble(prefixes, std::move(tables), std::move(hits), pipeline, config, timings);
}

GenerationSession generate_single(std::string_view prefix, const std::optional<std::vector<std::string>>& explicit_phrases,
                                  const Pipeline& pipeline, const GenerationConfig& config) {
  const std::vector<std::string> one{std::string(prefix)};
  if (!explicit_phrases) return std::move(generate_batch(one, pipeline, config).sessions.front());
  check_pipeline(pipeline);
  if (normalize_whitespace(prefix).empty()) throw InputError("prefix must not be empty");
  std::vector<std::string> unique;
  for (const auto& p : *explicit_phrases) {
    std::string s = normalize_whitespace(p);
    if (std::find(unique.begin(), unique.end(), s) == unique.end()) unique.push_back(std::move(s));
  }
  const std::vector<PhraseTable> tables{PhraseTable::build(unique, *pipeline.vocab)};
  return std::move(decode_with_tables(one, tables, pipeline, config).sessions.front());
}

GenerationSession continue_generation(std::string_view prefix, const PhraseTable& table,
                                      std::span<const MixedId> forced, const Pipeline& pipeline,
                                      const GenerationConfig& config) {
  check_pipeline(pipeline);
  config.validate();
  if (static_cast<int>(forced.size()) > config.max_new_ids) {
    throw InputError("more forced ids than max_new_ids allows");
  }
  for (MixedId id : forced) {
    if (id == pipeline.vocab->eos_id() || id == pipeline.vocab->bos_id() || id == pipeline.vocab->pad_id()) {
      throw InputError(fmt::format("id {} is a control id and cannot be forced", id));
    }
  }
  const DecodeTask task{std::string(prefix), &table, std::vector<MixedId>(forced.begin(), forced.end())};
  PhraseTable union_table;
  std::vector<CandidateMask> masks;
  auto outs = run_decode(std::span<const DecodeTask>(&task, 1), pipeline, config, union_table, masks);
  GenerationSession s;
  s.prefix = normalize_whitespace(prefix);
  s.table = table;
  s.config = config;
  s.ids.assign(forced.begin(), forced.end());
  s.ids.insert(s.ids.end(), outs[0].ids.begin(), outs[0].ids.end());
  s.steps = std::move(outs[0].steps);
  return s;
}

GenerationSession steer(const GenerationSession& session, std::size_t position, MixedId replacement,
                        const Pipeline& pipeline) {
  if (position >= session.steps.size()) {
    throw InputError(fmt::format("position {} is outside the session's {} steps", position, session.steps.size()));
  }
  const auto& cands = session.steps[position].candidates;
  auto it = std::find_if(cands.begin(), cands.end(), [&](const Candidate& c) { return c.id == replacement; });
  if (it == cands.end()) {
    throw InputError(fmt::format("id {} is not among the stored candidates at position {}", replacement, position));
  }
  if (replacement == pipeline.vocab->eos_id()) throw InputError("steering to <eos> is not supported");
  std::vector<MixedId> forced(session.ids.begin(), session.ids.begin() + static_cast<std::ptrdiff_t>(position));
  forced.push_back(replacement);
  GenerationSession next = continue_generation(session.prefix, session.table, forced, pipeline, session.config);
  std::vector<GenStep> steps(session.steps.begin(), session.steps.begin() + static_cast<std::ptrdiff_t>(position));
  GenStep replaced = session.steps[position];
  replaced.chosen = replacement;
  replaced.probability = it->probability;
  steps.push_back(std::move(replaced));
  steps.insert(steps.end(), next.steps.begin(), next.steps.end());
  next.steps = std::move(steps);
  next.hits = session.hits;
  return next;
}

}  // namespace dva
