#include "dva/app_config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>

#include <fmt/format.h>

namespace dva {

namespace {

using Setter = std::function<void(const nlohmann::json&)>;

void apply_fields(const nlohmann::json& j, std::string_view section, const std::map<std::string, Setter>& fields) {
  if (!j.is_object()) throw std::invalid_argument(fmt::format("config section '{}' must be an object", section));
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto f = fields.find(it.key());
    if (f == fields.end()) throw std::invalid_argument(fmt::format("unknown config key '{}.{}'", section, it.key()));
    try {
      f->second(it.value());
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(fmt::format("config key '{}.{}': {}", section, it.key(), e.what()));
    }
  }
}

template <class T>
Setter set(T& field) {
  return [&field](const nlohmann::json& v) { field = v.get<T>(); };
}

}  // namespace

GenerationConfig generation_from_json(const nlohmann::json& j, GenerationConfig c) {
  apply_fields(j, "generation",
               {{"strategy", [&](const auto& v) { c.strategy = parse_decode_strategy(v.template get<std::string>()); }},
                {"temperature", set(c.temperature)},
                {"top_k", set(c.top_k)},
                {"min_new_ids", set(c.min_new_ids)},
                {"max_new_ids", set(c.max_new_ids)},
                {"seed", set(c.seed)},
                {"k_docs", set(c.k_docs)},
                {"candidate_cap", set(c.candidate_cap)},
                {"top_candidates", set(c.top_candidates)}});
  return c;
}

SamplerConfig sampler_from_json(const nlohmann::json& j, SamplerConfig c) {
  apply_fields(j, "sampler",
               {{"strategy", [&](const auto& v) { c.strategy = parse_sampler_strategy(v.template get<std::string>()); }},
                {"n", set(c.n)},
                {"max_phrases", set(c.max_phrases)},
                {"min_phrase_tokens", set(c.min_phrase_tokens)},
                {"seed", set(c.seed)}});
  return c;
}

nlohmann::json to_json(const GenerationConfig& c) {
  return {{"strategy", to_string(c.strategy)}, {"temperature", c.temperature},   {"top_k", c.top_k},
          {"min_new_ids", c.min_new_ids},      {"max_new_ids", c.max_new_ids},   {"seed", c.seed},
          {"k_docs", c.k_docs},                {"candidate_cap", c.candidate_cap}, {"top_candidates", c.top_candidates}};
}

nlohmann::json to_json(const SamplerConfig& c) {
  return {{"strategy", to_string(c.strategy)},
          {"n", c.n},
          {"max_phrases", c.max_phrases},
          {"min_phrase_tokens", c.min_phrase_tokens},
          {"seed", c.seed}};
}

AppConfig AppConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a json object");
  AppConfig c;
  auto& p = c.paths;
  auto& t = c.train;
  auto& s = c.server;
  auto& e = c.eval;
  apply_fields(
      j, "config",
      {{"paths",
        [&](const nlohmann::json& v) {
          apply_fields(v, "paths",
                       {{"corpus", set(p.corpus)},
                        {"corpus_format", set(p.corpus_format)},
                        {"vocab", set(p.vocab)},
                        {"checkpoint", set(p.checkpoint)},
                        {"index", set(p.index)},
                        {"test", set(p.test)},
                        {"train_log", set(p.train_log)},
                        {"output_dir", set(p.output_dir)}});
        }},
       {"model", [&](const nlohmann::json& v) { c.model = ModelConfig::from_json(v); }},
       {"train",
        [&](const nlohmann::json& v) {
          apply_fields(v, "train",
                       {{"batch_size", set(t.batch_size)},
                        {"mode", [&](const auto& x) { t.mode = parse_train_mode(x.template get<std::string>()); }},
                        {"lora_rank", set(t.lora_rank)},
                        {"lora_alpha", set(t.lora_alpha)},
                        {"learning_rate", set(t.learning_rate)},
                        {"steps", set(t.steps)},
                        {"seed", set(t.seed)},
                        {"grad_clip", set(t.grad_clip)},
                        {"beta1", set(t.beta1)},
                        {"beta2", set(t.beta2)},
                        {"adam_eps", set(t.adam_eps)}});
        }},
       {"sampler", [&](const nlohmann::json& v) { c.sampler = sampler_from_json(v, c.sampler); }},
       {"generation", [&](const nlohmann::json& v) { c.generation = generation_from_json(v, c.generation); }},
       {"server",
        [&](const nlohmann::json& v) {
          apply_fields(v, "server",
                       {{"host", set(s.host)}, {"port", set(s.port)}, {"session_capacity", set(s.session_capacity)}});
        }},
       {"eval", [&](const nlohmann::json& v) {
          apply_fields(v, "eval",
                       {{"prefix_words", set(e.prefix_words)},
                        {"max_texts", set(e.max_texts)},
                        {"batch_sizes", set(e.batch_sizes)},
                        {"forced_length", set(e.forced_length)},
                        {"repetitions", set(e.repetitions)}});
        }}});
  c.train.sampler = c.sampler;
  return c;
}

AppConfig AppConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open config '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(fmt::format("config '{}' is not valid json: {}", path.string(), e.what()));
  }
  AppConfig c = from_json(j);
  c.resolve_paths(path.parent_path());
  return c;
}

nlohmann::json AppConfig::to_json() const {
  return {{"paths",
           {{"corpus", paths.corpus},
            {"corpus_format", paths.corpus_format},
            {"vocab", paths.vocab},
            {"checkpoint", paths.checkpoint},
            {"index", paths.index},
            {"test", paths.test},
            {"train_log", paths.train_log},
            {"output_dir", paths.output_dir}}},
          {"model", model.to_json()},
          {"train",
           {{"batch_size", train.batch_size},
            {"mode", to_string(train.mode)},
            {"lora_rank", train.lora_rank},
            {"lora_alpha", train.lora_alpha},
            {"learning_rate", train.learning_rate},
            {"steps", train.steps},
            {"seed", train.seed},
            {"grad_clip", train.grad_clip},
            {"beta1", train.beta1},
            {"beta2", train.beta2},
            {"adam_eps", train.adam_eps}}},
          {"sampler", dva::to_json(sampler)},
          {"generation", dva::to_json(generation)},
          {"server", {{"host", server.host}, {"port", server.port}, {"session_capacity", server.session_capacity}}},
          {"eval",
           {{"prefix_words", eval.prefix_words},
            {"max_texts", eval.max_texts},
            {"batch_sizes", eval.batch_sizes},
            {"forced_length", eval.forced_length},
            {"repetitions", eval.repetitions}}}};
}

void AppConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw std::invalid_argument(fmt::format("override '{}' is not key=value", assignment));
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }

  // Build a sparse patch and replay it over the current values, so the same
  // key checks as the file apply.
  nlohmann::json patch = value;
  std::vector<std::string> parts;
  for (std::size_t start = 0;;) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (parts.size() < 2) throw std::invalid_argument(fmt::format("override key '{}' needs section.key", key));
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};

  nlohmann::json merged = to_json();
  merged.merge_patch(patch);
  // merge_patch accepts any key; reject ones the current config does not have.
  nlohmann::json probe = to_json();
  const nlohmann::json* node = &probe;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw std::invalid_argument(fmt::format("unknown config key '{}'", key));
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back()))
    throw std::invalid_argument(fmt::format("unknown config key '{}'", key));
  *this = from_json(merged);
}

void AppConfig::validate() const {
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 4;  // filled in from the vocab file later
  m.validate();
  train.validate();
  sampler.validate();
  generation.validate();
  parse_corpus_format(paths.corpus_format);
  if (server.port < 0 || server.port > 65535) throw std::invalid_argument("server.port out of range");
  if (server.session_capacity < 1) throw std::invalid_argument("server.session_capacity must be >= 1");
  if (eval.prefix_words < 1 || eval.forced_length < 1 || eval.repetitions < 1 || eval.max_texts < 0)
    throw std::invalid_argument("eval: prefix_words, forced_length and repetitions must be >= 1");
  for (int b : eval.batch_sizes)
    if (b < 1) throw std::invalid_argument("eval.batch_sizes must be positive");
}

void AppConfig::resolve_paths(const std::filesystem::path& base) {
  for (std::string* p : {&paths.corpus, &paths.vocab, &paths.checkpoint, &paths.index, &paths.test, &paths.train_log,
                         &paths.output_dir}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
}

}  // namespace dva
