#include "dva/service.hpp"

#include <algorithm>
#include <charconv>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "dva/app_config.hpp"

namespace dva {

SessionStore::SessionStore(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("session store capacity must be >= 1");
}

void SessionStore::put(std::shared_ptr<const GenerationSession> session) {
  std::lock_guard lock(mu_);
  const std::string id = session->session_id;
  if (auto it = by_id_.find(id); it != by_id_.end()) {
    order_.erase(it->second);
    by_id_.erase(it);
  }
  order_.emplace_front(id, std::move(session));
  by_id_[id] = order_.begin();
  while (order_.size() > capacity_) {
    by_id_.erase(order_.back().first);
    order_.pop_back();
  }
}

std::shared_ptr<const GenerationSession> SessionStore::get(const std::string& id) {
  std::lock_guard lock(mu_);
  const auto it = by_id_.find(id);
  if (it == by_id_.end()) return nullptr;
  order_.splice(order_.begin(), order_, it->second);
  return it->second->second;
}

std::size_t SessionStore::size() const {
  std::lock_guard lock(mu_);
  return order_.size();
}

CandidateFilter parse_candidate_filter(std::string_view name) {
  if (name == "phrases") return CandidateFilter::kPhrases;
  if (name == "tokens") return CandidateFilter::kTokens;
  if (name == "both") return CandidateFilter::kBoth;
  throw InputError(fmt::format("filter must be phrases, tokens or both, got '{}'", name));
}

Shade segment_shade(SegmentKind kind, double probability) {
  const double p = std::clamp(probability, 0.0, 1.0);
  return {kind == SegmentKind::kPhrase ? "#d9480f" : "#1c63b7", 0.12 + 0.88 * p};
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

SegmentKind kind_of(MixedId id, const StaticVocab& vocab) {
  return is_token_id(id, vocab) ? SegmentKind::kToken : SegmentKind::kPhrase;
}

}  // namespace

std::string render_session_svg(const GenerationSession& session, const StaticVocab& vocab) {
  constexpr int kWidth = 800, kMargin = 12, kLineH = 26, kCharW = 8, kLegendH = 64;
  struct Box {
    int x, y, w;
    std::string text;
    SegmentKind kind;
    double p;
  };
  std::vector<Box> boxes;
  int x = kMargin, y = kLegendH;
  for (std::size_t i = 0; i < session.ids.size(); ++i) {
    const MixedId id = session.ids[i];
    const std::string& text = surface_of(id, session.table, vocab);
    const int w = static_cast<int>(text.size()) * kCharW + 8;
    if (x + w > kWidth - kMargin && x > kMargin) {
      x = kMargin;
      y += kLineH + 4;
    }
    const double p = i < session.steps.size() ? session.steps[i].probability : 0.0;
    boxes.push_back({x, y, w, text, kind_of(id, vocab), p});
    x += w + 4;
  }
  const int height = y + kLineH + kMargin;

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"monospace\" font-size=\"13\">\n<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
      kWidth, height);

  svg += "<g class=\"legend\">\n";
  const SegmentKind kinds[] = {SegmentKind::kToken, SegmentKind::kPhrase};
  for (int r = 0; r < 2; ++r) {
    const int ly = 10 + r * 22;
    svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", kMargin, ly + 12,
                       r == 0 ? "token" : "phrase");
    for (int s = 0; s <= 10; ++s) {
      const Shade sh = segment_shade(kinds[r], s / 10.0);
      svg += fmt::format(
          "<rect x=\"{}\" y=\"{}\" width=\"24\" height=\"16\" fill=\"{}\" fill-opacity=\"{:.6f}\"/>\n",
          80 + s * 26, ly, sh.color, sh.opacity);
    }
  }
  svg += fmt::format("<text x=\"80\" y=\"56\">0.0</text><text x=\"{}\" y=\"56\" text-anchor=\"end\">1.0</text>\n",
                     80 + 10 * 26 + 24);
  svg += fmt::format("<text x=\"{}\" y=\"36\">probability</text>\n", 80 + 11 * 26 + 10);
  svg += "</g>\n";

  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    const Shade sh = segment_shade(b.kind, b.p);
    svg += fmt::format(
        "<g class=\"segment\" data-index=\"{}\" data-kind=\"{}\" data-probability=\"{:.6f}\">"
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" rx=\"3\" fill=\"{}\" fill-opacity=\"{:.6f}\"/>"
        "<text x=\"{}\" y=\"{}\">{}</text><title>{:.4f}</title></g>\n",
        i, to_string(b.kind), b.p, b.x, b.y, b.w, kLineH, sh.color, sh.opacity, b.x + 4, b.y + 17,
        xml_escape(b.text), b.p);
  }
  return svg + "</svg>\n";
}

ApiResponse api_error(int status, std::string_view code, std::string_view message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}, "application/json", {}};
}

namespace {

/// Carries an API error out of a handler.
struct ApiFailure {
  ApiResponse response;
};

[[noreturn]] void fail(int status, std::string_view code, std::string_view message) {
  throw ApiFailure{api_error(status, code, message)};
}

long long parse_int(const std::map<std::string, std::string>& query, const std::string& key,
                    std::optional<long long> fallback) {
  const auto it = query.find(key);
  if (it == query.end()) {
    if (fallback) return *fallback;
    fail(400, "invalid_request", fmt::format("missing query parameter '{}'", key));
  }
  long long v = 0;
  const auto& s = it->second;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    fail(400, "invalid_request", fmt::format("'{}' must be an integer, got '{}'", key, s));
  return v;
}

const nlohmann::json& require_field(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) fail(400, "invalid_request", fmt::format("missing field '{}'", key));
  return j.at(key);
}

template <class F>
ApiResponse guarded(F&& f) {
  try {
    return f();
  } catch (const ApiFailure& e) {
    return e.response;
  } catch (const InputError& e) {
    return api_error(400, "invalid_request", e.what());
  } catch (const std::invalid_argument& e) {
    return api_error(400, "invalid_request", e.what());
  } catch (const nlohmann::json::exception& e) {
    return api_error(400, "invalid_request", e.what());
  } catch (const std::exception& e) {
    return api_error(500, "internal", e.what());
  }
}

}  // namespace

Service::Service(Pipeline pipeline, GenerationConfig defaults, std::size_t session_capacity)
    : pipeline_(std::move(pipeline)), defaults_(defaults), store_(session_capacity), nonce_(std::random_device{}()) {
  if (!pipeline_.model || !pipeline_.vocab) throw std::invalid_argument("service needs a model and vocab");
  defaults_.validate();
}

std::string Service::next_session_id() {
  std::lock_guard lock(id_mu_);
  return fmt::format("{:016x}", mix_seed(nonce_, ++counter_));
}

std::shared_ptr<const GenerationSession> Service::require_session(const std::string& id) {
  auto s = store_.get(id);
  if (!s) fail(404, "not_found", fmt::format("unknown session '{}' (never created or evicted)", id));
  return s;
}

ApiResponse Service::health() const {
  const DvaModel& m = *pipeline_.model;
  return {200,
          {{"status", "ok"},
           {"service", "dvagen"},
           {"model",
            {{"fingerprint", fmt::format("{:016x}", m.fingerprint())},
             {"parameters", m.num_parameters()},
             {"config", m.config().to_json()}}},
           {"vocab_size", pipeline_.vocab->size()},
           {"index_documents", pipeline_.index ? pipeline_.index->size() : 0},
           {"sessions", store_.size()},
           {"session_capacity", store_.capacity()}},
          "application/json",
          {}};
}

ApiResponse Service::generate(const nlohmann::json& request) {
  return guarded([&]() -> ApiResponse {
    const auto& prefix_json = require_field(request, "prefix");
    if (!prefix_json.is_string()) fail(400, "invalid_request", "'prefix' must be a string");
    const std::string prefix = normalize_whitespace(prefix_json.get<std::string>());
    if (prefix.empty()) fail(400, "invalid_request", "'prefix' must not be empty");

    std::optional<std::vector<std::string>> phrases;
    if (request.contains("phrases") && !request["phrases"].is_null())
      phrases = request["phrases"].get<std::vector<std::string>>();
    GenerationConfig config = defaults_;
    if (request.contains("config")) config = generation_from_json(request["config"], defaults_);
    config.validate();

    auto session = std::make_shared<GenerationSession>(generate_single(prefix, phrases, pipeline_, config));
    session->session_id = next_session_id();
    store_.put(session);
    return {200, session->to_json(*pipeline_.vocab), "application/json", {}};
  });
}

ApiResponse Service::candidates(const std::map<std::string, std::string>& query) {
  return guarded([&]() -> ApiResponse {
    const auto id_it = query.find("session_id");
    if (id_it == query.end()) fail(400, "invalid_request", "missing query parameter 'session_id'");
    const auto session = require_session(id_it->second);
    const long long position = parse_int(query, "position", std::nullopt);
    if (position < 0 || position >= static_cast<long long>(session->steps.size()))
      fail(400, "out_of_range",
           fmt::format("position {} outside [0, {})", position, session->steps.size()));
    const auto f = query.find("filter");
    const CandidateFilter filter = f == query.end() ? CandidateFilter::kBoth : parse_candidate_filter(f->second);
    const long long limit = parse_int(query, "limit", static_cast<long long>(defaults_.top_candidates));
    if (limit < 0) fail(400, "invalid_request", "'limit' must be >= 0");

    const StaticVocab& vocab = *pipeline_.vocab;
    const GenStep& step = session->steps[static_cast<std::size_t>(position)];
    auto items = nlohmann::json::array();
    for (const auto& c : step.candidates) {
      if (static_cast<long long>(items.size()) >= limit) break;
      const SegmentKind kind = kind_of(c.id, vocab);
      if ((filter == CandidateFilter::kPhrases && kind != SegmentKind::kPhrase) ||
          (filter == CandidateFilter::kTokens && kind != SegmentKind::kToken))
        continue;
      items.push_back({{"id", c.id},
                       {"text", surface_of(c.id, session->table, vocab)},
                       {"kind", to_string(kind)},
                       {"probability", c.probability}});
    }
    return {200,
            {{"session_id", session->session_id},
             {"position", position},
             {"chosen", step.chosen},
             {"candidates", items}},
            "application/json",
            {}};
  });
}

ApiResponse Service::steer(const nlohmann::json& request) {
  return guarded([&]() -> ApiResponse {
    const auto session = require_session(require_field(request, "session_id").get<std::string>());
    const long long position = require_field(request, "position").get<long long>();
    const MixedId replacement = require_field(request, "replacement_id").get<MixedId>();
    if (position < 0 || position >= static_cast<long long>(session->steps.size()))
      fail(400, "out_of_range",
           fmt::format("position {} outside [0, {})", position, session->steps.size()));
    const auto& cands = session->steps[static_cast<std::size_t>(position)].candidates;
    if (std::none_of(cands.begin(), cands.end(), [&](const Candidate& c) { return c.id == replacement; }))
      fail(400, "invalid_replacement",
           fmt::format("id {} is not a stored candidate at position {}", replacement, position));

    auto next = std::make_shared<GenerationSession>(
        dva::steer(*session, static_cast<std::size_t>(position), replacement, pipeline_));
    next->session_id = next_session_id();
    store_.put(next);
    nlohmann::json body = next->to_json(*pipeline_.vocab);
    body["steered_from"] = session->session_id;
    return {200, body, "application/json", {}};
  });
}

ApiResponse Service::viz(const std::map<std::string, std::string>& query) {
  return guarded([&]() -> ApiResponse {
    const auto id_it = query.find("session_id");
    if (id_it == query.end()) fail(400, "invalid_request", "missing query parameter 'session_id'");
    const auto session = require_session(id_it->second);
    const std::string svg = render_session_svg(*session, *pipeline_.vocab);
    const auto fmt_it = query.find("format");
    if (fmt_it != query.end() && fmt_it->second == "svg") return {200, {}, "image/svg+xml", svg};

    const StaticVocab& vocab = *pipeline_.vocab;
    auto segments = nlohmann::json::array();
    for (std::size_t i = 0; i < session->ids.size(); ++i) {
      const SegmentKind kind = kind_of(session->ids[i], vocab);
      const double p = session->steps[i].probability;
      const Shade sh = segment_shade(kind, p);
      segments.push_back({{"text", surface_of(session->ids[i], session->table, vocab)},
                          {"kind", to_string(kind)},
                          {"probability", p},
                          {"color", sh.color},
                          {"opacity", sh.opacity}});
    }
    return {200, {{"session_id", session->session_id}, {"segments", segments}, {"svg", svg}}, "application/json", {}};
  });
}

ApiResponse Service::handle(std::string_view method, std::string_view path,
                            const std::map<std::string, std::string>& query, std::string_view body) {
  auto parse_body = [&](auto&& then) -> ApiResponse {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      return api_error(400, "invalid_request", fmt::format("body is not valid json: {}", e.what()));
    }
    return then(j);
  };
  if (path == "/api/health" && method == "GET") return health();
  if (path == "/api/generate" && method == "POST")
    return parse_body([&](const nlohmann::json& j) { return generate(j); });
  if (path == "/api/candidates" && method == "GET") return candidates(query);
  if (path == "/api/steer" && method == "POST") return parse_body([&](const nlohmann::json& j) { return steer(j); });
  if (path == "/api/viz" && method == "GET") return viz(query);
  return api_error(404, "not_found", fmt::format("no route {} {}", method, path));
}

}  // namespace dva
