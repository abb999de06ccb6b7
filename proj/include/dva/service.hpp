#pragma once

#include <cstddef>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>

#include "dva/inference_engine.hpp"
#include "json.hpp"

namespace dva {

/// Bounded, thread-safe map of completed sessions; the least recently used
/// one is evicted when full.
class SessionStore {
 public:
  explicit SessionStore(std::size_t capacity = 256);

  void put(std::shared_ptr<const GenerationSession> session);
  std::shared_ptr<const GenerationSession> get(const std::string& id);  // nullptr when absent
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }

 private:
  using Entry = std::pair<std::string, std::shared_ptr<const GenerationSession>>;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::list<Entry> order_;  // front = most recent
  std::unordered_map<std::string, std::list<Entry>::iterator> by_id_;
};

enum class CandidateFilter { kPhrases, kTokens, kBoth };

CandidateFilter parse_candidate_filter(std::string_view name);

/// Fill colour and opacity of a segment in the heat view. Tokens and phrases
/// use different hues; opacity grows strictly with probability.
struct Shade {
  std::string color;
  double opacity = 0.0;
};

Shade segment_shade(SegmentKind kind, double probability);

// Heat view of a session: a legend on top, then one <g class="segment"> per id.
std::string render_session_svg(const GenerationSession& session, const StaticVocab& vocab);

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
  std::string content_type = "application/json";
  std::string raw;  // used instead of body when non-empty

  std::string payload() const { return raw.empty() ? body.dump() : raw; }
};

ApiResponse api_error(int status, std::string_view code, std::string_view message);

/// The HTTP API as plain functions, so it runs without a socket.
class Service {
 public:
  Service(Pipeline pipeline, GenerationConfig defaults, std::size_t session_capacity = 256);

  ApiResponse health() const;
  ApiResponse generate(const nlohmann::json& request);
  ApiResponse candidates(const std::map<std::string, std::string>& query);
  ApiResponse steer(const nlohmann::json& request);
  ApiResponse viz(const std::map<std::string, std::string>& query);

  // Routes a request by method and path; bodies are json text.
  ApiResponse handle(std::string_view method, std::string_view path, const std::map<std::string, std::string>& query,
                     std::string_view body);

  SessionStore& sessions() { return store_; }
  const Pipeline& pipeline() const { return pipeline_; }

 private:
  std::string next_session_id();
  std::shared_ptr<const GenerationSession> require_session(const std::string& id);

  Pipeline pipeline_;
  GenerationConfig defaults_;
  SessionStore store_;
  std::mutex id_mu_;
  std::uint64_t nonce_;
  std::uint64_t counter_ = 0;
};

/// HTTP front end for a Service. Routes: GET /api/health, POST /api/generate,
/// GET /api/candidates, POST /api/steer, GET /api/viz.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  // Port 0 picks a free port. Returns the bound port, or -1.
  int bind(const std::string& host, int port);
  void serve();  // blocks until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dva
