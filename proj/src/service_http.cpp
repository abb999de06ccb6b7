#include <map>
#include <string>

#include "dva/service.hpp"
#include "httplib.h"

namespace dva {

struct HttpServer::Impl {
  Service* service;
  httplib::Server server;
};

namespace {

void forward(Service& service, const httplib::Request& req, httplib::Response& res) {
  std::map<std::string, std::string> query;
  for (const auto& [k, v] : req.params) query.emplace(k, v);
  const ApiResponse r = service.handle(req.method, req.path, query, req.body);
  res.status = r.status;
  res.set_content(r.payload(), r.content_type);
}

}  // namespace

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>()) {
  impl_->service = &service;
  auto& s = impl_->server;
  auto handler = [this](const httplib::Request& req, httplib::Response& res) { forward(*impl_->service, req, res); };
  s.Get("/api/health", handler);
  s.Post("/api/generate", handler);
  s.Get("/api/candidates", handler);
  s.Post("/api/steer", handler);
  s.Get("/api/viz", handler);
  // The steering client may be served from another origin.
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  s.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const ApiResponse e = api_error(res.status, res.status == 404 ? "not_found" : "http_error",
                                    "no route " + req.method + " " + req.path);
    res.set_content(e.payload(), e.content_type);
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::serve() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace dva
