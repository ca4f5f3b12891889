#pragma once

// HTTP implementation of VlmClient. Needs httplib.h on the include path; for
// https endpoints define CPPHTTPLIB_OPENSSL_SUPPORT and link OpenSSL.
//
// Request body:  {"model", "prompt", "image_id", "markers": [{label, x, y}]}
// Response body: {"text": "..."} or the raw conversation text.

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "loctok/error.hpp"
#include "loctok/instruct.hpp"

namespace loctok {

struct HttpVlmConfig {
  std::string endpoint;  // scheme://host[:port]/path
  std::string model;
  std::string api_key;
  int timeout_seconds = 60;
  int max_retries = 2;
  int retry_backoff_ms = 500;

  static HttpVlmConfig from_env() {
    auto get = [](const char* name) {
      const char* v = std::getenv(name);
      return v ? std::string(v) : std::string();
    };
    HttpVlmConfig c;
    c.endpoint = get("VLM_ENDPOINT");
    c.model = get("VLM_MODEL");
    c.api_key = get("VLM_API_KEY");
    if (c.endpoint.empty()) throw Error(Errc::invalid_argument, "VLM_ENDPOINT is not set");
    return c;
  }
};

class HttpVlmClient : public VlmClient {
 public:
  explicit HttpVlmClient(HttpVlmConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme_end = cfg_.endpoint.find("://");
    if (scheme_end == std::string::npos) throw Error(Errc::invalid_argument, "VLM_ENDPOINT needs a scheme");
    const auto path_start = cfg_.endpoint.find('/', scheme_end + 3);
    base_ = cfg_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : cfg_.endpoint.substr(path_start);
  }

  std::string complete(const VlmRequest& req) override {
    nlohmann::json markers = nlohmann::json::array();
    for (const auto& m : req.marked_image.markers) {
      markers.push_back({{"label", m.label}, {"x", m.center_x}, {"y", m.center_y}});
    }
    const nlohmann::json body = {{"model", cfg_.model},
                                 {"prompt", render_request(req)},
                                 {"image_id", req.marked_image.image_id},
                                 {"markers", markers}};
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.retry_backoff_ms * attempt));
      httplib::Client client(base_);
      client.set_connection_timeout(cfg_.timeout_seconds, 0);
      client.set_read_timeout(cfg_.timeout_seconds, 0);
      client.set_write_timeout(cfg_.timeout_seconds, 0);
      auto res = client.Post(path_, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "request failed: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "server returned " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw Error(Errc::io_error, "server returned " + std::to_string(res->status));
      auto parsed = nlohmann::json::parse(res->body, nullptr, false);
      if (!parsed.is_discarded() && parsed.is_object() && parsed.contains("text") && parsed["text"].is_string()) {
        return parsed["text"].get<std::string>();
      }
      return res->body;
    }
    throw Error(Errc::io_error, last_error);
  }

 private:
  HttpVlmConfig cfg_;
  std::string base_;
  std::string path_;
};

}  // namespace loctok
