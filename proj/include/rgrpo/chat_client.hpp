#pragma once

// Minimal chat-completions client shared by the remote judge and the data
// generation pipeline.

#include <chrono>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>

#include <nlohmann/json.hpp>

#include "httplib.h"
#include "rgrpo/log.hpp"

namespace rgrpo {

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ChatRequest {
  std::string system;
  std::string user;
  double temperature = 0.1;
  int max_tokens = 16000;
};

struct EndpointConfig {
  std::string url = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model = "judge";
  std::chrono::milliseconds timeout{120000};
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{500};
  /// Name of the environment variable holding the bearer token, if any.
  std::string token_env = "RGRPO_API_KEY";
};

/// Split "http://host:port/path" into the origin and the path.
inline std::pair<std::string, std::string> split_url(std::string_view url) {
  const auto scheme = url.find("://");
  if (scheme == std::string_view::npos) throw std::invalid_argument("endpoint url needs a scheme");
  const auto path = url.find('/', scheme + 3);
  if (path == std::string_view::npos) return {std::string(url), "/"};
  return {std::string(url.substr(0, path)), std::string(url.substr(path))};
}

inline nlohmann::json chat_request_body(const ChatRequest& req, const std::string& model) {
  return {
      {"model", model},
      {"messages",
       nlohmann::json::array({{{"role", "system"}, {"content", req.system}},
                              {{"role", "user"}, {"content", req.user}}})},
      {"temperature", req.temperature},
      {"max_tokens", req.max_tokens},
  };
}

/// Text of the first choice's message, or throws TransportError.
inline std::string first_choice_text(const std::string& body) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw TransportError("endpoint returned non-JSON body");
  auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty())
    throw TransportError("endpoint response has no choices");
  const auto& first = (*choices)[0];
  if (auto msg = first.find("message"); msg != first.end() && msg->is_object()) {
    if (auto content = msg->find("content"); content != msg->end() && content->is_string())
      return content->get<std::string>();
  }
  if (auto text = first.find("text"); text != first.end() && text->is_string())
    return text->get<std::string>();
  throw TransportError("first choice carries no text");
}

/// Thread-safe: each call opens its own connection, so any number of
/// workers may share one client.
class ChatClient {
 public:
  explicit ChatClient(EndpointConfig cfg) : cfg_(std::move(cfg)) {
    std::tie(origin_, path_) = split_url(cfg_.url);
    if (!cfg_.token_env.empty()) {
      if (const char* tok = std::getenv(cfg_.token_env.c_str())) token_ = tok;
    }
  }

  const EndpointConfig& config() const { return cfg_; }

  /// One request with exponential-backoff retries; throws TransportError once
  /// max_retries is exhausted.
  std::string complete(const ChatRequest& req) const {
    const auto body = chat_request_body(req, cfg_.model).dump();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(cfg_.backoff_base * (1 << (attempt - 1)));
      try {
        return send_once(body);
      } catch (const TransportError& e) {
        last_error = e.what();
        log_warn("chat request attempt " + std::to_string(attempt + 1) + " failed: " + last_error);
      }
    }
    throw TransportError("giving up after " + std::to_string(cfg_.max_retries + 1) +
                         " attempts: " + last_error);
  }

 private:
  std::string send_once(const std::string& body) const {
    httplib::Client cli(origin_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    auto res = cli.Post(path_, headers, body, "application/json");
    if (!res) throw TransportError("transport: " + httplib::to_string(res.error()));
    if (res->status != 200) throw TransportError("HTTP status " + std::to_string(res->status));
    return first_choice_text(res->body);
  }

  EndpointConfig cfg_;
  std::string origin_;
  std::string path_;
  std::string token_;
};

}  // namespace rgrpo
