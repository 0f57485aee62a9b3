#pragma once

// Chat-completions client over cpp-httplib with bounded retries.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "heart/backend.hpp"
#include "heart/error.hpp"

namespace heart {

struct HttpBackendConfig {
  std::string url;  // e.g. https://api.example.com/v1/chat/completions
  std::string model;
  std::string api_key_env = "HEART_API_KEY";
  std::string auth_header = "Authorization";
  std::string auth_prefix = "Bearer ";
  std::chrono::milliseconds timeout{120'000};
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{1'000};
  std::chrono::milliseconds backoff_cap{60'000};
  nlohmann::json vendor_options = nlohmann::json::object();

  void validate() const {
    if (url.empty()) throw ConfigError("http backend needs a url");
    if (model.empty()) throw ConfigError("http backend needs a model name");
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
    if (backoff_base.count() < 0 || backoff_cap < backoff_base) throw ConfigError("invalid backoff settings");
    if (!vendor_options.is_object()) throw ConfigError("vendor_options must be an object");
  }
};

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("url needs a scheme: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported url scheme: " + scheme);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpChatBackend final : public Backend {
public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpChatBackend(HttpBackendConfig config, Sleeper sleeper = default_sleeper())
      : config_(std::move(config)), sleeper_(std::move(sleeper)) {
    config_.validate();
    url_ = parse_url(config_.url);
  }

  /// Outbound JSON. Message content is copied verbatim.
  [[nodiscard]] nlohmann::json build_payload(const GenRequest& request) const {
    nlohmann::json body = nlohmann::json::object();
    for (auto it = config_.vendor_options.begin(); it != config_.vendor_options.end(); ++it) body[it.key()] = it.value();
    body["model"] = config_.model;
    auto messages = nlohmann::json::array();
    for (const auto& m : request.messages) {
      messages.push_back({{"role", std::string(role_name(m.role))}, {"content", m.content}});
    }
    body["messages"] = std::move(messages);
    body["temperature"] = request.params.temperature;
    body["top_p"] = request.params.top_p;
    body["max_tokens"] = request.params.max_tokens;
    if (request.params.thinking_enabled) body["thinking_enabled"] = *request.params.thinking_enabled;
    return body;
  }

  /// First choice's message content.
  static std::string parse_response(const std::string& body) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedResponse(std::string("response is not JSON: ") + e.what());
    }
    try {
      const auto& content = doc.at("choices").at(0).at("message").at("content");
      if (!content.is_string()) throw MalformedResponse("message content is not a string");
      return content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(std::string("unexpected response shape: ") + e.what());
    }
  }

  /// Delay before retry number `retry` (1-based): base * 2^(retry-1), capped.
  [[nodiscard]] std::chrono::milliseconds backoff_delay(int retry) const {
    auto delay = config_.backoff_base;
    for (int i = 1; i < retry && delay < config_.backoff_cap; ++i) delay *= 2;
    return std::min(delay, config_.backoff_cap);
  }

  GenResult generate(const GenRequest& request) override {
    request.validate();
    const auto started = std::chrono::steady_clock::now();
    const std::string payload = build_payload(request).dump();

    httplib::Headers headers;
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key != nullptr && *key != '\0') {
      headers.emplace(config_.auth_header, config_.auth_prefix + key);
    }

    std::chrono::milliseconds last_delay{0};
    std::string last_error;
    std::chrono::milliseconds retry_after{0};
    bool rate_limited = false;
    const int max_attempts = config_.max_retries + 1;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
      if (attempt > 1) {
        last_delay = std::max({last_delay, backoff_delay(attempt - 1), std::min(retry_after, config_.backoff_cap)});
        sleeper_(last_delay);
      }
      httplib::Client client(url_.origin);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      client.set_write_timeout(secs.count(), usecs.count());
      auto res = client.Post(url_.path, headers, payload, "application/json");

      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        rate_limited = false;
        continue;
      }
      if (res->status == 429) {
        rate_limited = true;
        retry_after = parse_retry_after(*res);
        last_error = "rate limited (HTTP 429)";
        continue;
      }
      if (res->status >= 500) {
        rate_limited = false;
        last_error = "server error (HTTP " + std::to_string(res->status) + ")";
        continue;
      }
      if (res->status < 200 || res->status >= 300) {
        throw TransportError("request rejected (HTTP " + std::to_string(res->status) + "): " + res->body.substr(0, 200));
      }
      GenResult out;
      out.text = parse_response(res->body);
      out.backend_id = id();
      out.attempt_count = attempt;
      out.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
      return out;
    }
    if (rate_limited) throw RateLimited(last_error + " after " + std::to_string(max_attempts) + " attempts", retry_after);
    throw TransportError(last_error + " after " + std::to_string(max_attempts) + " attempts");
  }

  [[nodiscard]] std::string id() const override { return "http:" + config_.model + "@" + url_.origin; }
  [[nodiscard]] const HttpBackendConfig& config() const noexcept { return config_; }

private:
  static Sleeper default_sleeper() {
    return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }

  static std::chrono::milliseconds parse_retry_after(const httplib::Response& res) {
    if (!res.has_header("Retry-After")) return std::chrono::milliseconds(0);
    try {
      return std::chrono::milliseconds(static_cast<long long>(std::stod(res.get_header_value("Retry-After")) * 1000));
    } catch (const std::exception&) {
      return std::chrono::milliseconds(0);  // HTTP-date form is not supported
    }
  }

  HttpBackendConfig config_;
  Sleeper sleeper_;
  ParsedUrl url_;
};

}  // namespace heart
