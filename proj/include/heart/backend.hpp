#pragma once

// Text-generation interface shared by the network client and the test doubles.

#include <atomic>
#include <chrono>
#include <functional>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "heart/error.hpp"

namespace heart {

struct GenParams {
  double temperature = 0.7;
  double top_p = 0.2;
  int max_tokens = 8192;
  std::optional<bool> thinking_enabled;  // passed through to vendors that understand it

  void validate() const {
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
    if (max_tokens <= 0) throw ConfigError("max_tokens must be positive");
  }

  friend bool operator==(const GenParams&, const GenParams&) = default;
};

enum class Role { System, User, Assistant };

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "?";
}

struct ChatMessage {
  Role role;
  std::string content;
};

/// Provenance carried with every request. Backends may key on these; the
/// network client ignores them.
struct RequestTags {
  std::string task_id;
  int iteration = 0;
  std::string prompt_id;
  std::string strategy;
  std::map<std::string, std::string, std::less<>> extra;
};

/// Well-known keys in RequestTags::extra, filled in by the protocol engine.
namespace tag {
inline constexpr std::string_view kPolarity = "polarity";            // active group polarity (heart only)
inline constexpr std::string_view kPrevPolarity = "prev_polarity";   // polarity at t-1 (heart, t >= 2)
inline constexpr std::string_view kPrevAnswer = "prev_answer";       // extracted answer of y*_{t-1}
inline constexpr std::string_view kRole = "role";                    // init | candidate | ensembler
}  // namespace tag

struct GenRequest {
  std::vector<ChatMessage> messages;
  GenParams params;
  RequestTags tags;

  void validate() const {
    if (tags.iteration < 0) throw PreconditionError("request iteration must be >= 0");
    bool has_user = false;
    for (const auto& m : messages) {
      if (m.role != Role::Assistant && m.content.empty()) {
        throw PreconditionError("empty " + std::string(role_name(m.role)) + " message");
      }
      has_user = has_user || m.role == Role::User;
    }
    if (!has_user) throw PreconditionError("request needs at least one user message");
    params.validate();
  }

  /// Content of the last user message.
  [[nodiscard]] const std::string& user_text() const {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
      if (it->role == Role::User) return it->content;
    }
    throw PreconditionError("request has no user message");
  }
};

struct GenResult {
  std::string text;
  std::string backend_id;
  std::chrono::milliseconds latency{0};
  int attempt_count = 1;
};

/// Implementations must tolerate concurrent generate() calls.
class Backend {
public:
  virtual ~Backend() = default;
  virtual GenResult generate(const GenRequest& request) = 0;
  [[nodiscard]] virtual std::string id() const = 0;
};

/// Shared cap on the number of generation calls in one run.
class RequestBudget {
public:
  explicit RequestBudget(std::int64_t limit) : limit_(limit) {}

  void acquire() {
    const auto n = used_.fetch_add(1) + 1;
    if (n > limit_) {
      used_.fetch_sub(1);
      throw BudgetExceeded("request budget of " + std::to_string(limit_) + " calls exhausted");
    }
  }

  [[nodiscard]] std::int64_t used() const noexcept { return used_.load(); }
  [[nodiscard]] std::int64_t limit() const noexcept { return limit_; }

private:
  std::int64_t limit_;
  std::atomic<std::int64_t> used_{0};
};

/// Charges every call against a RequestBudget before delegating.
class BudgetedBackend final : public Backend {
public:
  BudgetedBackend(std::shared_ptr<Backend> inner, std::shared_ptr<RequestBudget> budget)
      : inner_(std::move(inner)), budget_(std::move(budget)) {}

  GenResult generate(const GenRequest& request) override {
    budget_->acquire();
    return inner_->generate(request);
  }

  [[nodiscard]] std::string id() const override { return inner_->id(); }
  [[nodiscard]] const std::shared_ptr<RequestBudget>& budget() const noexcept { return budget_; }

private:
  std::shared_ptr<Backend> inner_;
  std::shared_ptr<RequestBudget> budget_;
};

}  // namespace heart
