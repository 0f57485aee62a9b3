#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "heart/backend.hpp"
#include "heart/error.hpp"
#include "heart/util.hpp"

namespace heart {

inline constexpr std::string_view kWildcard = "*";

struct ScriptKey {
  std::string task_id;
  int iteration = 0;
  std::string prompt_id{kWildcard};

  friend auto operator<=>(const ScriptKey&, const ScriptKey&) = default;
};

/// A scripted reply: completion text, or a simulated failure.
struct ScriptEntry {
  enum class Kind { Text, TransportFailure, MalformedFailure } kind = Kind::Text;
  std::string text;

  static ScriptEntry reply(std::string t) { return {Kind::Text, std::move(t)}; }
  static ScriptEntry transport_failure() { return {Kind::TransportFailure, {}}; }
  static ScriptEntry malformed_failure() { return {Kind::MalformedFailure, {}}; }
};

/// Replays fixed completions keyed on (task_id, iteration, prompt_id).
/// Lookup order: exact prompt id, then the (task, iteration, "*") wildcard.
class ScriptedBackend final : public Backend {
public:
  using Script = std::map<ScriptKey, ScriptEntry>;

  explicit ScriptedBackend(Script script, std::string id = "scripted") : script_(std::move(script)), id_(std::move(id)) {
    if (script_.empty()) throw ConfigError("scripted backend needs a non-empty script");
  }

  GenResult generate(const GenRequest& request) override {
    request.validate();
    const auto& tags = request.tags;
    auto it = script_.find(ScriptKey{tags.task_id, tags.iteration, tags.prompt_id});
    if (it == script_.end()) it = script_.find(ScriptKey{tags.task_id, tags.iteration, std::string(kWildcard)});
    {
      std::lock_guard lock(mutex_);
      log_.push_back(request);
    }
    if (it == script_.end()) {
      throw ScriptMissError("no script entry for (task=" + tags.task_id + ", t=" + std::to_string(tags.iteration) +
                            ", prompt=" + tags.prompt_id + ")");
    }
    switch (it->second.kind) {
      case ScriptEntry::Kind::TransportFailure:
        throw TransportError("scripted transport failure for " + tags.task_id + "/" + tags.prompt_id);
      case ScriptEntry::Kind::MalformedFailure:
        throw MalformedResponse("scripted malformed response for " + tags.task_id + "/" + tags.prompt_id);
      case ScriptEntry::Kind::Text:
        break;
    }
    return GenResult{it->second.text, id_, std::chrono::milliseconds(0), 1};
  }

  [[nodiscard]] std::string id() const override { return id_; }

  /// Every request seen so far, in arrival order.
  [[nodiscard]] std::vector<GenRequest> requests() const {
    std::lock_guard lock(mutex_);
    return log_;
  }

  [[nodiscard]] std::size_t call_count() const {
    std::lock_guard lock(mutex_);
    return log_.size();
  }

  [[nodiscard]] const Script& script() const noexcept { return script_; }

private:
  Script script_;
  std::string id_;
  mutable std::mutex mutex_;
  std::vector<GenRequest> log_;
};

/// Reads `{"task_id","iteration","prompt_id"?,"text"}` lines; `"error":
/// "transport"|"malformed"` in place of text simulates a failure.
inline ScriptedBackend::Script parse_script(std::string_view content, std::string_view source = "<script>") {
  ScriptedBackend::Script script;
  for (const auto& line : util::nonblank_lines(content)) {
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line.text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string(source) + ":" + std::to_string(line.number) + ": " + e.what());
    }
    const auto where = std::string(source) + ":" + std::to_string(line.number);
    if (!rec.is_object() || !rec.contains("task_id") || !rec["task_id"].is_string() || !rec.contains("iteration") ||
        !rec["iteration"].is_number_integer()) {
      throw ParseError(where + ": script entry needs string task_id and integer iteration");
    }
    ScriptKey key{rec["task_id"].get<std::string>(), rec["iteration"].get<int>(),
                  rec.value("prompt_id", std::string(kWildcard))};
    ScriptEntry entry;
    if (rec.contains("error")) {
      const auto kind = rec["error"].get<std::string>();
      if (kind == "transport") {
        entry = ScriptEntry::transport_failure();
      } else if (kind == "malformed") {
        entry = ScriptEntry::malformed_failure();
      } else {
        throw ParseError(where + ": unknown error kind '" + kind + "'");
      }
    } else if (rec.contains("text") && rec["text"].is_string()) {
      entry = ScriptEntry::reply(rec["text"].get<std::string>());
    } else {
      throw ParseError(where + ": script entry needs text or error");
    }
    if (!script.emplace(std::move(key), std::move(entry)).second) {
      throw DuplicateIdError(where + ": duplicate script key");
    }
  }
  return script;
}

inline ScriptedBackend::Script load_script(const std::filesystem::path& path) {
  return parse_script(util::read_file(path), path.string());
}

}  // namespace heart
