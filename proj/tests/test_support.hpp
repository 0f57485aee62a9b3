#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "heart/protocol.hpp"
#include "heart/scripted_backend.hpp"

namespace heart::testing {

inline std::filesystem::path source_dir() { return HEART_SOURCE_DIR; }
inline std::filesystem::path data_dir() { return source_dir() / "data"; }
inline std::filesystem::path golden_dir() { return source_dir() / "tests" / "golden"; }

inline const CueBank& default_bank() {
  static const CueBank bank = load_bank(data_dir() / "cues" / "ekman_30.jsonl");
  return bank;
}

inline const BaselinePromptSet& default_baselines() {
  static const BaselinePromptSet set = load_baselines(data_dir() / "cues" / "baselines.jsonl");
  return set;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("heart-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline Task make_task(std::string id, std::string gold = "4", AnswerType type = AnswerType::Numerical,
                      Benchmark bench = Benchmark::OlympiadMath) {
  Task t;
  t.id = std::move(id);
  t.question = "Question for " + t.id;
  t.gold = std::move(gold);
  t.answer_type = type;
  t.benchmark = bench;
  return t;
}

inline std::string boxed(const std::string& answer) { return "Reasoning.\nSo the final answer is \\boxed{" + answer + "}."; }

/// Script where the task is wrong everywhere except the listed (t, prompt) cells.
struct ScriptBuilder {
  ScriptedBackend::Script script;

  ScriptBuilder& wrong_everywhere(const std::string& task, int max_t, const std::string& wrong = "5") {
    script[{task, 0, "init"}] = ScriptEntry::reply(boxed(wrong));
    for (int t = 1; t <= max_t; ++t) script[{task, t, std::string(kWildcard)}] = ScriptEntry::reply(boxed(wrong));
    return *this;
  }
  ScriptBuilder& at(const std::string& task, int t, const std::string& prompt, const std::string& text) {
    script[{task, t, prompt}] = ScriptEntry::reply(text);
    return *this;
  }
  ScriptBuilder& fail(const std::string& task, int t, const std::string& prompt) {
    script[{task, t, prompt}] = ScriptEntry::transport_failure();
    return *this;
  }
};

inline ProtocolConfig s1_config(int n = 4) {
  ProtocolConfig c;
  c.max_iterations = n;
  return c;
}

}  // namespace heart::testing
