#pragma once

// Benchmark task ingestion, multimodal filtering and the validation/test split.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "heart/error.hpp"
#include "heart/util.hpp"
#include "heart/verifier.hpp"

namespace heart {

enum class Benchmark { SimpleQA, HLE, OlympiadMath, OlympiadPhysics };

inline std::string_view benchmark_id(Benchmark b) {
  switch (b) {
    case Benchmark::SimpleQA: return "simpleqa";
    case Benchmark::HLE: return "hle";
    case Benchmark::OlympiadMath: return "olympiad_math";
    case Benchmark::OlympiadPhysics: return "olympiad_physics";
  }
  return "?";
}

inline Benchmark parse_benchmark(std::string_view s) {
  const auto key = util::to_lower(util::trim(s));
  if (key == "simpleqa") return Benchmark::SimpleQA;
  if (key == "hle") return Benchmark::HLE;
  if (key == "olympiad_math") return Benchmark::OlympiadMath;
  if (key == "olympiad_physics") return Benchmark::OlympiadPhysics;
  throw ConfigError("unknown benchmark '" + std::string(s) + "'");
}

/// What the generation path may see of a task: everything except the gold answer.
struct Problem {
  std::string id;
  std::string question;
  AnswerType answer_type = AnswerType::FreeText;
  Benchmark benchmark = Benchmark::SimpleQA;
};

struct Task {
  std::string id;
  std::string question;
  std::string gold;
  AnswerType answer_type = AnswerType::FreeText;
  Benchmark benchmark = Benchmark::SimpleQA;
  std::optional<std::string> subject;

  [[nodiscard]] Problem problem() const { return Problem{id, question, answer_type, benchmark}; }
};

/// Maps upstream record fields onto Task. An empty `id` field means ids are
/// synthesised from the line number.
struct FieldMapping {
  std::string id = "id";
  std::string question = "question";
  std::string answer = "answer";
  std::string answer_type = "answer_type";
  std::string subject = "subject";
  std::string has_image = "has_image";
  std::vector<std::string> image_fields;  // any non-empty value marks the record multimodal
  std::optional<AnswerType> default_answer_type;

  static FieldMapping preset(std::string_view name) {
    FieldMapping m;
    const auto key = util::to_lower(name);
    if (key.empty() || key == "documented") return m;
    if (key == "olympiadbench") {
      m.answer = "final_answer";
      m.image_fields = {"image_1"};
      return m;
    }
    if (key == "hle") {
      m.subject = "category";
      m.image_fields = {"image"};
      m.default_answer_type = AnswerType::FreeText;
      return m;
    }
    if (key == "simpleqa") {
      m.id.clear();
      m.question = "problem";
      m.default_answer_type = AnswerType::FreeText;
      return m;
    }
    throw ConfigError("unknown field-mapping preset '" + std::string(name) + "'");
  }

  /// Preset (key "preset") with individual fields overridden.
  static FieldMapping from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("field mapping must be an object");
    FieldMapping m = preset(j.value("preset", std::string("documented")));
    auto str = [&](const char* key, std::string& field) {
      if (j.contains(key)) field = j.at(key).get<std::string>();
    };
    str("id", m.id);
    str("question", m.question);
    str("answer", m.answer);
    str("answer_type", m.answer_type);
    str("subject", m.subject);
    str("has_image", m.has_image);
    if (j.contains("image_fields")) m.image_fields = j.at("image_fields").get<std::vector<std::string>>();
    if (j.contains("default_answer_type")) {
      auto t = parse_answer_type(j.at("default_answer_type").get<std::string>());
      if (!t) throw ConfigError("unknown default_answer_type");
      m.default_answer_type = t;
    }
    return m;
  }
};

struct FilterReport {
  std::string benchmark;
  std::string source;
  std::size_t total_records = 0;
  std::size_t kept = 0;
  std::size_t filtered_image = 0;
  std::vector<std::string> filtered_ids;

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"benchmark", benchmark},           {"source", source},       {"total_records", total_records},
            {"kept", kept},                     {"filtered_image", filtered_image}, {"filtered_ids", filtered_ids}};
  }
};

namespace detail {

inline std::optional<std::string> scalar_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return v.dump();
  if (v.is_array() && !v.empty()) return scalar_text(v.front());
  return std::nullopt;
}

inline bool truthy(const nlohmann::json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) return !v.get<std::string>().empty();
  if (v.is_array() || v.is_object()) return !v.empty();
  if (v.is_number()) return v.get<double>() != 0.0;
  return false;
}

}  // namespace detail

/// Parses line-delimited task records. Records flagged as carrying images are
/// dropped and listed in `report`.
inline std::vector<Task> parse_tasks(std::string_view content, Benchmark benchmark, const FieldMapping& mapping = {},
                                     FilterReport* report = nullptr, std::string_view source = "<tasks>") {
  FilterReport local;
  FilterReport& rep = report ? *report : local;
  rep = FilterReport{};
  rep.benchmark = std::string(benchmark_id(benchmark));
  rep.source = std::string(source);

  std::vector<Task> tasks;
  for (const auto& line : util::nonblank_lines(content)) {
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line.text);
    } catch (const nlohmann::json::parse_error& e) {
      throw RecordError(line.number, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw RecordError(line.number, "record is not an object");
    ++rep.total_records;

    auto field = [&](const std::string& name) -> std::optional<std::string> {
      if (name.empty() || !rec.contains(name) || rec[name].is_null()) return std::nullopt;
      return detail::scalar_text(rec[name]);
    };

    Task task;
    task.benchmark = benchmark;
    if (mapping.id.empty()) {
      task.id = std::string(benchmark_id(benchmark)) + "-" + std::to_string(line.number);
    } else {
      auto id = field(mapping.id);
      if (!id || id->empty()) throw RecordError(line.number, "missing field '" + mapping.id + "'");
      task.id = *id;
    }

    bool has_image = !mapping.has_image.empty() && rec.contains(mapping.has_image) && detail::truthy(rec[mapping.has_image]);
    for (const auto& f : mapping.image_fields) has_image = has_image || (rec.contains(f) && detail::truthy(rec[f]));
    if (has_image) {
      ++rep.filtered_image;
      rep.filtered_ids.push_back(task.id);
      continue;
    }

    auto question = field(mapping.question);
    if (!question || util::trim(*question).empty()) {
      throw RecordError(line.number, "missing field '" + mapping.question + "'");
    }
    task.question = *question;
    auto gold = field(mapping.answer);
    if (!gold || util::trim(*gold).empty()) throw RecordError(line.number, "missing field '" + mapping.answer + "'");
    task.gold = *gold;

    if (auto at = field(mapping.answer_type)) {
      auto parsed = parse_answer_type(*at);
      if (!parsed) throw RecordError(line.number, "unknown answer_type '" + *at + "'");
      task.answer_type = *parsed;
    } else if (mapping.default_answer_type) {
      task.answer_type = *mapping.default_answer_type;
    } else {
      throw RecordError(line.number, "missing field '" + mapping.answer_type + "'");
    }
    task.subject = field(mapping.subject);
    tasks.push_back(std::move(task));
  }
  rep.kept = tasks.size();
  return tasks;
}

inline std::vector<Task> load_tasks(const std::filesystem::path& path, Benchmark benchmark,
                                    const FieldMapping& mapping = {}, FilterReport* report = nullptr) {
  return parse_tasks(util::read_file(path), benchmark, mapping, report, path.string());
}

struct SplitSpec {
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("validation_fraction must lie in (0, 1)");
    }
  }
};

/// floor(fraction * n). The epsilon absorbs binary representation error
/// (0.29 * 100 evaluates to 28.999...).
inline std::size_t validation_size(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

/// Seeded permutation of 0..n-1. Fisher-Yates over mt19937_64 with rejection
/// sampling, so the result does not depend on the standard library's
/// distribution implementations.
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    std::swap(idx[i - 1], idx[static_cast<std::size_t>(r % bound)]);
  }
  return idx;
}

struct SplitResult {
  std::vector<Task> validation;
  std::vector<Task> test;
};

inline SplitResult split(const std::vector<Task>& tasks, const SplitSpec& spec = {}) {
  spec.validate();
  if (tasks.size() < 2) throw PreconditionError("split needs at least two tasks");
  const auto order = seeded_permutation(tasks.size(), spec.seed);
  const auto n_val = validation_size(tasks.size(), spec.validation_fraction);
  SplitResult out;
  out.validation.reserve(n_val);
  out.test.reserve(tasks.size() - n_val);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? out.validation : out.test).push_back(tasks[order[i]]);
  }
  return out;
}

}  // namespace heart
