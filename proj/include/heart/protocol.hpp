#pragma once

// The iterative affective self-correction loop: a shared chain-of-thought
// baseline at t = 0, then up to N rounds of candidate generation over the
// active cue pool, each resolved either by the exact-match oracle (S1) or by
// a generative ensembler call (S2). The Wait / CoT / Self-Reflection
// baselines run through the same loop with matched candidate counts.

#include <cstddef>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "heart/backend.hpp"
#include "heart/datasets.hpp"
#include "heart/error.hpp"
#include "heart/prompt_bank.hpp"
#include "heart/util.hpp"
#include "heart/verifier.hpp"

namespace heart {

enum class Resolution { S1Oracle, S2Synthesis };

inline std::string_view resolution_id(Resolution r) { return r == Resolution::S1Oracle ? "s1" : "s2"; }

inline Resolution parse_resolution(std::string_view s) {
  const auto key = util::to_lower(util::trim(s));
  if (key == "s1" || key == "s1_oracle" || key == "oracle") return Resolution::S1Oracle;
  if (key == "s2" || key == "s2_synthesis" || key == "synthesis") return Resolution::S2Synthesis;
  throw ConfigError("unknown resolution '" + std::string(s) + "'");
}

// Prompt scaffolding. Versions are recorded in run manifests.
inline constexpr std::string_view kInitTemplateVersion = "init-v1";
inline constexpr std::string_view kFeedbackTemplateVersion = "feedback-v1";
inline constexpr std::string_view kEnsemblerTemplateVersion = "ensembler-v1";
inline constexpr std::string_view kBoxedInstruction =
    "Please end your solution with `So the final answer is \\boxed{answer}'.";
inline constexpr std::string_view kGenericSystemInstruction = "Answer the following question. Let's think step by step.";

enum class StrategyKind { Heart, Wait, Cot, SelfReflection };

struct Strategy {
  StrategyKind kind = StrategyKind::Heart;
  SchedulePattern pattern;          // Heart only
  std::vector<int> reflection_ids;  // SelfReflection only, values in 1..10
  std::string label;

  static Strategy heart(SchedulePattern p, std::string label = "heart") {
    if (p.size() == 0) throw ConfigError("heart strategy needs a non-empty pattern");
    return Strategy{StrategyKind::Heart, std::move(p), {}, std::move(label)};
  }
  static Strategy wait(std::string label = "wait") { return Strategy{StrategyKind::Wait, {}, {}, std::move(label)}; }
  static Strategy cot(std::string label = "cot") { return Strategy{StrategyKind::Cot, {}, {}, std::move(label)}; }
  static Strategy self_reflection(std::vector<int> ids = {}, std::string label = "self-reflection") {
    if (ids.empty()) {
      for (int i = 1; i <= static_cast<int>(kSelfReflectionCount); ++i) ids.push_back(i);
    }
    for (int id : ids) {
      if (id < 1 || id > static_cast<int>(kSelfReflectionCount)) {
        throw ConfigError("self-reflection prompt id " + std::to_string(id) + " outside 1..10");
      }
    }
    return Strategy{StrategyKind::SelfReflection, {}, std::move(ids), std::move(label)};
  }

  /// Per-iteration descriptor stored in iteration records.
  [[nodiscard]] std::string descriptor(int t) const {
    switch (kind) {
      case StrategyKind::Heart: return pattern.groups.at(static_cast<std::size_t>(t - 1)).render();
      case StrategyKind::Wait: return "wait";
      case StrategyKind::Cot: return "cot";
      case StrategyKind::SelfReflection: return "self-reflection";
    }
    return "?";
  }
};

/// Strategy names accepted on the command line and in grid files:
/// "heart", "wait", "cot", "self-reflection[:ID]", the appendix labels
/// ("Self Reflection ID# 7", "Self Reflection (entire collection)", "Wait",
/// "CoT"), an emotion name for a static single-emotion schedule of length
/// `static_length`, or any schedule pattern. The label is the input, trimmed.
inline Strategy parse_strategy(std::string_view spec, const SchedulePattern& heart_pattern, std::size_t static_length) {
  const std::string label(util::trim(spec));
  if (label.empty()) throw ParseError("empty strategy spec");
  const std::string key = util::to_lower(label);
  if (key == "heart") return Strategy::heart(heart_pattern, label);
  if (key == "wait") return Strategy::wait(label);
  if (key == "cot") return Strategy::cot(label);
  if (key == "self-reflection" || key == "self_reflection" || key == "self reflection" ||
      key == "self reflection (entire collection)") {
    return Strategy::self_reflection({}, label);
  }
  for (std::string_view prefix : {"self-reflection:", "self_reflection:", "self reflection id#"}) {
    if (key.rfind(prefix, 0) == 0) {
      const auto rest = util::trim(std::string_view(key).substr(prefix.size()));
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(std::string(rest), &used);
        if (used != rest.size()) throw ParseError("trailing characters");
      } catch (const std::exception&) {
        throw ParseError("bad self-reflection id in '" + label + "'");
      }
      return Strategy::self_reflection({id}, label);
    }
  }
  if (key.find("(ablated)") != std::string::npos) {
    throw ConfigError("'" + label + "' is not a supported strategy");
  }
  if (auto e = parse_emotion(key); e && key.size() > 3) {
    SchedulePattern p;
    for (std::size_t i = 0; i < std::max<std::size_t>(static_length, 1); ++i) p.groups.emplace_back(std::vector{*e});
    return Strategy::heart(std::move(p), label);
  }
  return Strategy::heart(parse_pattern(label), label);
}

struct Candidate {
  std::string prompt_id;
  std::string text;
  std::optional<std::string> extracted;
  std::optional<VerifierResult> verdict;  // S1 only
  bool failed = false;
  std::string error;
};

struct IterationRecord {
  int t = 1;
  std::string group;  // rendered emotion group, or the baseline name
  std::vector<Candidate> candidates;
  std::optional<std::size_t> resolved_index;  // S1: selected candidate
  std::string resolved_text;
  std::optional<bool> resolved_correct;
  std::string resolved_by;  // oracle | carry_previous | ensembler | ensembler_fallback
};

struct RunRecord {
  std::string task_id;
  std::string benchmark;
  std::string strategy;
  Resolution resolution = Resolution::S1Oracle;
  std::string baseline_answer;
  bool baseline_correct = false;
  std::vector<IterationRecord> iterations;
  std::optional<int> first_correct_iteration;
  bool final_correct = false;
  int request_count = 0;
  bool errored = false;
  std::string error;
};

struct ProtocolConfig {
  int max_iterations = 4;
  Resolution resolution = Resolution::S1Oracle;
  GenParams params;
  /// Heart schedule whose pool sizes fix the baseline candidate counts.
  SchedulePattern reference_pattern = default_heart_pattern();
  bool carry_previous_on_all_fail = false;
  std::size_t parallelism = 1;  // in-flight candidate requests per iteration
  VerifierOptions verifier;
  std::map<Benchmark, std::string> system_instructions;
  std::string default_system_instruction{kGenericSystemInstruction};

  [[nodiscard]] const std::string& system_instruction(Benchmark b) const {
    auto it = system_instructions.find(b);
    return it == system_instructions.end() ? default_system_instruction : it->second;
  }

  void validate() const {
    if (max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
    if (reference_pattern.size() < static_cast<std::size_t>(max_iterations)) {
      throw ConfigError("reference pattern has " + std::to_string(reference_pattern.size()) +
                        " groups, fewer than max_iterations=" + std::to_string(max_iterations));
    }
    params.validate();
  }
};

// ---------------------------------------------------------------------------
// Prompt assembly

inline std::string problem_header(const Problem& problem) {
  return "<question>" + problem.question + "</question>\nThe answer type is: " +
         std::string(answer_type_label(problem.answer_type)) + ".\n" + std::string(kBoxedInstruction);
}

inline GenRequest make_init_request(const Problem& problem, const std::string& system_instruction,
                                    const std::string& cot_preamble, const GenParams& params) {
  GenRequest req;
  if (!system_instruction.empty()) req.messages.push_back({Role::System, system_instruction});
  req.messages.push_back({Role::User, problem_header(problem) + "\n" + cot_preamble});
  req.params = params;
  req.tags.task_id = problem.id;
  req.tags.iteration = 0;
  req.tags.prompt_id = "init";
  req.tags.strategy = "shared";
  req.tags.extra[std::string(tag::kRole)] = "init";
  return req;
}

/// Question, answer-type line, boxed-answer instruction, the previous
/// response verbatim, a blank line, then the cue verbatim as the last text.
inline GenRequest assemble_feedback(const Problem& problem, const std::string& prev_answer, const std::string& cue_text,
                                    const std::string& system_instruction, const GenParams& params = {}) {
  if (util::trim(cue_text).empty()) throw PreconditionError("feedback cue must not be empty");
  GenRequest req;
  if (!system_instruction.empty()) req.messages.push_back({Role::System, system_instruction});
  req.messages.push_back({Role::User, problem_header(problem) + "\n" + prev_answer + "\n\n" + cue_text});
  req.params = params;
  req.tags.task_id = problem.id;
  req.tags.extra[std::string(tag::kRole)] = "candidate";
  return req;
}

inline GenRequest make_ensembler_request(const Problem& problem, const std::vector<std::string>& candidate_texts,
                                         const GenParams& params) {
  std::string body = "<question>" + problem.question + "</question>\nThe answer type is: " +
                     std::string(answer_type_label(problem.answer_type)) + ".\n\n" + "Below are " +
                     std::to_string(candidate_texts.size()) +
                     " candidate solutions to this question. Analyze their strengths and weaknesses, then write one "
                     "final solution that keeps what is correct and fixes every error you find.\n";
  for (std::size_t i = 0; i < candidate_texts.size(); ++i) {
    body += "\nCandidate " + std::to_string(i + 1) + ":\n" + candidate_texts[i] + "\n";
  }
  body += "\n" + std::string(kBoxedInstruction);
  GenRequest req;
  req.messages.push_back({Role::User, std::move(body)});
  req.params = params;
  req.tags.task_id = problem.id;
  req.tags.prompt_id = "ensembler";
  req.tags.extra[std::string(tag::kRole)] = "ensembler";
  return req;
}

// ---------------------------------------------------------------------------
// Candidate planning

struct PlannedPrompt {
  std::string prompt_id;
  std::string text;
};

/// Feedback prompts for iteration t (1-based). Heart uses every cue of the
/// active group; baselines repeat their prompt as many times as the
/// reference heart pool holds, Self-Reflection cycling through its ids.
inline std::vector<PlannedPrompt> plan_candidates(const Strategy& strategy, int t, const CueBank& bank,
                                                  const BaselinePromptSet& baselines,
                                                  const SchedulePattern& reference) {
  if (t < 1) throw PreconditionError("iteration must be >= 1");
  const auto idx = static_cast<std::size_t>(t - 1);
  std::vector<PlannedPrompt> out;
  if (strategy.kind == StrategyKind::Heart) {
    if (idx >= strategy.pattern.size()) throw ConfigError("pattern shorter than iteration " + std::to_string(t));
    for (auto& cue : cues_for_group(bank, strategy.pattern.groups[idx])) out.push_back({cue.id, cue.text});
    return out;
  }
  if (idx >= reference.size()) throw ConfigError("reference pattern shorter than iteration " + std::to_string(t));
  const std::size_t k = kCuesPerEmotion * reference.groups[idx].size();
  for (std::size_t i = 0; i < k; ++i) {
    const std::string n = "#" + std::to_string(i + 1);
    switch (strategy.kind) {
      case StrategyKind::Wait: out.push_back({"wait" + n, baselines.wait_text}); break;
      case StrategyKind::Cot: out.push_back({"cot" + n, baselines.cot_preamble}); break;
      case StrategyKind::SelfReflection: {
        const int id = strategy.reflection_ids.at(i % strategy.reflection_ids.size());
        out.push_back({"sr-" + std::to_string(id) + n, baselines.reflection(id).text});
        break;
      }
      case StrategyKind::Heart: break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared t = 0 baseline cache

/// y_0 per (task, system instruction, backend); concurrent requests for the
/// same key wait for a single generation.
class BaselineCache {
public:
  using Key = std::tuple<std::string, std::string, std::string>;

  static Key make_key(const std::string& task_id, const std::string& system_instruction, const std::string& backend_id) {
    return {task_id, util::content_hash(system_instruction), backend_id};
  }

  template <typename Generate>
  std::string get_or_generate(const Key& key, Generate&& generate, bool* hit = nullptr) {
    std::shared_future<std::string> future;
    std::promise<std::string> promise;
    bool owner = false;
    {
      std::lock_guard lock(mutex_);
      auto it = entries_.find(key);
      if (it == entries_.end()) {
        future = promise.get_future().share();
        entries_.emplace(key, future);
        owner = true;
      } else {
        future = it->second;
      }
    }
    if (hit) *hit = !owner;
    if (owner) {
      try {
        std::string text = generate();
        promise.set_value(text);
        std::lock_guard lock(mutex_);
        fresh_.push_back(key);
      } catch (...) {
        {
          std::lock_guard lock(mutex_);
          entries_.erase(key);
        }
        promise.set_exception(std::current_exception());
      }
    }
    return future.get();
  }

  void put(const Key& key, std::string text) {
    std::promise<std::string> p;
    p.set_value(std::move(text));
    std::lock_guard lock(mutex_);
    entries_.insert_or_assign(key, p.get_future().share());
  }

  [[nodiscard]] std::optional<std::string> find(const Key& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    if (it->second.wait_for(std::chrono::seconds(0)) != std::future_status::ready) return std::nullopt;
    return it->second.get();
  }

  /// Keys generated (not loaded) since the last call.
  std::vector<Key> take_fresh() {
    std::lock_guard lock(mutex_);
    return std::exchange(fresh_, {});
  }

  [[nodiscard]] std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

private:
  mutable std::mutex mutex_;
  std::map<Key, std::shared_future<std::string>> entries_;
  std::vector<Key> fresh_;
};

// ---------------------------------------------------------------------------
// Record serialization

inline nlohmann::ordered_json verdict_to_json(const VerifierResult& v) {
  nlohmann::ordered_json j;
  j["correct"] = v.correct;
  j["extracted"] = v.extracted ? nlohmann::ordered_json(*v.extracted) : nlohmann::ordered_json(nullptr);
  j["normalized_pred"] = v.normalized_pred ? nlohmann::ordered_json(*v.normalized_pred) : nlohmann::ordered_json(nullptr);
  j["normalized_gold"] = v.normalized_gold;
  j["reason"] = std::string(verdict_reason_id(v.reason));
  return j;
}

inline VerifierResult verdict_from_json(const nlohmann::json& j) {
  VerifierResult v;
  v.correct = j.at("correct").get<bool>();
  if (!j.at("extracted").is_null()) v.extracted = j.at("extracted").get<std::string>();
  if (!j.at("normalized_pred").is_null()) v.normalized_pred = j.at("normalized_pred").get<std::string>();
  v.normalized_gold = j.at("normalized_gold").get<std::string>();
  const auto reason = j.at("reason").get<std::string>();
  v.reason = reason == "match" ? VerdictReason::Match
             : reason == "mismatch" ? VerdictReason::Mismatch
                                    : VerdictReason::ExtractionFailed;
  return v;
}

inline nlohmann::ordered_json to_json(const RunRecord& r) {
  using oj = nlohmann::ordered_json;
  oj j;
  j["task_id"] = r.task_id;
  j["benchmark"] = r.benchmark;
  j["strategy"] = r.strategy;
  j["resolution"] = std::string(resolution_id(r.resolution));
  j["baseline_answer"] = r.baseline_answer;
  j["baseline_correct"] = r.baseline_correct;
  oj iterations = oj::array();
  for (const auto& it : r.iterations) {
    oj ij;
    ij["t"] = it.t;
    ij["group"] = it.group;
    oj cands = oj::array();
    for (const auto& c : it.candidates) {
      oj cj;
      cj["prompt_id"] = c.prompt_id;
      cj["text"] = c.text;
      cj["extracted"] = c.extracted ? oj(*c.extracted) : oj(nullptr);
      if (c.verdict) cj["verdict"] = verdict_to_json(*c.verdict);
      cj["failed"] = c.failed;
      if (c.failed) cj["error"] = c.error;
      cands.push_back(std::move(cj));
    }
    ij["candidates"] = std::move(cands);
    ij["resolved_index"] = it.resolved_index ? oj(*it.resolved_index) : oj(nullptr);
    ij["resolved_text"] = it.resolved_text;
    ij["resolved_correct"] = it.resolved_correct ? oj(*it.resolved_correct) : oj(nullptr);
    ij["resolved_by"] = it.resolved_by;
    iterations.push_back(std::move(ij));
  }
  j["iterations"] = std::move(iterations);
  j["first_correct_iteration"] = r.first_correct_iteration ? oj(*r.first_correct_iteration) : oj(nullptr);
  j["final_correct"] = r.final_correct;
  j["request_count"] = r.request_count;
  j["errored"] = r.errored;
  if (r.errored) j["error"] = r.error;
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.task_id = j.at("task_id").get<std::string>();
  r.benchmark = j.at("benchmark").get<std::string>();
  r.strategy = j.at("strategy").get<std::string>();
  r.resolution = parse_resolution(j.at("resolution").get<std::string>());
  r.baseline_answer = j.at("baseline_answer").get<std::string>();
  r.baseline_correct = j.at("baseline_correct").get<bool>();
  for (const auto& ij : j.at("iterations")) {
    IterationRecord it;
    it.t = ij.at("t").get<int>();
    it.group = ij.at("group").get<std::string>();
    for (const auto& cj : ij.at("candidates")) {
      Candidate c;
      c.prompt_id = cj.at("prompt_id").get<std::string>();
      c.text = cj.at("text").get<std::string>();
      if (!cj.at("extracted").is_null()) c.extracted = cj.at("extracted").get<std::string>();
      if (cj.contains("verdict")) c.verdict = verdict_from_json(cj.at("verdict"));
      c.failed = cj.at("failed").get<bool>();
      c.error = cj.value("error", std::string());
      it.candidates.push_back(std::move(c));
    }
    if (!ij.at("resolved_index").is_null()) it.resolved_index = ij.at("resolved_index").get<std::size_t>();
    it.resolved_text = ij.at("resolved_text").get<std::string>();
    if (!ij.at("resolved_correct").is_null()) it.resolved_correct = ij.at("resolved_correct").get<bool>();
    it.resolved_by = ij.at("resolved_by").get<std::string>();
    r.iterations.push_back(std::move(it));
  }
  if (!j.at("first_correct_iteration").is_null()) r.first_correct_iteration = j.at("first_correct_iteration").get<int>();
  r.final_correct = j.at("final_correct").get<bool>();
  r.request_count = j.at("request_count").get<int>();
  r.errored = j.at("errored").get<bool>();
  r.error = j.value("error", std::string());
  return r;
}

// ---------------------------------------------------------------------------
// Protocol steps

namespace detail {

inline bool is_budget_error(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const BudgetExceeded&) {
    return true;
  } catch (...) {
    return false;
  }
}

}  // namespace detail

/// y_0: one chain-of-thought generation, reused by every strategy.
struct BaselineOutcome {
  std::string text;
  VerifierResult verdict;
  bool cache_hit = false;
};

inline BaselineOutcome init_baseline(const Task& task, Backend& backend, const std::string& cot_preamble,
                                     const std::string& system_instruction, const GenParams& params = {},
                                     BaselineCache* cache = nullptr, const VerifierOptions& verifier = {}) {
  const auto problem = task.problem();
  auto generate = [&] {
    return backend.generate(make_init_request(problem, system_instruction, cot_preamble, params)).text;
  };
  BaselineOutcome out;
  if (cache != nullptr) {
    out.text = cache->get_or_generate(BaselineCache::make_key(task.id, system_instruction, backend.id()), generate,
                                      &out.cache_hit);
  } else {
    out.text = generate();
  }
  out.verdict = verify_completion(out.text, task.gold, task.answer_type, verifier);
  return out;
}

/// One round of candidate generation for iteration t. Candidate-level
/// failures become failed sentinel candidates; only BudgetExceeded escapes.
inline IterationRecord run_iteration(const Problem& problem, int t, const Strategy& strategy,
                                     const std::string& prev_best, const CueBank& bank,
                                     const BaselinePromptSet& baselines, Backend& backend,
                                     const ProtocolConfig& config) {
  const auto plan = plan_candidates(strategy, t, bank, baselines, config.reference_pattern);
  IterationRecord record;
  record.t = t;
  record.group = strategy.descriptor(t);
  record.candidates.resize(plan.size());

  const auto& instruction = config.system_instruction(problem.benchmark);
  const auto prev_extracted = extract_answer(prev_best, problem.answer_type);
  std::optional<Polarity> polarity;
  std::optional<Polarity> prev_polarity;
  if (strategy.kind == StrategyKind::Heart) {
    polarity = strategy.pattern.groups[static_cast<std::size_t>(t - 1)].polarity();
    if (t >= 2) prev_polarity = strategy.pattern.groups[static_cast<std::size_t>(t - 2)].polarity();
  }

  util::parallel_for(plan.size(), config.parallelism, [&](std::size_t i) {
    auto req = assemble_feedback(problem, prev_best, plan[i].text, instruction, config.params);
    req.tags.iteration = t;
    req.tags.prompt_id = plan[i].prompt_id;
    req.tags.strategy = strategy.label;
    req.tags.extra[std::string(tag::kPrevAnswer)] = prev_extracted.value_or("");
    if (polarity) req.tags.extra[std::string(tag::kPolarity)] = std::string(polarity_name(*polarity));
    if (prev_polarity) req.tags.extra[std::string(tag::kPrevPolarity)] = std::string(polarity_name(*prev_polarity));

    Candidate& c = record.candidates[i];
    c.prompt_id = plan[i].prompt_id;
    try {
      c.text = backend.generate(req).text;
      c.extracted = extract_answer(c.text, problem.answer_type);
    } catch (const BudgetExceeded&) {
      throw;
    } catch (const Error& e) {
      c.failed = true;
      c.error = e.what();
    }
  });
  return record;
}

/// Oracle resolution. Fills candidate verdicts and the resolved answer;
/// returns true when a correct candidate was found (the run halts).
inline bool resolve_s1(IterationRecord& record, const std::string& gold, AnswerType type,
                       const VerifierOptions& verifier = {}, const std::string* carry_previous = nullptr) {
  std::vector<std::optional<std::string>> extracted;
  extracted.reserve(record.candidates.size());
  for (const auto& c : record.candidates) extracted.push_back(c.failed ? std::nullopt : c.extracted);
  const auto sel = oracle_select(extracted, gold, type, verifier);
  for (std::size_t i = 0; i < record.candidates.size(); ++i) record.candidates[i].verdict = sel.verdicts[i];
  if (!sel.halt && carry_previous != nullptr) {
    record.resolved_index.reset();
    record.resolved_text = *carry_previous;
    record.resolved_correct = false;
    record.resolved_by = "carry_previous";
    return false;
  }
  record.resolved_index = sel.index;
  record.resolved_text = record.candidates[sel.index].text;
  record.resolved_correct = sel.halt;
  record.resolved_by = "oracle";
  return sel.halt;
}

/// Generative synthesis: one ensembler call over the question and every
/// non-failed candidate. No gold answer is in scope here. If the ensembler
/// call fails, the first usable candidate (index 0 when it succeeded) is kept.
inline std::string resolve_s2(IterationRecord& record, const Problem& problem, Backend& ensembler,
                              const std::string& strategy_label, const GenParams& params = {}) {
  std::vector<std::string> texts;
  std::optional<std::size_t> first_ok;
  for (std::size_t i = 0; i < record.candidates.size(); ++i) {
    if (record.candidates[i].failed) continue;
    if (!first_ok) first_ok = i;
    texts.push_back(record.candidates[i].text);
  }
  if (texts.empty()) throw PreconditionError("every candidate failed; nothing to synthesise");

  auto req = make_ensembler_request(problem, texts, params);
  req.tags.iteration = record.t;
  req.tags.strategy = strategy_label;
  try {
    record.resolved_text = ensembler.generate(req).text;
    record.resolved_by = "ensembler";
    record.resolved_index.reset();
  } catch (const BudgetExceeded&) {
    throw;
  } catch (const Error&) {
    record.resolved_text = record.candidates[*first_ok].text;
    record.resolved_by = "ensembler_fallback";
    record.resolved_index = *first_ok;
  }
  return record.resolved_text;
}

/// Post-hoc scoring of a synthesis run. Verdicts are written to the record
/// for metrics only; nothing here feeds back into generation.
inline void score_s2(RunRecord& record, const std::string& gold, AnswerType type, const VerifierOptions& verifier = {}) {
  record.baseline_correct = verify_completion(record.baseline_answer, gold, type, verifier).correct;
  record.first_correct_iteration.reset();
  if (record.baseline_correct && !record.errored) record.first_correct_iteration = 0;
  bool last = record.baseline_correct;
  for (auto& it : record.iterations) {
    const bool ok = verify_completion(it.resolved_text, gold, type, verifier).correct;
    it.resolved_correct = ok;
    if (ok && !record.first_correct_iteration) record.first_correct_iteration = it.t;
    last = ok;
  }
  record.final_correct = !record.errored && last;
}

// ---------------------------------------------------------------------------
// Engine

/// Runs tasks under a strategy with a fixed bank, prompt set, backend and
/// configuration. Thread-safe: concurrent run() calls share the y_0 cache.
class Engine {
public:
  Engine(CueBank bank, BaselinePromptSet baselines, std::shared_ptr<Backend> backend, ProtocolConfig config,
         std::shared_ptr<Backend> ensembler = nullptr, std::shared_ptr<BaselineCache> cache = nullptr)
      : bank_(std::move(bank)),
        baselines_(std::move(baselines)),
        backend_(std::move(backend)),
        ensembler_(ensembler ? std::move(ensembler) : backend_),
        config_(std::move(config)),
        cache_(cache ? std::move(cache) : std::make_shared<BaselineCache>()) {
    if (!backend_) throw ConfigError("engine needs a backend");
    config_.validate();
  }

  [[nodiscard]] const ProtocolConfig& config() const noexcept { return config_; }
  [[nodiscard]] const CueBank& bank() const noexcept { return bank_; }
  [[nodiscard]] const BaselinePromptSet& baselines() const noexcept { return baselines_; }
  [[nodiscard]] const std::shared_ptr<BaselineCache>& cache() const noexcept { return cache_; }
  [[nodiscard]] Backend& backend() const noexcept { return *backend_; }

  void check_strategy(const Strategy& s) const {
    if (s.kind == StrategyKind::Heart && s.pattern.size() < static_cast<std::size_t>(config_.max_iterations)) {
      throw ConfigError("pattern '" + render_pattern(s.pattern) + "' is shorter than max_iterations=" +
                        std::to_string(config_.max_iterations));
    }
  }

  /// Full protocol for one task. Task-level failures are recorded in the
  /// returned record; BudgetExceeded propagates.
  RunRecord run(const Task& task, const Strategy& strategy) const {
    check_strategy(strategy);
    if (config_.resolution == Resolution::S2Synthesis) {
      auto record = generate_s2(task.problem(), strategy);
      score_s2(record, task.gold, task.answer_type, config_.verifier);
      return record;
    }
    return run_s1(task, strategy);
  }

  /// The S2 generation path. Takes a Problem, which carries no gold answer.
  RunRecord generate_s2(const Problem& problem, const Strategy& strategy) const {
    RunRecord rec = blank_record(problem, strategy);
    rec.resolution = Resolution::S2Synthesis;
    rec.request_count = 1;
    std::string prev;
    try {
      prev = baseline_text(problem);
    } catch (const BudgetExceeded&) {
      throw;
    } catch (const Error& e) {
      return errored(std::move(rec), e.what());
    }
    rec.baseline_answer = prev;
    for (int t = 1; t <= config_.max_iterations; ++t) {
      auto it = run_iteration(problem, t, strategy, prev, bank_, baselines_, *backend_, config_);
      rec.request_count += static_cast<int>(it.candidates.size()) + 1;
      try {
        prev = resolve_s2(it, problem, *ensembler_, strategy.label, config_.params);
      } catch (const PreconditionError& e) {
        rec.iterations.push_back(std::move(it));
        return errored(std::move(rec), e.what());
      }
      rec.iterations.push_back(std::move(it));
    }
    return rec;
  }

private:
  static RunRecord blank_record(const Problem& problem, const Strategy& strategy) {
    RunRecord rec;
    rec.task_id = problem.id;
    rec.benchmark = std::string(benchmark_id(problem.benchmark));
    rec.strategy = strategy.label;
    return rec;
  }

  RunRecord errored(RunRecord rec, std::string message) const {
    rec.resolution = config_.resolution;
    rec.errored = true;
    rec.error = std::move(message);
    rec.final_correct = false;
    return rec;
  }

  std::string baseline_text(const Problem& problem) const {
    const auto& instruction = config_.system_instruction(problem.benchmark);
    return cache_->get_or_generate(BaselineCache::make_key(problem.id, instruction, backend_->id()), [&] {
      return backend_->generate(make_init_request(problem, instruction, baselines_.cot_preamble, config_.params)).text;
    });
  }

  RunRecord run_s1(const Task& task, const Strategy& strategy) const {
    const auto problem = task.problem();
    RunRecord rec = blank_record(problem, strategy);
    rec.resolution = Resolution::S1Oracle;
    rec.request_count = 1;
    try {
      rec.baseline_answer = baseline_text(problem);
    } catch (const BudgetExceeded&) {
      throw;
    } catch (const Error& e) {
      return errored(std::move(rec), e.what());
    }
    rec.baseline_correct = verify_completion(rec.baseline_answer, task.gold, task.answer_type, config_.verifier).correct;
    if (rec.baseline_correct) {
      rec.first_correct_iteration = 0;
      rec.final_correct = true;
      return rec;
    }
    std::string prev = rec.baseline_answer;
    for (int t = 1; t <= config_.max_iterations; ++t) {
      auto it = run_iteration(problem, t, strategy, prev, bank_, baselines_, *backend_, config_);
      rec.request_count += static_cast<int>(it.candidates.size());
      const bool halt = resolve_s1(it, task.gold, task.answer_type, config_.verifier,
                                   config_.carry_previous_on_all_fail ? &prev : nullptr);
      prev = it.resolved_text;
      rec.iterations.push_back(std::move(it));
      if (halt) {
        rec.first_correct_iteration = t;
        rec.final_correct = true;
        return rec;
      }
    }
    return rec;
  }

  CueBank bank_;
  BaselinePromptSet baselines_;
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<Backend> ensembler_;
  ProtocolConfig config_;
  std::shared_ptr<BaselineCache> cache_;
};

}  // namespace heart
