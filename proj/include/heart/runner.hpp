#pragma once

// Operator-level commands: run configuration, resumable record storage,
// and the run / ablate / report / validate entry points used by the CLI.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "heart/backend.hpp"
#include "heart/datasets.hpp"
#include "heart/error.hpp"
#include "heart/evalreport.hpp"
#include "heart/http_backend.hpp"
#include "heart/prompt_bank.hpp"
#include "heart/protocol.hpp"
#include "heart/scripted_backend.hpp"
#include "heart/stochastic_backend.hpp"
#include "heart/util.hpp"

#ifndef HEART_DATA_DIR
#define HEART_DATA_DIR "data"
#endif

namespace heart {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitValidationFailed = 1,
  kExitConfigError = 2,
  kExitBudgetExhausted = 3,
  kExitErrorThreshold = 4,
  kExitInterrupted = 130,
};

namespace fs = std::filesystem;

struct BenchmarkSource {
  Benchmark benchmark = Benchmark::SimpleQA;
  fs::path path;
  nlohmann::json mapping = nlohmann::json::object();
};

struct BackendSettings {
  std::string kind = "scripted";  // scripted | stochastic | http
  fs::path script;
  std::optional<std::uint64_t> seed;
  AlternationRespondent respondent;
  std::string url;
  std::string model;
  nlohmann::json vendor_options = nlohmann::json::object();
  long long timeout_ms = 120'000;
  int max_retries = 3;
  long long backoff_base_ms = 1'000;
  std::string id;  // optional identity override
};

struct RunConfig {
  fs::path data_dir = HEART_DATA_DIR;
  std::vector<BenchmarkSource> benchmarks;
  SplitSpec split;
  bool split_seed_set = false;
  std::string subset = "all";  // all | validation | test
  std::vector<std::string> strategies = {"heart"};
  std::string heart_pattern{kDefaultHeartPattern};
  Resolution resolution = Resolution::S1Oracle;
  std::optional<fs::path> grid;
  std::optional<fs::path> bank;
  std::optional<fs::path> baselines;
  std::map<Benchmark, fs::path> system_instructions;
  BackendSettings backend;
  std::optional<BackendSettings> ensembler_backend;
  GenParams params;
  int max_iterations = 4;
  std::size_t parallelism = 1;
  std::size_t task_parallelism = 1;
  std::optional<std::int64_t> budget;
  fs::path out = "heart-out";
  std::uint64_t seed = 0;
  bool skip_errored = false;
  double error_threshold = 0.1;
  bool carry_previous_on_all_fail = false;
  double numeric_tolerance = 1e-9;

  [[nodiscard]] fs::path bank_path() const { return bank.value_or(data_dir / "cues" / "ekman_30.jsonl"); }
  [[nodiscard]] fs::path baselines_path() const { return baselines.value_or(data_dir / "cues" / "baselines.jsonl"); }

  [[nodiscard]] fs::path system_instruction_path(Benchmark b) const {
    if (auto it = system_instructions.find(b); it != system_instructions.end()) return it->second;
    if (b == Benchmark::OlympiadMath || b == Benchmark::OlympiadPhysics) {
      return data_dir / "prompts" / "olympiad_system_instruction.txt";
    }
    return data_dir / "prompts" / "generic_system_instruction.txt";
  }

  [[nodiscard]] std::uint64_t split_seed() const { return split_seed_set ? split.seed : seed; }
  [[nodiscard]] std::uint64_t backend_seed(const BackendSettings& b) const { return b.seed.value_or(seed); }
};

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

inline void reject_secrets(const nlohmann::json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto key = util::to_lower(it.key());
      if (key == "api_key" || key == "apikey" || key == "authorization" || key == "token") {
        throw ConfigError("secrets are not accepted in config files; set HEART_API_KEY instead");
      }
      reject_secrets(it.value());
    }
  } else if (j.is_array()) {
    for (const auto& v : j) reject_secrets(v);
  }
}

inline BackendSettings backend_from_json(const nlohmann::json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("backend must be an object");
  reject_unknown(j,
                 {"kind", "script", "seed", "respondent", "url", "model", "vendor_options", "timeout_ms", "max_retries",
                  "backoff_base_ms", "id"},
                 "backend");
  BackendSettings b;
  b.kind = j.value("kind", b.kind);
  if (j.contains("script")) b.script = resolve(base, j.at("script").get<std::string>());
  if (j.contains("seed")) b.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("respondent")) {
    const auto& r = j.at("respondent");
    reject_unknown(r, {"p_initial", "p_base", "switch_bonus", "p_keep_correct"}, "backend.respondent");
    b.respondent.p_initial = r.value("p_initial", b.respondent.p_initial);
    b.respondent.p_base = r.value("p_base", b.respondent.p_base);
    b.respondent.switch_bonus = r.value("switch_bonus", b.respondent.switch_bonus);
    b.respondent.p_keep_correct = r.value("p_keep_correct", b.respondent.p_keep_correct);
  }
  b.url = j.value("url", b.url);
  b.model = j.value("model", b.model);
  if (j.contains("vendor_options")) b.vendor_options = j.at("vendor_options");
  b.timeout_ms = j.value("timeout_ms", b.timeout_ms);
  b.max_retries = j.value("max_retries", b.max_retries);
  b.backoff_base_ms = j.value("backoff_base_ms", b.backoff_base_ms);
  b.id = j.value("id", b.id);
  return b;
}

inline nlohmann::json backend_to_json(const BackendSettings& b) {
  nlohmann::json j;
  j["kind"] = b.kind;
  if (b.kind == "scripted") j["script"] = b.script.generic_string();
  if (b.seed) j["seed"] = *b.seed;
  if (b.kind == "stochastic") {
    j["respondent"] = {{"p_initial", b.respondent.p_initial},
                       {"p_base", b.respondent.p_base},
                       {"switch_bonus", b.respondent.switch_bonus},
                       {"p_keep_correct", b.respondent.p_keep_correct}};
  }
  if (b.kind == "http") {
    j["url"] = b.url;
    j["model"] = b.model;
    j["vendor_options"] = b.vendor_options;
    j["timeout_ms"] = b.timeout_ms;
    j["max_retries"] = b.max_retries;
    j["backoff_base_ms"] = b.backoff_base_ms;
  }
  if (!b.id.empty()) j["id"] = b.id;
  return j;
}

}  // namespace detail

/// Relative paths inside a config file resolve against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir = {}) {
  using detail::resolve;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  detail::reject_secrets(j);
  detail::reject_unknown(j,
                         {"data_dir", "benchmarks", "split", "strategies", "heart_pattern", "resolution", "grid", "bank",
                          "baselines", "system_instructions", "backend", "ensembler_backend", "params",
                          "max_iterations", "parallelism", "task_parallelism", "budget", "out", "seed", "skip_errored",
                          "error_threshold", "carry_previous_on_all_fail", "numeric_tolerance"},
                         "config");
  RunConfig c;
  try {
    if (j.contains("data_dir")) c.data_dir = resolve(base_dir, j.at("data_dir").get<std::string>());
    for (const auto& b : j.value("benchmarks", nlohmann::json::array())) {
      detail::reject_unknown(b, {"name", "path", "mapping"}, "benchmarks[]");
      BenchmarkSource src;
      src.benchmark = parse_benchmark(b.at("name").get<std::string>());
      src.path = resolve(base_dir, b.at("path").get<std::string>());
      if (b.contains("mapping")) {
        src.mapping = b.at("mapping").is_string() ? nlohmann::json{{"preset", b.at("mapping")}} : b.at("mapping");
      }
      c.benchmarks.push_back(std::move(src));
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      detail::reject_unknown(s, {"validation_fraction", "seed", "subset"}, "split");
      c.split.validation_fraction = s.value("validation_fraction", c.split.validation_fraction);
      if (s.contains("seed")) {
        c.split.seed = s.at("seed").get<std::uint64_t>();
        c.split_seed_set = true;
      }
      c.subset = s.value("subset", c.subset);
    }
    if (j.contains("strategies")) c.strategies = j.at("strategies").get<std::vector<std::string>>();
    c.heart_pattern = j.value("heart_pattern", c.heart_pattern);
    if (j.contains("resolution")) c.resolution = parse_resolution(j.at("resolution").get<std::string>());
    if (j.contains("grid")) c.grid = resolve(base_dir, j.at("grid").get<std::string>());
    if (j.contains("bank")) c.bank = resolve(base_dir, j.at("bank").get<std::string>());
    if (j.contains("baselines")) c.baselines = resolve(base_dir, j.at("baselines").get<std::string>());
    if (j.contains("system_instructions")) {
      const auto& si = j.at("system_instructions");
      for (auto it = si.begin(); it != si.end(); ++it) {
        c.system_instructions[parse_benchmark(it.key())] = resolve(base_dir, it.value().get<std::string>());
      }
    }
    if (j.contains("backend")) c.backend = detail::backend_from_json(j.at("backend"), base_dir);
    if (j.contains("ensembler_backend")) {
      c.ensembler_backend = detail::backend_from_json(j.at("ensembler_backend"), base_dir);
    }
    if (j.contains("params")) {
      const auto& p = j.at("params");
      detail::reject_unknown(p, {"temperature", "top_p", "max_tokens", "thinking_enabled"}, "params");
      c.params.temperature = p.value("temperature", c.params.temperature);
      c.params.top_p = p.value("top_p", c.params.top_p);
      c.params.max_tokens = p.value("max_tokens", c.params.max_tokens);
      if (p.contains("thinking_enabled")) c.params.thinking_enabled = p.at("thinking_enabled").get<bool>();
    }
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.parallelism = j.value("parallelism", c.parallelism);
    c.task_parallelism = j.value("task_parallelism", c.task_parallelism);
    if (j.contains("budget")) c.budget = j.at("budget").get<std::int64_t>();
    if (j.contains("out")) c.out = resolve(base_dir, j.at("out").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.skip_errored = j.value("skip_errored", c.skip_errored);
    c.error_threshold = j.value("error_threshold", c.error_threshold);
    c.carry_previous_on_all_fail = j.value("carry_previous_on_all_fail", c.carry_previous_on_all_fail);
    c.numeric_tolerance = j.value("numeric_tolerance", c.numeric_tolerance);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(util::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(j, path.parent_path());
}

/// Canonical JSON used for the manifest and the config hash. Holds no secrets.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["data_dir"] = c.data_dir.generic_string();
  auto benches = nlohmann::json::array();
  for (const auto& b : c.benchmarks) {
    benches.push_back({{"name", std::string(benchmark_id(b.benchmark))}, {"path", b.path.generic_string()}, {"mapping", b.mapping}});
  }
  j["benchmarks"] = std::move(benches);
  j["split"] = {{"validation_fraction", c.split.validation_fraction}, {"seed", c.split_seed()}, {"subset", c.subset}};
  j["strategies"] = c.strategies;
  j["heart_pattern"] = c.heart_pattern;
  j["resolution"] = std::string(resolution_id(c.resolution));
  if (c.grid) j["grid"] = c.grid->generic_string();
  j["bank"] = c.bank_path().generic_string();
  j["baselines"] = c.baselines_path().generic_string();
  nlohmann::json si = nlohmann::json::object();
  for (const auto& b : c.benchmarks) si[std::string(benchmark_id(b.benchmark))] = c.system_instruction_path(b.benchmark).generic_string();
  j["system_instructions"] = std::move(si);
  j["backend"] = detail::backend_to_json(c.backend);
  if (c.ensembler_backend) j["ensembler_backend"] = detail::backend_to_json(*c.ensembler_backend);
  j["params"] = {{"temperature", c.params.temperature}, {"top_p", c.params.top_p}, {"max_tokens", c.params.max_tokens}};
  if (c.params.thinking_enabled) j["params"]["thinking_enabled"] = *c.params.thinking_enabled;
  j["max_iterations"] = c.max_iterations;
  j["parallelism"] = c.parallelism;
  j["task_parallelism"] = c.task_parallelism;
  if (c.budget) j["budget"] = *c.budget;
  j["out"] = c.out.generic_string();
  j["seed"] = c.seed;
  j["skip_errored"] = c.skip_errored;
  j["error_threshold"] = c.error_threshold;
  j["carry_previous_on_all_fail"] = c.carry_previous_on_all_fail;
  j["numeric_tolerance"] = c.numeric_tolerance;
  return j;
}

/// Settings that change what a stored record means. Records may only be
/// reused across runs that agree on this hash.
inline std::string resume_hash(const RunConfig& c) {
  auto j = to_json(c);
  for (const char* k : {"out", "parallelism", "task_parallelism", "budget", "strategies", "grid", "benchmarks",
                        "skip_errored", "error_threshold", "data_dir"}) {
    j.erase(k);
  }
  return util::content_hash(j.dump());
}

/// Command-line overrides; each mirrors a config key.
struct CliOverrides {
  std::optional<std::string> backend;
  std::optional<std::string> resolution;
  std::optional<int> max_iterations;
  std::optional<std::size_t> parallelism;
  std::optional<std::size_t> task_parallelism;
  std::optional<std::int64_t> budget;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> strategies;  // comma-separated
  std::optional<std::string> script;
  std::optional<std::string> grid;
  std::optional<std::string> bank;
  std::optional<std::string> heart_pattern;
};

inline void apply_overrides(RunConfig& c, const CliOverrides& o) {
  if (o.backend) c.backend.kind = *o.backend;
  if (o.resolution) c.resolution = parse_resolution(*o.resolution);
  if (o.max_iterations) c.max_iterations = *o.max_iterations;
  if (o.parallelism) c.parallelism = *o.parallelism;
  if (o.task_parallelism) c.task_parallelism = *o.task_parallelism;
  if (o.budget) c.budget = *o.budget;
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.strategies) {
    c.strategies.clear();
    for (auto& s : util::split(*o.strategies, ",")) {
      if (!util::trim(s).empty()) c.strategies.emplace_back(util::trim(s));
    }
  }
  if (o.script) c.backend.script = *o.script;
  if (o.grid) c.grid = fs::path(*o.grid);
  if (o.bank) c.bank = fs::path(*o.bank);
  if (o.heart_pattern) c.heart_pattern = *o.heart_pattern;
}

// ---------------------------------------------------------------------------
// Validation and loading. Nothing in this section touches the network.

struct LoadedBenchmark {
  Benchmark benchmark;
  std::vector<Task> tasks;
  FilterReport filter;
  std::string system_instruction;
};

struct PreparedRun {
  RunConfig config;
  CueBank bank;
  BaselinePromptSet baselines;
  SchedulePattern heart_pattern;
  std::vector<Strategy> strategies;
  std::vector<LoadedBenchmark> benchmarks;
  std::optional<ScriptedBackend::Script> script;
  std::optional<ScriptedBackend::Script> ensembler_script;
};

namespace detail {

inline void validate_backend(const BackendSettings& b, const std::string& where) {
  if (b.kind == "scripted") {
    if (b.script.empty()) throw ConfigError(where + ": scripted backend needs a script path");
    if (!fs::exists(b.script)) throw ConfigError(where + ": script not found: " + b.script.string());
  } else if (b.kind == "stochastic") {
    b.respondent.validate();
  } else if (b.kind == "http") {
    HttpBackendConfig h;
    h.url = b.url;
    h.model = b.model;
    h.vendor_options = b.vendor_options;
    h.timeout = std::chrono::milliseconds(b.timeout_ms);
    h.max_retries = b.max_retries;
    h.backoff_base = std::chrono::milliseconds(b.backoff_base_ms);
    h.validate();
    parse_url(h.url);
  } else {
    throw ConfigError(where + ": unknown backend kind '" + b.kind + "'");
  }
}

inline ScriptedBackend::Script load_script_checked(const fs::path& path) {
  try {
    return load_script(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace detail

/// Validates the configuration and loads every local input. Throws Error
/// subclasses on the first problem found.
inline PreparedRun prepare_run(const RunConfig& config, bool need_strategies = true) {
  if (config.benchmarks.empty()) throw ConfigError("config lists no benchmarks");
  if (config.max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
  if (config.parallelism == 0 || config.task_parallelism == 0) throw ConfigError("parallelism must be >= 1");
  if (config.budget && *config.budget <= 0) throw ConfigError("budget must be positive");
  if (!(config.error_threshold >= 0.0 && config.error_threshold <= 1.0)) {
    throw ConfigError("error_threshold must lie in [0, 1]");
  }
  if (!(config.numeric_tolerance >= 0.0)) throw ConfigError("numeric_tolerance must be >= 0");
  if (config.subset != "all" && config.subset != "validation" && config.subset != "test") {
    throw ConfigError("split subset must be all, validation or test");
  }
  config.split.validate();
  config.params.validate();
  detail::validate_backend(config.backend, "backend");
  if (config.ensembler_backend) detail::validate_backend(*config.ensembler_backend, "ensembler_backend");

  auto require_file = [](const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
  };
  require_file(config.bank_path(), "cue bank");
  require_file(config.baselines_path(), "baseline prompt file");

  PreparedRun run{config, load_bank(config.bank_path()), load_baselines(config.baselines_path()),
                  parse_pattern(config.heart_pattern), {}, {}, {}, {}};
  if (run.heart_pattern.size() < static_cast<std::size_t>(config.max_iterations)) {
    throw ConfigError("heart_pattern has fewer groups than max_iterations");
  }

  if (need_strategies) {
    if (config.strategies.empty()) throw ConfigError("config lists no strategies");
    std::set<std::string> seen;
    for (const auto& s : config.strategies) {
      auto strategy = parse_strategy(s, run.heart_pattern, static_cast<std::size_t>(std::max(config.max_iterations, 1)));
      if (!seen.insert(strategy.label).second) throw ConfigError("duplicate strategy '" + strategy.label + "'");
      if (strategy.kind == StrategyKind::Heart && strategy.pattern.size() < static_cast<std::size_t>(config.max_iterations)) {
        throw ConfigError("strategy '" + s + "' has fewer groups than max_iterations");
      }
      run.strategies.push_back(std::move(strategy));
    }
  }

  std::set<std::string> task_ids;
  for (const auto& src : config.benchmarks) {
    require_file(src.path, "dataset");
    LoadedBenchmark lb;
    lb.benchmark = src.benchmark;
    auto all = load_tasks(src.path, src.benchmark, FieldMapping::from_json(src.mapping), &lb.filter);
    if (all.empty()) throw ConfigError("dataset has no usable records: " + src.path.string());
    if (config.subset == "all") {
      lb.tasks = std::move(all);
    } else {
      SplitSpec spec = config.split;
      spec.seed = config.split_seed();
      auto parts = split(all, spec);
      lb.tasks = config.subset == "validation" ? std::move(parts.validation) : std::move(parts.test);
    }
    for (const auto& t : lb.tasks) {
      if (!task_ids.insert(t.id).second) throw ConfigError("task id '" + t.id + "' appears more than once");
    }
    const auto si = config.system_instruction_path(src.benchmark);
    require_file(si, "system instruction");
    lb.system_instruction = std::string(util::trim(util::read_file(si)));
    run.benchmarks.push_back(std::move(lb));
  }

  if (config.backend.kind == "scripted") run.script = detail::load_script_checked(config.backend.script);
  if (config.ensembler_backend && config.ensembler_backend->kind == "scripted") {
    run.ensembler_script = detail::load_script_checked(config.ensembler_backend->script);
  }
  return run;
}

/// Upper bound on generation calls: every task under every strategy, each
/// with one t = 0 call and N iterations at the largest pool, plus 10%.
inline std::int64_t default_budget(const PreparedRun& run, const std::vector<Strategy>& strategies) {
  std::size_t tasks = 0;
  for (const auto& b : run.benchmarks) tasks += b.tasks.size();
  const auto n = static_cast<std::size_t>(run.config.max_iterations);
  const std::size_t extra = run.config.resolution == Resolution::S2Synthesis ? 1 : 0;
  double per_task = 0.0;
  for (const auto& s : strategies) {
    std::size_t kmax = 0;
    const auto& pattern = s.kind == StrategyKind::Heart ? s.pattern : run.heart_pattern;
    for (std::size_t t = 0; t < n && t < pattern.size(); ++t) {
      kmax = std::max(kmax, kCuesPerEmotion * pattern.groups[t].size());
    }
    per_task += 1.0 + static_cast<double>(n * (kmax + extra));
  }
  return static_cast<std::int64_t>(std::ceil(1.1 * static_cast<double>(tasks) * per_task));
}

// ---------------------------------------------------------------------------
// Backends

inline std::shared_ptr<Backend> make_backend(const BackendSettings& b, const RunConfig& config,
                                             const std::optional<ScriptedBackend::Script>& script,
                                             const std::vector<LoadedBenchmark>& benchmarks) {
  if (b.kind == "scripted") {
    return std::make_shared<ScriptedBackend>(*script, b.id.empty() ? "scripted" : b.id);
  }
  if (b.kind == "stochastic") {
    std::map<std::string, GoldAnswer, std::less<>> answers;
    for (const auto& lb : benchmarks) {
      for (const auto& t : lb.tasks) answers.emplace(t.id, GoldAnswer{t.gold, t.answer_type});
    }
    const auto seed = config.backend_seed(b);
    return std::make_shared<StochasticBackend>(b.respondent, seed, std::move(answers),
                                               b.id.empty() ? "stochastic:" + std::to_string(seed) : b.id);
  }
  HttpBackendConfig h;
  h.url = b.url;
  h.model = b.model;
  h.vendor_options = b.vendor_options;
  h.timeout = std::chrono::milliseconds(b.timeout_ms);
  h.max_retries = b.max_retries;
  h.backoff_base = std::chrono::milliseconds(b.backoff_base_ms);
  return std::make_shared<HttpChatBackend>(std::move(h));
}

// ---------------------------------------------------------------------------
// Record store

/// records.jsonl in the output directory. Appends as records arrive; the
/// last record per key wins on reload; finalize() rewrites canonically.
class RecordStore {
public:
  using Key = std::tuple<std::string, std::string, std::string, std::string>;  // benchmark, strategy, resolution, task

  explicit RecordStore(fs::path path) : path_(std::move(path)) {
    if (!fs::exists(path_)) return;
    for (const auto& line : util::nonblank_lines(util::read_file(path_))) {
      try {
        auto rec = run_record_from_json(nlohmann::json::parse(line.text));
        records_.insert_or_assign(key_of(rec), std::move(rec));
      } catch (const std::exception&) {
        ++skipped_lines_;  // a torn final line after an interruption
      }
    }
  }

  static Key key_of(const RunRecord& r) {
    return {r.benchmark, r.strategy, std::string(resolution_id(r.resolution)), r.task_id};
  }

  [[nodiscard]] std::optional<RunRecord> completed(const std::string& benchmark, const std::string& strategy,
                                                   Resolution resolution, const std::string& task_id) const {
    std::lock_guard lock(mutex_);
    auto it = records_.find(Key{benchmark, strategy, std::string(resolution_id(resolution)), task_id});
    if (it == records_.end() || it->second.errored) return std::nullopt;
    return it->second;
  }

  void append(const RunRecord& r) {
    const auto line = to_json(r).dump() + "\n";
    std::lock_guard lock(mutex_);
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to " + path_.string());
    out << line;
    out.flush();
    records_.insert_or_assign(key_of(r), r);
  }

  /// Sorted by (benchmark, strategy, resolution, task id).
  void finalize() {
    std::lock_guard lock(mutex_);
    std::string content;
    for (const auto& [key, rec] : records_) content += to_json(rec).dump() + "\n";
    util::write_file(path_, content);
  }

  [[nodiscard]] std::vector<RunRecord> all() const {
    std::lock_guard lock(mutex_);
    std::vector<RunRecord> out;
    for (const auto& [key, rec] : records_) out.push_back(rec);
    return out;
  }

  [[nodiscard]] std::size_t skipped_lines() const noexcept { return skipped_lines_; }

private:
  fs::path path_;
  mutable std::mutex mutex_;
  std::map<Key, RunRecord> records_;
  std::size_t skipped_lines_ = 0;
};

/// Persisted y_0 cache: one `{"task_id","system_instruction_hash","backend_id","text"}` per line.
inline void load_baseline_cache(BaselineCache& cache, const fs::path& path) {
  if (!fs::exists(path)) return;
  for (const auto& line : util::nonblank_lines(util::read_file(path))) {
    try {
      const auto j = nlohmann::json::parse(line.text);
      cache.put({j.at("task_id").get<std::string>(), j.at("system_instruction_hash").get<std::string>(),
                 j.at("backend_id").get<std::string>()},
                j.at("text").get<std::string>());
    } catch (const std::exception&) {
      // torn line; the entry is regenerated on demand
    }
  }
}

inline void append_baseline_cache(BaselineCache& cache, const fs::path& path, std::mutex& file_mutex) {
  std::string lines;
  for (const auto& key : cache.take_fresh()) {
    auto text = cache.find(key);
    if (!text) continue;
    nlohmann::ordered_json j;
    j["task_id"] = std::get<0>(key);
    j["system_instruction_hash"] = std::get<1>(key);
    j["backend_id"] = std::get<2>(key);
    j["text"] = *text;
    lines += j.dump() + "\n";
  }
  if (lines.empty()) return;
  std::lock_guard lock(file_mutex);
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << lines;
}

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
  const std::atomic<bool>* stop = nullptr;
  /// Wraps every backend built for the run (tests observe traffic here).
  std::function<std::shared_ptr<Backend>(std::shared_ptr<Backend>)> backend_hook;
};

namespace detail {

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

inline nlohmann::ordered_json manifest(const PreparedRun& run, const std::string& command, const std::string& backend_id,
                                       const std::string& ensembler_id, std::int64_t budget) {
  nlohmann::ordered_json m;
  const auto cfg = to_json(run.config);
  m["tool"] = "heart";
  m["tool_version"] = std::string(kToolVersion);
  m["command"] = command;
  m["created_at"] = utc_now();
  m["config_hash"] = util::content_hash(cfg.dump());
  m["resume_hash"] = resume_hash(run.config);
  m["config"] = cfg;
  m["bank_hash"] = run.bank.hash();
  m["baselines_hash"] = run.baselines.hash();
  nlohmann::ordered_json si = nlohmann::ordered_json::object();
  for (const auto& b : run.benchmarks) si[std::string(benchmark_id(b.benchmark))] = util::content_hash(b.system_instruction);
  m["system_instruction_hashes"] = std::move(si);
  m["templates"] = {{"init", std::string(kInitTemplateVersion)},
                    {"feedback", std::string(kFeedbackTemplateVersion)},
                    {"ensembler", std::string(kEnsemblerTemplateVersion)}};
  m["backend_id"] = backend_id;
  m["ensembler_backend_id"] = ensembler_id;
  m["seeds"] = {{"seed", run.config.seed},
                {"split", run.config.split_seed()},
                {"backend", run.config.backend_seed(run.config.backend)}};
  m["budget"] = budget;
  return m;
}

inline void check_resume(const fs::path& out_dir, const RunConfig& config) {
  const auto path = out_dir / "manifest.json";
  if (!fs::exists(path)) return;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(util::read_file(path));
  } catch (const std::exception&) {
    return;
  }
  if (m.contains("resume_hash") && m["resume_hash"] != resume_hash(config)) {
    throw ConfigError("output directory " + out_dir.string() +
                      " holds records from a different configuration; choose another --out");
  }
}

inline void write_metric_reports(const std::vector<MetricSeries>& series, const fs::path& dir) {
  emit_report(series, ReportFormat::Csv, dir / "metrics.csv");
  emit_report(series, ReportFormat::Jsonl, dir / "metrics.jsonl");
  emit_report(series, ReportFormat::Markdown, dir / "metrics.md");
  emit_plot_data(series, dir / "plots");
}

}  // namespace detail

/// Shared driver for `run` and `ablate`.
class Session {
public:
  Session(PreparedRun run, CommandContext& ctx, std::string command) : run_(std::move(run)), ctx_(ctx), command_(std::move(command)) {}

  int execute(const std::vector<std::string>& grid_specs) {
    const auto& cfg = run_.config;
    detail::check_resume(cfg.out, cfg);
    fs::create_directories(cfg.out);

    // Strategies that will execute, for the default budget.
    std::vector<Strategy> planned = run_.strategies;
    for (const auto& spec : grid_specs) {
      try {
        planned.push_back(parse_strategy(spec, run_.heart_pattern, static_cast<std::size_t>(std::max(cfg.max_iterations, 1))));
      } catch (const Error&) {
      }
    }
    const auto budget_limit = cfg.budget.value_or(default_budget(run_, planned));
    auto budget = std::make_shared<RequestBudget>(budget_limit);

    auto wrap = [&](std::shared_ptr<Backend> b) {
      if (ctx_.backend_hook) b = ctx_.backend_hook(std::move(b));
      return std::shared_ptr<Backend>(std::make_shared<BudgetedBackend>(std::move(b), budget));
    };
    auto backend = wrap(make_backend(cfg.backend, cfg, run_.script, run_.benchmarks));
    std::shared_ptr<Backend> ensembler;
    if (cfg.ensembler_backend) {
      ensembler = wrap(make_backend(*cfg.ensembler_backend, cfg, run_.ensembler_script, run_.benchmarks));
    }

    auto manifest = detail::manifest(run_, command_, backend->id(), ensembler ? ensembler->id() : backend->id(), budget_limit);
    manifest["status"] = "running";
    util::write_file(cfg.out / "manifest.json", manifest.dump(2) + "\n");

    auto filters = nlohmann::json::array();
    for (const auto& b : run_.benchmarks) filters.push_back(b.filter.to_json());
    util::write_file(cfg.out / "filter_reports.json", filters.dump(2) + "\n");

    RecordStore store(cfg.out / "records.jsonl");
    auto cache = std::make_shared<BaselineCache>();
    const auto cache_path = cfg.out / "y0_cache.jsonl";
    load_baseline_cache(*cache, cache_path);
    std::mutex cache_file_mutex;

    GridOptions options;
    options.task_parallelism = cfg.task_parallelism;
    options.errored = cfg.skip_errored ? ErroredPolicy::Exclude : ErroredPolicy::CountIncorrect;
    options.should_stop = [this] { return ctx_.stop != nullptr && ctx_.stop->load(); };
    options.lookup = [&](const Task& task, const std::string& label) {
      return store.completed(std::string(benchmark_id(task.benchmark)), label, cfg.resolution, task.id);
    };
    options.sink = [&](const RunRecord& r) {
      append_baseline_cache(*cache, cache_path, cache_file_mutex);
      store.append(r);
    };

    int status = kExitOk;
    std::vector<AblationCell> cells;
    std::vector<MetricSeries> series;
    try {
      for (const auto& lb : run_.benchmarks) {
        ProtocolConfig pc;
        pc.max_iterations = cfg.max_iterations;
        pc.resolution = cfg.resolution;
        pc.params = cfg.params;
        pc.reference_pattern = run_.heart_pattern;
        pc.carry_previous_on_all_fail = cfg.carry_previous_on_all_fail;
        pc.parallelism = cfg.parallelism;
        pc.verifier.numeric_relative_tolerance = cfg.numeric_tolerance;
        pc.default_system_instruction = lb.system_instruction;
        Engine engine(run_.bank, run_.baselines, backend, pc, ensembler, cache);

        for (const auto& strategy : run_.strategies) {
          auto records = run_strategy(engine, lb.tasks, strategy, options);
          if (!records.empty()) series.push_back(build_series(records, cfg.max_iterations, options.errored));
        }
        if (!grid_specs.empty()) {
          auto bench_cells = ablation_grid(grid_specs, lb.tasks, engine, run_.heart_pattern, options);
          cells.insert(cells.end(), bench_cells.begin(), bench_cells.end());
        }
        if (stopped()) break;
      }
    } catch (const BudgetExceeded& e) {
      ctx_.err << "error: " << e.what() << "\n";
      status = kExitBudgetExhausted;
    }
    append_baseline_cache(*cache, cache_path, cache_file_mutex);
    store.finalize();
    if (status == kExitOk && stopped()) status = kExitInterrupted;

    if (status == kExitOk) {
      const auto reports = cfg.out / "reports";
      if (!series.empty()) {
        check_shared_baseline(series);
        sort_series(series);
        detail::write_metric_reports(series, reports);
        ctx_.out << render_series(series, ReportFormat::Markdown);
      }
      if (!cells.empty()) {
        emit_report(cells, ReportFormat::Csv, reports / "ablation.csv");
        emit_report(cells, ReportFormat::Jsonl, reports / "ablation.jsonl");
        emit_report(cells, ReportFormat::Markdown, reports / "ablation.md");
        ctx_.out << render_cells(cells, ReportFormat::Markdown);
      }
      for (const auto& c : cells) {
        if (c.error) ctx_.err << "warning: grid spec '" << c.pattern_spec << "': " << *c.error << "\n";
      }
      const auto all = store.all();
      std::size_t errored = 0;
      for (const auto& r : all) errored += r.errored ? 1 : 0;
      if (!all.empty() && static_cast<double>(errored) > cfg.error_threshold * static_cast<double>(all.size())) {
        ctx_.err << "error: " << errored << " of " << all.size() << " runs errored (threshold "
                 << detail::percent(cfg.error_threshold) << "%)\n";
        status = kExitErrorThreshold;
      }
    }

    manifest["status"] = status == kExitOk ? "complete" : status == kExitInterrupted ? "interrupted" : "failed";
    manifest["exit_code"] = status;
    manifest["requests_issued"] = budget->used();
    util::write_file(cfg.out / "manifest.json", manifest.dump(2) + "\n");
    return status;
  }

private:
  [[nodiscard]] bool stopped() const { return ctx_.stop != nullptr && ctx_.stop->load(); }

  void check_shared_baseline(const std::vector<MetricSeries>& series) const {
    std::map<std::string, double> t0;
    for (const auto& s : series) {
      if (s.points.empty()) continue;
      auto [it, inserted] = t0.emplace(s.benchmark, s.points.front().cumulative_accuracy);
      if (!inserted && it->second != s.points.front().cumulative_accuracy) {
        ctx_.err << "warning: t=0 accuracy differs across strategies on " << s.benchmark << "\n";
      }
    }
  }

  PreparedRun run_;
  CommandContext& ctx_;
  std::string command_;
};

namespace detail {

template <typename Fn>
int guarded(CommandContext& ctx, Fn&& fn) {
  try {
    return fn();
  } catch (const BudgetExceeded& e) {
    ctx.err << "error: " << e.what() << "\n";
    return kExitBudgetExhausted;
  } catch (const Error& e) {
    ctx.err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const fs::filesystem_error& e) {
    ctx.err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  }
}

}  // namespace detail

inline int cmd_run(const RunConfig& config, CommandContext& ctx) {
  return detail::guarded(ctx, [&] {
    auto run = prepare_run(config);
    Session session(std::move(run), ctx, "run");
    return session.execute({});
  });
}

inline int cmd_ablate(const RunConfig& config, CommandContext& ctx) {
  return detail::guarded(ctx, [&] {
    if (!config.grid) throw ConfigError("ablate needs a grid file (--grid or config key 'grid')");
    const auto grid = parse_grid_file(util::read_file(*config.grid));
    for (const auto& w : grid.warnings) ctx.err << "warning: " << w << "\n";
    auto run = prepare_run(config, false);
    Session session(std::move(run), ctx, "ablate");
    return session.execute(grid.specs);
  });
}

/// Recomputes metric reports from an existing records file.
inline int cmd_report(const fs::path& records_path, const fs::path& out_dir, int max_iterations, bool skip_errored,
                      CommandContext& ctx) {
  return detail::guarded(ctx, [&] {
    if (!fs::exists(records_path)) throw ConfigError("records file not found: " + records_path.string());
    RecordStore store(records_path);
    const auto records = store.all();
    if (records.empty()) throw MetricError("no run records in " + records_path.string());
    const auto series =
        build_all_series(records, max_iterations, skip_errored ? ErroredPolicy::Exclude : ErroredPolicy::CountIncorrect);
    detail::write_metric_reports(series, out_dir);
    ctx.out << render_series(series, ReportFormat::Markdown);
    return static_cast<int>(kExitOk);
  });
}

struct ValidateInputs {
  std::optional<fs::path> bank;
  std::optional<fs::path> baselines;
  std::vector<std::pair<Benchmark, fs::path>> datasets;
  std::vector<fs::path> pattern_files;
  std::vector<std::string> patterns;
  std::optional<fs::path> script;
};

/// Checks each input and prints one line per item. Exit 0 iff all pass.
inline int cmd_validate(const ValidateInputs& in, CommandContext& ctx) {
  int failures = 0;
  auto check = [&](const std::string& item, auto&& fn) {
    try {
      const std::string detail = fn();
      ctx.out << "ok    " << item << (detail.empty() ? "" : ": " + detail) << "\n";
    } catch (const InvalidEmotionCode& e) {
      ++failures;
      ctx.out << "FAIL  " << item << ": InvalidEmotionCode: " << e.what() << "\n";
    } catch (const BankInvariantError& e) {
      ++failures;
      ctx.out << "FAIL  " << item << ": BankInvariantError: " << e.what() << "\n";
    } catch (const DuplicateIdError& e) {
      ++failures;
      ctx.out << "FAIL  " << item << ": DuplicateIdError: " << e.what() << "\n";
    } catch (const RecordError& e) {
      ++failures;
      ctx.out << "FAIL  " << item << ": RecordError: " << e.what() << "\n";
    } catch (const Error& e) {
      ++failures;
      ctx.out << "FAIL  " << item << ": " << e.what() << "\n";
    }
  };

  if (in.bank) {
    check("bank " + in.bank->string(), [&] {
      const auto bank = load_bank(*in.bank);
      return std::to_string(bank.cues().size()) + " cues, " + bank.hash();
    });
  }
  if (in.baselines) {
    check("baselines " + in.baselines->string(), [&] { return load_baselines(*in.baselines).hash(); });
  }
  for (const auto& [bench, path] : in.datasets) {
    check("dataset " + path.string(), [&, bench = bench, path = path] {
      FilterReport report;
      const auto tasks = load_tasks(path, bench, FieldMapping{}, &report);
      return std::to_string(tasks.size()) + " tasks, " + std::to_string(report.filtered_image) + " filtered";
    });
  }
  for (const auto& file : in.pattern_files) {
    std::string content;
    try {
      content = util::read_file(file);
    } catch (const IoError& e) {
      ++failures;
      ctx.out << "FAIL  patterns " << file.string() << ": " << e.what() << "\n";
      continue;
    }
    for (const auto& line : util::nonblank_lines(content)) {
      if (line.text.front() == '#') continue;
      check(file.string() + ":" + std::to_string(line.number) + " '" + line.text + "'", [&] {
        const auto s = parse_strategy(line.text, default_heart_pattern(), 4);
        return s.kind == StrategyKind::Heart ? render_pattern(s.pattern) : std::string();
      });
    }
  }
  for (const auto& p : in.patterns) {
    check("pattern '" + p + "'", [&] { return render_pattern(parse_pattern(p)); });
  }
  if (in.script) {
    check("script " + in.script->string(), [&] { return std::to_string(load_script(*in.script).size()) + " entries"; });
  }
  ctx.out << (failures == 0 ? "validation passed" : "validation failed: " + std::to_string(failures) + " item(s)") << "\n";
  return failures == 0 ? kExitOk : kExitValidationFailed;
}

}  // namespace heart
