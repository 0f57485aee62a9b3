#pragma once

// Metrics over run records, pattern-grid ablations and report emitters.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "heart/error.hpp"
#include "heart/protocol.hpp"
#include "heart/util.hpp"

namespace heart {

enum class ErroredPolicy { CountIncorrect, Exclude };

namespace detail {

inline std::vector<const RunRecord*> scored(const std::vector<RunRecord>& records, ErroredPolicy policy) {
  if (records.empty()) throw MetricError("no run records");
  std::vector<const RunRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (r.errored && policy == ErroredPolicy::Exclude) continue;
    out.push_back(&r);
  }
  if (out.empty()) throw MetricError("every run record errored and errored runs are excluded");
  return out;
}

/// Whether task `r` counts as solved at iteration t.
inline bool solved_at(const RunRecord& r, int t) {
  if (r.errored) return false;
  if (r.resolution == Resolution::S1Oracle) return r.first_correct_iteration && *r.first_correct_iteration <= t;
  if (t == 0) return r.baseline_correct;
  // S2: the resolved answer at t; a run that stopped early carries its last answer.
  if (r.iterations.empty()) return r.baseline_correct;
  const auto idx = std::min<std::size_t>(static_cast<std::size_t>(t), r.iterations.size()) - 1;
  return r.iterations[idx].resolved_correct.value_or(false);
}

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

}  // namespace detail

/// S1: fraction of tasks with first_correct_iteration <= t. S2: fraction
/// whose resolved answer at iteration t is correct under post-hoc scoring.
inline double cumulative_accuracy(const std::vector<RunRecord>& records, int t,
                                  ErroredPolicy policy = ErroredPolicy::CountIncorrect) {
  if (t < 0) throw MetricError("iteration must be >= 0");
  const auto rs = detail::scored(records, policy);
  std::size_t hits = 0;
  for (const auto* r : rs) hits += detail::solved_at(*r, t) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(rs.size());
}

inline double final_accuracy(const std::vector<RunRecord>& records,
                             ErroredPolicy policy = ErroredPolicy::CountIncorrect) {
  const auto rs = detail::scored(records, policy);
  std::size_t hits = 0;
  for (const auto* r : rs) hits += (r->final_correct && !r->errored) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(rs.size());
}

struct MetricPoint {
  int t = 0;
  double cumulative_accuracy = 0.0;
};

struct MetricSeries {
  std::string strategy;
  std::string benchmark;
  Resolution resolution = Resolution::S1Oracle;
  std::vector<MetricPoint> points;
  double final_accuracy = 0.0;
  std::size_t n_tasks = 0;
  std::size_t n_errored = 0;
};

/// One series for records sharing strategy, benchmark and resolution.
inline MetricSeries build_series(const std::vector<RunRecord>& records, int max_iterations,
                                 ErroredPolicy policy = ErroredPolicy::CountIncorrect) {
  if (records.empty()) throw MetricError("no run records");
  MetricSeries s;
  s.strategy = records.front().strategy;
  s.benchmark = records.front().benchmark;
  s.resolution = records.front().resolution;
  for (const auto& r : records) {
    if (r.strategy != s.strategy || r.benchmark != s.benchmark || r.resolution != s.resolution) {
      throw MetricError("series records must share strategy, benchmark and resolution");
    }
    s.n_errored += r.errored ? 1 : 0;
  }
  for (int t = 0; t <= max_iterations; ++t) s.points.push_back({t, cumulative_accuracy(records, t, policy)});
  s.final_accuracy = final_accuracy(records, policy);
  s.n_tasks = detail::scored(records, policy).size();
  return s;
}

namespace detail {
inline int benchmark_rank(const std::string& id) {
  try {
    return static_cast<int>(parse_benchmark(id));
  } catch (const ConfigError&) {
    return 99;
  }
}
}  // namespace detail

/// Canonical report order: benchmark, then strategy label, then resolution.
inline void sort_series(std::vector<MetricSeries>& series) {
  std::stable_sort(series.begin(), series.end(), [](const MetricSeries& a, const MetricSeries& b) {
    return std::make_tuple(detail::benchmark_rank(a.benchmark), a.benchmark, a.strategy, a.resolution) <
           std::make_tuple(detail::benchmark_rank(b.benchmark), b.benchmark, b.strategy, b.resolution);
  });
}

/// Groups records by (strategy, benchmark, resolution) and builds one series
/// per group, in canonical report order.
inline std::vector<MetricSeries> build_all_series(const std::vector<RunRecord>& records, int max_iterations,
                                                  ErroredPolicy policy = ErroredPolicy::CountIncorrect) {
  if (records.empty()) throw MetricError("no run records");
  std::map<std::tuple<std::string, std::string, Resolution>, std::vector<RunRecord>> groups;
  for (const auto& r : records) groups[std::make_tuple(r.strategy, r.benchmark, r.resolution)].push_back(r);
  std::vector<MetricSeries> out;
  for (const auto& [key, group] : groups) out.push_back(build_series(group, max_iterations, policy));
  sort_series(out);
  return out;
}

// ---------------------------------------------------------------------------
// Ablation grids

struct AblationCell {
  std::string pattern_spec;
  std::string benchmark;
  double final_accuracy = 0.0;
  std::size_t n_tasks = 0;
  std::optional<std::string> error;
};

struct PreparedGrid {
  std::vector<std::string> specs;
  std::vector<std::string> warnings;
};

/// Trims specs, drops blanks and '#' comments, and removes duplicates
/// (first occurrence wins) with a warning per duplicate.
inline PreparedGrid prepare_grid(const std::vector<std::string>& raw) {
  PreparedGrid out;
  std::set<std::string> seen;
  for (const auto& r : raw) {
    const std::string spec(util::trim(r));
    if (spec.empty() || spec.front() == '#') continue;
    if (!seen.insert(spec).second) {
      out.warnings.push_back("duplicate grid spec '" + spec + "' ignored");
      continue;
    }
    out.specs.push_back(spec);
  }
  return out;
}

inline PreparedGrid parse_grid_file(std::string_view content) {
  std::vector<std::string> raw;
  for (const auto& line : util::nonblank_lines(content)) raw.push_back(line.text);
  auto grid = prepare_grid(raw);
  if (grid.specs.empty()) throw ConfigError("grid file contains no pattern specs");
  return grid;
}

struct GridOptions {
  std::size_t task_parallelism = 1;
  ErroredPolicy errored = ErroredPolicy::CountIncorrect;
  /// Returns a stored record for (task, strategy label) to skip re-running it.
  std::function<std::optional<RunRecord>(const Task&, const std::string&)> lookup;
  /// Called with every freshly produced record; must be thread-safe.
  std::function<void(const RunRecord&)> sink;
  /// Polled between tasks; returning true stops scheduling new work.
  std::function<bool()> should_stop;
};

/// Runs `strategy` over `tasks` with task-level parallelism; records come
/// back in task order. Tasks skipped after a stop request are absent.
inline std::vector<RunRecord> run_strategy(const Engine& engine, const std::vector<Task>& tasks,
                                           const Strategy& strategy, const GridOptions& options = {}) {
  std::vector<std::optional<RunRecord>> slots(tasks.size());
  util::parallel_for(tasks.size(), options.task_parallelism, [&](std::size_t i) {
    if (options.should_stop && options.should_stop()) return;
    if (options.lookup) {
      if (auto stored = options.lookup(tasks[i], strategy.label)) {
        slots[i] = std::move(stored);
        return;
      }
    }
    auto record = engine.run(tasks[i], strategy);
    if (options.sink) options.sink(record);
    slots[i] = std::move(record);
  });
  std::vector<RunRecord> out;
  out.reserve(tasks.size());
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  return out;
}

/// Sorts cells by final accuracy, best first; ties keep input order and
/// error cells go last.
inline void sort_cells(std::vector<AblationCell>& cells) {
  std::stable_sort(cells.begin(), cells.end(), [](const AblationCell& a, const AblationCell& b) {
    if (a.error.has_value() != b.error.has_value()) return !a.error.has_value();
    return a.final_accuracy > b.final_accuracy;
  });
}

/// One cell per spec over one benchmark's tasks. Every strategy shares the
/// engine's t = 0 cache. Invalid specs become error cells.
inline std::vector<AblationCell> ablation_grid(const std::vector<std::string>& specs, const std::vector<Task>& tasks,
                                               const Engine& engine, const SchedulePattern& heart_pattern,
                                               const GridOptions& options = {},
                                               std::vector<RunRecord>* records_out = nullptr) {
  if (tasks.empty()) throw PreconditionError("ablation grid needs at least one task");
  const std::string benchmark(benchmark_id(tasks.front().benchmark));
  const auto static_length = static_cast<std::size_t>(std::max(engine.config().max_iterations, 1));
  std::vector<AblationCell> cells;
  for (const auto& spec : specs) {
    AblationCell cell;
    cell.pattern_spec = spec;
    cell.benchmark = benchmark;
    try {
      const auto strategy = parse_strategy(spec, heart_pattern, static_length);
      engine.check_strategy(strategy);
      auto records = run_strategy(engine, tasks, strategy, options);
      if (records.empty()) throw MetricError("no records produced");
      cell.final_accuracy = final_accuracy(records, options.errored);
      cell.n_tasks = detail::scored(records, options.errored).size();
      if (records_out) records_out->insert(records_out->end(), records.begin(), records.end());
    } catch (const BudgetExceeded&) {
      throw;
    } catch (const Error& e) {
      cell.error = e.what();
    }
    cells.push_back(std::move(cell));
  }
  sort_cells(cells);
  return cells;
}

// ---------------------------------------------------------------------------
// Emitters

enum class ReportFormat { Csv, Jsonl, Markdown };

inline ReportFormat parse_report_format(std::string_view s) {
  const auto key = util::to_lower(util::trim(s));
  if (key == "csv") return ReportFormat::Csv;
  if (key == "jsonl") return ReportFormat::Jsonl;
  if (key == "markdown" || key == "md" || key == "markdown-table") return ReportFormat::Markdown;
  throw ConfigError("unknown report format '" + std::string(s) + "'");
}

inline std::string render_series(const std::vector<MetricSeries>& series, ReportFormat format) {
  if (series.empty()) throw MetricError("no metric series to report");
  std::ostringstream out;
  switch (format) {
    case ReportFormat::Csv:
      out << "strategy,benchmark,t,cumulative_accuracy\n";
      for (const auto& s : series) {
        for (const auto& p : s.points) {
          out << '"' << util::replace_all(s.strategy, "\"", "\"\"") << "\"," << s.benchmark << ',' << p.t << ','
              << detail::percent(p.cumulative_accuracy) << '\n';
        }
      }
      break;
    case ReportFormat::Jsonl:
      for (const auto& s : series) {
        nlohmann::ordered_json j;
        j["strategy"] = s.strategy;
        j["benchmark"] = s.benchmark;
        j["resolution"] = std::string(resolution_id(s.resolution));
        auto points = nlohmann::ordered_json::array();
        for (const auto& p : s.points) points.push_back({{"t", p.t}, {"cumulative_accuracy", p.cumulative_accuracy}});
        j["points"] = std::move(points);
        j["final_accuracy"] = s.final_accuracy;
        j["n_tasks"] = s.n_tasks;
        j["n_errored"] = s.n_errored;
        out << j.dump() << '\n';
      }
      break;
    case ReportFormat::Markdown: {
      std::size_t width = 0;
      for (const auto& s : series) width = std::max(width, s.points.size());
      out << "| Strategy | Benchmark | Tasks |";
      for (std::size_t t = 0; t < width; ++t) out << " t=" << t << " |";
      out << " Final (%) |\n|---|---|---:|";
      for (std::size_t t = 0; t < width; ++t) out << "---:|";
      out << "---:|\n";
      for (const auto& s : series) {
        out << "| " << s.strategy << " | " << s.benchmark << " | " << s.n_tasks << " |";
        for (std::size_t t = 0; t < width; ++t) {
          out << ' ' << (t < s.points.size() ? detail::percent(s.points[t].cumulative_accuracy) : "") << " |";
        }
        out << ' ' << detail::percent(s.final_accuracy) << " |\n";
      }
      break;
    }
  }
  return out.str();
}

inline std::string render_cells(const std::vector<AblationCell>& cells, ReportFormat format) {
  if (cells.empty()) throw MetricError("no ablation cells to report");
  std::ostringstream out;
  switch (format) {
    case ReportFormat::Csv:
      out << "pattern_spec,benchmark,final_accuracy,n_tasks,error\n";
      for (const auto& c : cells) {
        out << '"' << util::replace_all(c.pattern_spec, "\"", "\"\"") << "\"," << c.benchmark << ','
            << (c.error ? "" : detail::percent(c.final_accuracy)) << ',' << c.n_tasks << ",\""
            << util::replace_all(c.error.value_or(""), "\"", "\"\"") << "\"\n";
      }
      break;
    case ReportFormat::Jsonl:
      for (const auto& c : cells) {
        nlohmann::ordered_json j;
        j["pattern_spec"] = c.pattern_spec;
        j["benchmark"] = c.benchmark;
        j["final_accuracy"] = c.error ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(c.final_accuracy);
        j["n_tasks"] = c.n_tasks;
        if (c.error) j["error"] = *c.error;
        out << j.dump() << '\n';
      }
      break;
    case ReportFormat::Markdown:
      out << "| Strategy | Benchmark | Final Accuracy (%) | Tasks |\n|---|---|---:|---:|\n";
      for (const auto& c : cells) {
        out << "| " << c.pattern_spec << " | " << c.benchmark << " | "
            << (c.error ? "error: " + *c.error : detail::percent(c.final_accuracy)) << " | " << c.n_tasks << " |\n";
      }
      break;
  }
  return out.str();
}

/// Two whitespace-separated columns (t, cumulative accuracy in percent).
inline std::string render_plot_data(const MetricSeries& s) {
  std::ostringstream out;
  out << "# " << s.strategy << ' ' << s.benchmark << '\n';
  for (const auto& p : s.points) out << p.t << ' ' << detail::percent(p.cumulative_accuracy) << '\n';
  return out.str();
}

inline void emit_report(const std::vector<MetricSeries>& series, ReportFormat format, const std::filesystem::path& path) {
  util::write_file(path, render_series(series, format));
}

inline void emit_report(const std::vector<AblationCell>& cells, ReportFormat format, const std::filesystem::path& path) {
  util::write_file(path, render_cells(cells, format));
}

/// File-name-safe rendering of a strategy label.
inline std::string slug(std::string_view label) {
  std::string out;
  for (unsigned char c : label) {
    if (std::isalnum(c) != 0) {
      out += static_cast<char>(std::tolower(c));
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "series" : out;
}

inline void emit_plot_data(const std::vector<MetricSeries>& series, const std::filesystem::path& dir) {
  if (series.empty()) throw MetricError("no metric series to plot");
  for (const auto& s : series) {
    util::write_file(dir / (slug(s.strategy) + "__" + s.benchmark + "__" + std::string(resolution_id(s.resolution)) +
                            ".dat"),
                     render_plot_data(s));
  }
}

}  // namespace heart
