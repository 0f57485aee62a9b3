// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "heart/evalreport.hpp"
#include "heart/runner.hpp"
#include "heart/stochastic_backend.hpp"
#include "../test_support.hpp"

using namespace heart;
namespace ht = heart::testing;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Verdict state_machine() {
  const auto start = std::chrono::steady_clock::now();
  ht::ScriptBuilder b;
  b.wrong_everywhere("T1", 4).at("T1", 3, "happy-4", ht::boxed("4"));
  auto backend = std::make_shared<ScriptedBackend>(b.script);
  Engine engine(ht::default_bank(), ht::default_baselines(), backend, ht::s1_config());
  const auto rec = engine.run(ht::make_task("T1"), Strategy::heart(default_heart_pattern()));
  const double elapsed = seconds_since(start);

  nlohmann::json got;
  got["task_id"] = rec.task_id;
  got["strategy"] = rec.strategy;
  got["resolution"] = std::string(resolution_id(rec.resolution));
  got["baseline_correct"] = rec.baseline_correct;
  got["iterations"] = nlohmann::json::array();
  for (const auto& it : rec.iterations) {
    nlohmann::json ij;
    ij["t"] = it.t;
    ij["group"] = it.group;
    ij["prompt_ids"] = nlohmann::json::array();
    for (const auto& c : it.candidates) ij["prompt_ids"].push_back(c.prompt_id);
    ij["resolved_index"] = it.resolved_index ? nlohmann::json(*it.resolved_index) : nlohmann::json(nullptr);
    ij["resolved_correct"] = it.resolved_correct.value_or(false);
    ij["resolved_by"] = it.resolved_by;
    got["iterations"].push_back(ij);
  }
  got["first_correct_iteration"] = rec.first_correct_iteration ? nlohmann::json(*rec.first_correct_iteration) : nlohmann::json(nullptr);
  got["final_correct"] = rec.final_correct;
  got["request_count"] = rec.request_count;

  const auto golden = nlohmann::json::parse(util::read_file(ht::golden_dir() / "state_machine_t3.json"));
  bool no_t4 = true;
  for (const auto& r : backend->requests()) no_t4 = no_t4 && r.tags.iteration < 4;
  const bool ok = got == golden && rec.iterations.size() == 3 && no_t4 && elapsed < 1.0;
  return {ok, std::to_string(rec.iterations.size()) + " iteration records, golden " + (got == golden ? "match" : "MISMATCH") +
                  ", no t=4 request: " + (no_t4 ? "yes" : "no") + fmt(", %.3fs", elapsed)};
}

Verdict budget_parity() {
  std::mt19937_64 rng(2024);
  std::size_t violations = 0, iterations_checked = 0;
  for (int task = 0; task < 100; ++task) {
    SchedulePattern ref;
    for (int t = 0; t < 4; ++t) {
      // singletons and pairs, as in the schedule tables
      std::vector<Emotion> order(kAllEmotions.begin(), kAllEmotions.end());
      std::shuffle(order.begin(), order.end(), rng);
      ref.groups.emplace_back(std::vector<Emotion>(order.begin(), order.begin() + 1 + static_cast<long>(rng() % 2)));
    }
    const std::string id = "R" + std::to_string(task);
    ht::ScriptBuilder b;
    b.wrong_everywhere(id, 4);
    ProtocolConfig cfg = ht::s1_config();
    cfg.reference_pattern = ref;
    Engine engine(ht::default_bank(), ht::default_baselines(), std::make_shared<ScriptedBackend>(b.script), cfg);
    for (const auto& s : {Strategy::heart(ref), Strategy::wait(), Strategy::cot(), Strategy::self_reflection()}) {
      const auto rec = engine.run(ht::make_task(id), s);
      for (const auto& it : rec.iterations) {
        ++iterations_checked;
        const auto pool = kCuesPerEmotion * ref.groups[static_cast<std::size_t>(it.t - 1)].size();
        if (it.candidates.size() != pool) ++violations;
      }
    }
  }
  return {violations == 0 && iterations_checked == 1600,
          std::to_string(iterations_checked) + " iterations checked, " + std::to_string(violations) + " violations"};
}

Verdict schedule_correctness() {
  const auto grid = parse_grid_file(util::read_file(ht::data_dir() / "patterns" / "appendix_grid.txt"));
  std::size_t patterns = 0, failures = 0;
  for (const auto& spec : grid.specs) {
    try {
      const auto s = parse_strategy(spec, default_heart_pattern(), 4);
      if (s.kind != StrategyKind::Heart) continue;
      ++patterns;
      const auto rendered = render_pattern(s.pattern);
      if (parse_pattern(rendered) != s.pattern || render_pattern(parse_pattern(rendered)) != rendered) ++failures;
    } catch (const Error&) {
      ++failures;
    }
  }
  const auto p = default_heart_pattern().polarities();
  bool alternates = p.size() == 4 && p[0] == Polarity::Positive;
  for (std::size_t i = 1; i < p.size(); ++i) {
    alternates = alternates && p[i] != Polarity::Mixed && p[i] != p[i - 1];
  }
  return {failures == 0 && patterns >= 30 && alternates,
          std::to_string(patterns) + " schedule specs round-tripped, " + std::to_string(failures) +
              " failures, default alternates: " + (alternates ? "yes" : "no")};
}

Verdict oracle_semantics() {
  std::mt19937_64 rng(99);
  std::size_t violations = 0;
  const int cases = 10000;
  for (int c = 0; c < cases; ++c) {
    const int gold = static_cast<int>(rng() % 6);
    const auto n = 1 + rng() % 12;
    std::vector<std::optional<std::string>> extracted;
    std::optional<std::size_t> expected;
    for (std::size_t i = 0; i < n; ++i) {
      const auto kind = rng() % 5;
      if (kind == 0) {
        extracted.emplace_back(std::nullopt);
        continue;
      }
      const int v = static_cast<int>(rng() % 6);
      // equivalent spellings of the same integer
      const std::string text = kind == 1   ? std::to_string(v)
                               : kind == 2 ? std::to_string(v) + ".0"
                               : kind == 3 ? "\\frac{" + std::to_string(2 * v) + "}{2}"
                                           : "$" + std::to_string(v) + "$";
      extracted.emplace_back(text);
      if (v == gold && !expected) expected = i;
    }
    const auto sel = oracle_select(extracted, std::to_string(gold), AnswerType::Numerical);
    const bool ok = sel.halt == expected.has_value() && sel.index == expected.value_or(0) &&
                    sel.verdicts.size() == extracted.size();
    violations += ok ? 0 : 1;
  }
  return {violations == 0, std::to_string(cases) + " candidate sets, " + std::to_string(violations) + " violations"};
}

Verdict split_reproduction() {
  struct Row {
    std::size_t total, validation, test;
  };
  const std::vector<Row> rows = {{4326, 865, 3461}, {2160, 432, 1728}, {236, 47, 189}, {674, 134, 540}};
  std::string detail;
  bool ok = true;
  for (const auto& r : rows) {
    std::vector<Task> tasks(r.total);
    for (std::size_t i = 0; i < r.total; ++i) tasks[i].id = std::to_string(i);
    const auto s = split(tasks, SplitSpec{0.2, 0});
    const bool row_ok = s.validation.size() == r.validation && s.test.size() == r.test;
    ok = ok && row_ok;
    detail += (detail.empty() ? "" : ", ") + std::to_string(r.total) + "->(" + std::to_string(s.validation.size()) + "," +
              std::to_string(s.test.size()) + ")";
  }
  return {ok, detail};
}

Verdict verifier_normalization() {
  struct Case {
    std::string a, b;
    AnswerType type;
  };
  const std::vector<Case> cases = {{"\\frac{567}{4}", "567/4", AnswerType::Numerical},
                                   {"567/4", "141.75", AnswerType::Numerical},
                                   {"\\frac{567}{4}", "141.75", AnswerType::Numerical},
                                   {"\\sqrt{15}", "sqrt(15)", AnswerType::Expression}};
  std::size_t ok = 0;
  for (const auto& c : cases) {
    ok += exact_match(c.a, c.b, c.type).correct && exact_match(c.b, c.a, c.type).correct ? 1 : 0;
  }
  const std::string worked =
      "<question>What is the sum of the digits of (10^3+1)^2?</question> Expanding, (1000+1)^2 = 1000000 + 2000 + 1 = "
      "1002001. Its digits add up to 1 + 0 + 0 + 2 + 0 + 0 + 1 = 4. The final answer is $\\boxed{4}$.";
  const auto got = extract_answer(worked, AnswerType::Numerical);
  const bool pass = ok == cases.size() && got == "4";
  return {pass, std::to_string(ok) + "/" + std::to_string(cases.size()) + " equivalences, worked example extracts '" +
                    got.value_or("<none>") + "'"};
}

Verdict cumulative_semantics() {
  std::mt19937_64 rng(7);
  std::size_t non_monotone = 0;
  const int runs = 1000;
  for (int run = 0; run < runs; ++run) {
    ht::ScriptBuilder b;
    std::vector<Task> tasks;
    for (int k = 0; k < 4; ++k) {
      const std::string id = "M" + std::to_string(run) + "-" + std::to_string(k);
      b.wrong_everywhere(id, 4);
      const auto t = static_cast<int>(rng() % 6);
      if (t == 0) b.at(id, 0, "init", ht::boxed("4"));
      if (t >= 1 && t <= 4) b.at(id, t, "wait#" + std::to_string(1 + rng() % 10), ht::boxed("4"));
      tasks.push_back(ht::make_task(id));
    }
    Engine engine(ht::default_bank(), ht::default_baselines(), std::make_shared<ScriptedBackend>(b.script), ht::s1_config());
    const auto series = build_series(run_strategy(engine, tasks, Strategy::wait()), 4);
    for (std::size_t t = 1; t < series.points.size(); ++t) {
      if (series.points[t].cumulative_accuracy < series.points[t - 1].cumulative_accuracy) {
        ++non_monotone;
        break;
      }
    }
  }
  // fixture: solved at t=0, at t=2 (twice), never
  ht::ScriptBuilder b;
  std::vector<Task> tasks;
  for (const char* id : {"F1", "F2", "F3", "F4"}) {
    b.wrong_everywhere(id, 4);
    tasks.push_back(ht::make_task(id));
  }
  b.at("F1", 0, "init", ht::boxed("4")).at("F2", 2, "sadness-2", ht::boxed("4")).at("F3", 2, "anger-5", ht::boxed("4"));
  Engine engine(ht::default_bank(), ht::default_baselines(), std::make_shared<ScriptedBackend>(b.script), ht::s1_config());
  const auto s = build_series(run_strategy(engine, tasks, Strategy::heart(default_heart_pattern())), 4);
  std::vector<double> got;
  for (const auto& p : s.points) got.push_back(p.cumulative_accuracy);
  const bool fixture_ok = got == std::vector<double>{0.25, 0.25, 0.75, 0.75, 0.75};
  std::string fixture = "[";
  for (std::size_t i = 0; i < got.size(); ++i) fixture += (i ? ", " : "") + fmt("%.2f", got[i]);
  fixture += "]";
  return {non_monotone == 0 && fixture_ok,
          std::to_string(runs) + " runs, " + std::to_string(non_monotone) + " non-monotone, fixture " + fixture};
}

Verdict s2_isolation() {
  const auto script = load_script(ht::data_dir() / "samples" / "script.jsonl");
  std::vector<Task> tasks;
  for (const auto& [file, bench, preset] :
       std::vector<std::tuple<std::string, Benchmark, std::string>>{{"olympiad_math", Benchmark::OlympiadMath, "documented"},
                                                                    {"olympiad_physics", Benchmark::OlympiadPhysics, "documented"},
                                                                    {"hle", Benchmark::HLE, "hle"},
                                                                    {"simpleqa", Benchmark::SimpleQA, "simpleqa"}}) {
    auto loaded = load_tasks(ht::data_dir() / "samples" / (file + ".jsonl"), bench, FieldMapping::preset(preset));
    tasks.insert(tasks.end(), loaded.begin(), loaded.end());
  }
  auto cfg = ht::s1_config();
  cfg.resolution = Resolution::S2Synthesis;
  auto resolved = [&](bool poison, std::shared_ptr<ScriptedBackend>& backend) {
    backend = std::make_shared<ScriptedBackend>(script);
    Engine engine(ht::default_bank(), ht::default_baselines(), backend, cfg);
    std::string all;
    for (auto task : tasks) {
      if (poison) task.gold = "POISON-" + task.id;
      for (const auto& s : {Strategy::heart(default_heart_pattern()), Strategy::wait()}) {
        const auto rec = engine.run(task, s);
        all += rec.baseline_answer + '\x1e';
        for (const auto& it : rec.iterations) all += it.resolved_text + '\x1f';
      }
    }
    return all;
  };
  std::shared_ptr<ScriptedBackend> clean_backend, poisoned_backend;
  const auto clean = resolved(false, clean_backend);
  const auto poisoned = resolved(true, poisoned_backend);
  bool leaked = false;
  for (const auto& r : poisoned_backend->requests()) {
    for (const auto& m : r.messages) leaked = leaked || m.content.find("POISON-") != std::string::npos;
    for (const auto& [k, v] : r.tags.extra) leaked = leaked || v.find("POISON-") != std::string::npos;
  }
  const bool same = clean == poisoned;
  return {same && !leaked && !clean.empty(),
          std::string("resolved texts ") + (same ? "byte-identical" : "DIFFER") + " over " + std::to_string(tasks.size()) +
              " tasks x 2 strategies, poisoned gold in requests: " + (leaked ? "yes" : "no")};
}

Verdict replay_determinism() {
  ht::TempDir a("acc-a"), b("acc-b"), ga("acc-ga"), gb("acc-gb");
  std::ostringstream sink;
  CommandContext ctx{sink, sink, nullptr, {}};
  auto cfg = load_run_config(ht::source_dir() / "configs" / "sample_run.json");
  auto run_into = [&](const fs::path& out, bool ablate) {
    auto c = cfg;
    c.out = out;
    if (ablate) c.grid = ht::data_dir() / "patterns" / "appendix_grid.txt";
    const auto start = std::chrono::steady_clock::now();
    const int code = ablate ? cmd_ablate(c, ctx) : cmd_run(c, ctx);
    return std::make_pair(code, seconds_since(start));
  };
  const auto ra = run_into(a.path(), false);
  const auto rb = run_into(b.path(), false);
  const auto gra = run_into(ga.path(), true);
  const auto grb = run_into(gb.path(), true);
  bool same = true;
  for (const char* f : {"records.jsonl", "reports/metrics.csv", "reports/metrics.jsonl", "reports/metrics.md"}) {
    same = same && util::read_file(a / f) == util::read_file(b / f);
  }
  for (const char* f : {"records.jsonl", "reports/ablation.csv", "reports/ablation.jsonl", "reports/ablation.md"}) {
    same = same && util::read_file(ga / f) == util::read_file(gb / f);
  }
  const bool codes = ra.first == 0 && rb.first == 0 && gra.first == 0 && grb.first == 0;
  const double slowest = std::max({ra.second, rb.second, gra.second, grb.second});
  return {codes && same && slowest < 10.0,
          std::string("records and reports ") + (same ? "byte-identical" : "DIFFER") +
              fmt(", run %.2fs, appendix grid (%.0f specs) %.2fs", ra.second,
                  static_cast<double>(parse_grid_file(util::read_file(ht::data_dir() / "patterns" / "appendix_grid.txt")).specs.size()),
                  gra.second)};
}

Verdict stochastic_sanity() {
  AlternationRespondent m;  // p_initial 0.2, p_base 0.05, switch_bonus 0.1
  const auto pool = static_cast<double>(2 * kCuesPerEmotion);
  // closed form, fixed before simulating: the run fails only if y0 and every
  // candidate of every iteration miss; the alternating schedule earns the
  // bonus at t = 2, 3, 4.
  const double fail_heart = (1 - m.p_initial) * std::pow(1 - m.p_base, pool) * std::pow(1 - m.p_base - m.switch_bonus, 3 * pool);
  const double fail_static = (1 - m.p_initial) * std::pow(1 - m.p_base, 4 * pool);
  const double expect_heart = 1 - fail_heart, expect_static = 1 - fail_static;

  const std::size_t n = 10000;
  std::vector<Task> tasks;
  std::map<std::string, GoldAnswer, std::less<>> answers;
  for (std::size_t i = 0; i < n; ++i) {
    tasks.push_back(ht::make_task("S" + std::to_string(i), std::to_string(i % 89)));
    answers.emplace(tasks.back().id, GoldAnswer{tasks.back().gold, AnswerType::Numerical});
  }
  auto backend = std::make_shared<StochasticBackend>(m, 20240917, answers);
  auto cfg = ht::s1_config();
  cfg.parallelism = 1;
  Engine engine(ht::default_bank(), ht::default_baselines(), backend, cfg);
  GridOptions opts;
  opts.task_parallelism = 4;
  const double heart = final_accuracy(run_strategy(engine, tasks, Strategy::heart(default_heart_pattern()), opts));
  const double stat = final_accuracy(run_strategy(engine, tasks, Strategy::heart(parse_pattern("hsur->hsur->hsur->hsur"), "static"), opts));
  const double margin = heart - stat, expect_margin = expect_heart - expect_static;
  const bool ok = std::abs(heart - expect_heart) <= 0.01 && std::abs(stat - expect_static) <= 0.01 &&
                  std::abs(margin - expect_margin) <= 0.01 && margin > 0;
  return {ok, fmt("heart %.4f (expected %.4f), static %.4f (expected %.4f)", heart, expect_heart, stat, expect_static) +
                  fmt(", margin %.4f vs %.4f", margin, expect_margin)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"protocol state machine", state_machine},
      {"budget parity", budget_parity},
      {"schedule correctness", schedule_correctness},
      {"oracle semantics", oracle_semantics},
      {"split reproduction", split_reproduction},
      {"verifier normalization", verifier_normalization},
      {"cumulative accuracy", cumulative_semantics},
      {"S2 isolation", s2_isolation},
      {"replay determinism", replay_determinism},
      {"stochastic respondent sanity", stochastic_sanity},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << criteria[i].first << ": " << v.detail << std::endl;
  }
  return failures;
}
