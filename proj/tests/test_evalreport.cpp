#include <gtest/gtest.h>

#include <random>

#include "heart/evalreport.hpp"
#include "heart/scripted_backend.hpp"
#include "test_support.hpp"

using namespace heart;
using heart::testing::TempDir;

namespace {

RunRecord s1_record(const std::string& id, std::optional<int> first_correct, int n = 4,
                    const std::string& strategy = "heart", const std::string& bench = "olympiad_math") {
  RunRecord r;
  r.task_id = id;
  r.strategy = strategy;
  r.benchmark = bench;
  r.first_correct_iteration = first_correct;
  r.baseline_correct = first_correct == 0;
  r.final_correct = first_correct.has_value();
  const int last = first_correct ? *first_correct : n;
  for (int t = 1; t <= last; ++t) {
    IterationRecord it;
    it.t = t;
    it.resolved_correct = first_correct && t == *first_correct;
    r.iterations.push_back(it);
  }
  return r;
}

// Independent reference: count tasks whose first success is <= t.
double reference_cumulative(const std::vector<std::optional<int>>& firsts, int t) {
  int hits = 0;
  for (const auto& f : firsts) hits += (f && *f <= t) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(firsts.size());
}

}  // namespace

TEST(CumulativeAccuracy, FourTaskFixture) {
  const std::vector<RunRecord> recs = {s1_record("a", 0), s1_record("b", 2), s1_record("c", 2), s1_record("d", std::nullopt)};
  const std::vector<double> expected = {0.25, 0.25, 0.75, 0.75, 0.75};
  for (int t = 0; t <= 4; ++t) EXPECT_DOUBLE_EQ(cumulative_accuracy(recs, t), expected[static_cast<std::size_t>(t)]) << t;
  EXPECT_DOUBLE_EQ(final_accuracy(recs), 0.75);
  const auto s = build_series(recs, 4);
  EXPECT_EQ(s.points.size(), 5U);
  EXPECT_EQ(s.n_tasks, 4U);
}

TEST(CumulativeAccuracy, MonotoneAndFinalOnRandomRuns) {
  std::mt19937 rng(123);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 5);
    const auto count = 1 + rng() % 30;
    std::vector<RunRecord> recs;
    std::vector<std::optional<int>> firsts;
    for (std::size_t i = 0; i < count; ++i) {
      const auto draw = static_cast<int>(rng() % static_cast<unsigned>(n + 2));
      std::optional<int> f = draw <= n ? std::optional<int>(draw) : std::nullopt;
      firsts.push_back(f);
      recs.push_back(s1_record("t" + std::to_string(i), f, n));
    }
    double prev = -1.0;
    for (int t = 0; t <= n; ++t) {
      const double a = cumulative_accuracy(recs, t);
      ASSERT_DOUBLE_EQ(a, reference_cumulative(firsts, t));
      ASSERT_GE(a, prev);
      prev = a;
    }
    ASSERT_DOUBLE_EQ(cumulative_accuracy(recs, n), final_accuracy(recs));
  }
}

TEST(CumulativeAccuracy, ErroredPolicy) {
  auto recs = std::vector<RunRecord>{s1_record("a", 1), s1_record("b", std::nullopt)};
  RunRecord bad = s1_record("c", std::nullopt);
  bad.errored = true;
  recs.push_back(bad);
  EXPECT_DOUBLE_EQ(cumulative_accuracy(recs, 4), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(cumulative_accuracy(recs, 4, ErroredPolicy::Exclude), 0.5);
  const auto s = build_series(recs, 4, ErroredPolicy::Exclude);
  EXPECT_EQ(s.n_tasks, 2U);
  EXPECT_EQ(s.n_errored, 1U);
  EXPECT_THROW(cumulative_accuracy({bad}, 1, ErroredPolicy::Exclude), MetricError);
}

TEST(CumulativeAccuracy, EmptyAndMixedInputsAreErrors) {
  EXPECT_THROW(cumulative_accuracy({}, 0), MetricError);
  EXPECT_THROW(build_series({}, 4), MetricError);
  EXPECT_THROW(build_series({s1_record("a", 1), s1_record("b", 1, 4, "wait")}, 4), MetricError);
  EXPECT_THROW(cumulative_accuracy({s1_record("a", 1)}, -1), MetricError);
}

TEST(CumulativeAccuracy, SynthesisUsesResolvedAnswerAtT) {
  RunRecord r;
  r.task_id = "a";
  r.strategy = "heart";
  r.benchmark = "hle";
  r.resolution = Resolution::S2Synthesis;
  r.baseline_correct = false;
  for (int t = 1; t <= 4; ++t) {
    IterationRecord it;
    it.t = t;
    it.resolved_correct = t == 2;
    r.iterations.push_back(it);
  }
  r.first_correct_iteration = 2;
  r.final_correct = false;
  const std::vector<RunRecord> recs = {r};
  EXPECT_DOUBLE_EQ(cumulative_accuracy(recs, 1), 0.0);
  EXPECT_DOUBLE_EQ(cumulative_accuracy(recs, 2), 1.0);
  EXPECT_DOUBLE_EQ(cumulative_accuracy(recs, 3), 0.0);
  EXPECT_DOUBLE_EQ(final_accuracy(recs), 0.0);
}

TEST(Series, GroupedInCanonicalOrder) {
  const std::vector<RunRecord> recs = {s1_record("a", 1, 4, "wait", "hle"), s1_record("a", 1, 4, "heart", "hle"),
                                       s1_record("b", std::nullopt, 4, "wait", "hle"), s1_record("a", 0, 4, "wait", "simpleqa")};
  const auto all = build_all_series(recs, 4);
  ASSERT_EQ(all.size(), 3U);
  EXPECT_EQ(all[0].benchmark, "simpleqa");
  EXPECT_EQ(all[1].strategy, "heart");
  EXPECT_EQ(all[2].strategy, "wait");
  EXPECT_EQ(all[2].n_tasks, 2U);
}

TEST(Emit, CsvJsonlMarkdown) {
  const std::vector<RunRecord> recs = {s1_record("a", 0), s1_record("b", 2), s1_record("c", 2), s1_record("d", std::nullopt)};
  const std::vector<MetricSeries> series = {build_series(recs, 4)};
  const auto csv = render_series(series, ReportFormat::Csv);
  EXPECT_EQ(csv,
            "strategy,benchmark,t,cumulative_accuracy\n"
            "\"heart\",olympiad_math,0,25.00\n"
            "\"heart\",olympiad_math,1,25.00\n"
            "\"heart\",olympiad_math,2,75.00\n"
            "\"heart\",olympiad_math,3,75.00\n"
            "\"heart\",olympiad_math,4,75.00\n");
  const auto jsonl = render_series(series, ReportFormat::Jsonl);
  const auto j = nlohmann::json::parse(jsonl);
  EXPECT_DOUBLE_EQ(j["points"][2]["cumulative_accuracy"].get<double>(), 0.75);
  EXPECT_EQ(j["resolution"], "s1");
  const auto md = render_series(series, ReportFormat::Markdown);
  EXPECT_NE(md.find("| heart | olympiad_math | 4 | 25.00 | 25.00 | 75.00 | 75.00 | 75.00 | 75.00 |"), std::string::npos);
  EXPECT_EQ(parse_report_format("markdown-table"), ReportFormat::Markdown);
  EXPECT_THROW(parse_report_format("xml"), ConfigError);
}

TEST(Emit, FilesAndPlotData) {
  TempDir dir("emit");
  const std::vector<MetricSeries> series = {build_series({s1_record("a", 1, 4, "Self Reflection ID# 3")}, 4)};
  emit_report(series, ReportFormat::Csv, dir / "m.csv");
  EXPECT_EQ(util::read_file(dir / "m.csv"), render_series(series, ReportFormat::Csv));
  emit_plot_data(series, dir.path());
  const auto plot = util::read_file(dir / "self_reflection_id_3__olympiad_math__s1.dat");
  EXPECT_NE(plot.find("\n0 0.00\n1 100.00\n"), std::string::npos);
}

TEST(Emit, UnwritableDestinationIsAnIoError) {
  TempDir dir("emit-io");
  util::write_file(dir / "blocker", "x");
  const std::vector<MetricSeries> series = {build_series({s1_record("a", 1)}, 4)};
  EXPECT_THROW(emit_report(series, ReportFormat::Csv, dir / "blocker" / "m.csv"), IoError);
  EXPECT_THROW(render_series({}, ReportFormat::Csv), MetricError);
}

TEST(Grid, PrepareTrimsSkipsCommentsAndDedupes) {
  const auto g = prepare_grid({" hsur->sa->hsur->sa ", "# comment", "", "Wait", "hsur->sa->hsur->sa", "CoT"});
  EXPECT_EQ(g.specs, (std::vector<std::string>{"hsur->sa->hsur->sa", "Wait", "CoT"}));
  ASSERT_EQ(g.warnings.size(), 1U);
  EXPECT_THROW(parse_grid_file("# only comments\n\n"), ConfigError);
}

TEST(Grid, ShippedGridParses) {
  const auto g = parse_grid_file(util::read_file(heart::testing::data_dir() / "patterns" / "appendix_grid.txt"));
  EXPECT_TRUE(g.warnings.empty());
  EXPECT_EQ(g.specs.size(), 46U);
  for (const auto& s : g.specs) EXPECT_NO_THROW(parse_strategy(s, default_heart_pattern(), 4)) << s;
  EXPECT_NE(std::find(g.specs.begin(), g.specs.end(), "hsur->hsur->sd->sd"), g.specs.end());
}

TEST(Grid, InvalidSpecsBecomeErrorCellsAndCellsAreSorted) {
  heart::testing::ScriptBuilder b;
  std::vector<Task> tasks;
  for (const char* id : {"A", "B"}) {
    b.wrong_everywhere(id, 4);
    tasks.push_back(heart::testing::make_task(id));
  }
  b.at("A", 1, "happy-1", heart::testing::boxed("4"));
  b.at("B", 2, "sadness-1", heart::testing::boxed("4"));
  Engine engine(heart::testing::default_bank(), heart::testing::default_baselines(),
                std::make_shared<ScriptedBackend>(b.script), heart::testing::s1_config());
  std::vector<RunRecord> records;
  const auto cells = ablation_grid({"Wait", "xq->h", "hsur->sa->hsur->sa", "sa->sa->sa->sa", "hsur->sa"}, tasks, engine,
                                   default_heart_pattern(), {}, &records);
  ASSERT_EQ(cells.size(), 5U);
  EXPECT_EQ(cells[0].pattern_spec, "hsur->sa->hsur->sa");
  EXPECT_DOUBLE_EQ(cells[0].final_accuracy, 1.0);
  EXPECT_EQ(cells[1].pattern_spec, "sa->sa->sa->sa");
  EXPECT_DOUBLE_EQ(cells[1].final_accuracy, 0.5);
  EXPECT_EQ(cells[2].pattern_spec, "Wait");
  EXPECT_DOUBLE_EQ(cells[2].final_accuracy, 0.0);
  EXPECT_TRUE(cells[3].error.has_value());
  EXPECT_EQ(cells[3].pattern_spec, "xq->h");
  EXPECT_TRUE(cells[4].error.has_value());
  EXPECT_EQ(records.size(), 6U);
  const auto md = render_cells(cells, ReportFormat::Markdown);
  EXPECT_NE(md.find("| hsur->sa->hsur->sa | olympiad_math | 100.00 | 2 |"), std::string::npos);
}

TEST(SampleCorpus, MetricsMatchIndependentExpectations) {
  const auto expected = nlohmann::json::parse(util::read_file(heart::testing::golden_dir() / "sample_expected.json"));
  const auto script = load_script(heart::testing::data_dir() / "samples" / "script.jsonl");
  struct Src {
    Benchmark bench;
    const char* file;
    const char* preset;
  };
  const std::vector<Src> sources = {{Benchmark::OlympiadMath, "olympiad_math", "documented"},
                                    {Benchmark::OlympiadPhysics, "olympiad_physics", "documented"},
                                    {Benchmark::HLE, "hle", "hle"},
                                    {Benchmark::SimpleQA, "simpleqa", "simpleqa"}};
  Engine engine(heart::testing::default_bank(), heart::testing::default_baselines(),
                std::make_shared<ScriptedBackend>(script), heart::testing::s1_config());
  for (const auto& src : sources) {
    const auto tasks = load_tasks(heart::testing::data_dir() / "samples" / (std::string(src.file) + ".jsonl"), src.bench,
                                  FieldMapping::preset(src.preset));
    for (const char* name : {"heart", "wait", "cot", "self-reflection"}) {
      const auto strategy = parse_strategy(name, default_heart_pattern(), 4);
      const auto recs = run_strategy(engine, tasks, strategy);
      const auto& exp = expected.at(name).at(src.file);
      for (const auto& r : recs) {
        const auto& e = exp.at("tasks").at(r.task_id);
        const std::optional<int> fc = e.at("first_correct_iteration").is_null()
                                          ? std::nullopt
                                          : std::optional<int>(e.at("first_correct_iteration").get<int>());
        EXPECT_EQ(r.first_correct_iteration, fc) << name << " " << r.task_id;
        EXPECT_EQ(r.request_count, e.at("request_count").get<int>()) << name << " " << r.task_id;
      }
      const auto series = build_series(recs, 4);
      for (int t = 0; t <= 4; ++t) {
        EXPECT_NEAR(series.points[static_cast<std::size_t>(t)].cumulative_accuracy,
                    exp.at("cumulative_accuracy").at(t).get<double>(), 1e-12)
            << name << " " << src.file << " t=" << t;
      }
    }
  }
}
