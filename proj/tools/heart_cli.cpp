// heart: command-line entry point.
//
//   heart run      --config run.json [overrides]
//   heart ablate   --config run.json --grid patterns.txt
//   heart report   --out DIR
//   heart validate --bank FILE --dataset olympiad_math=FILE --patterns FILE

#include <atomic>
#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "heart/runner.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

template <typename T>
void add_opt(CLI::App& app, const std::string& name, std::optional<T>& target, const std::string& help) {
  app.add_option_function<T>(name, [&target](const T& v) { target = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HEART: affective iterative self-correction runner"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(heart::kToolVersion));

  std::string config_path;
  heart::CliOverrides ov;
  auto add_run_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration (JSON)");
    add_opt(*sub, "--backend", ov.backend, "Backend kind: http, scripted or stochastic");
    add_opt(*sub, "--resolution", ov.resolution, "Resolution mode: s1 or s2");
    add_opt(*sub, "--max-iterations", ov.max_iterations, "Number of correction iterations N (default 4)");
    add_opt(*sub, "--parallelism", ov.parallelism, "In-flight candidate requests per iteration");
    add_opt(*sub, "--task-parallelism", ov.task_parallelism, "Tasks processed concurrently");
    add_opt(*sub, "--budget", ov.budget, "Maximum number of generation calls");
    add_opt(*sub, "--seed", ov.seed, "Seed for the split and the simulated respondent");
    add_opt(*sub, "--out", ov.out, "Output directory");
    add_opt(*sub, "--strategies", ov.strategies, "Comma-separated strategy list");
    add_opt(*sub, "--script", ov.script, "Script file for the scripted backend");
    add_opt(*sub, "--bank", ov.bank, "Cue bank file");
    add_opt(*sub, "--heart-pattern", ov.heart_pattern, "Schedule pattern for the heart strategy");
  };

  auto* run = app.add_subcommand("run", "Run strategies over the configured benchmarks");
  add_run_flags(run);
  auto* ablate = app.add_subcommand("ablate", "Run a pattern grid and rank the results");
  add_run_flags(ablate);
  add_opt(*ablate, "--grid", ov.grid, "Grid file, one pattern or strategy per line");

  auto* report = app.add_subcommand("report", "Recompute metric reports from stored records");
  std::string report_out = "heart-out";
  std::string records_path;
  int report_iterations = 4;
  bool report_skip_errored = false;
  report->add_option("--out", report_out, "Run output directory");
  report->add_option("--records", records_path, "Records file (default OUT/records.jsonl)");
  report->add_option("--max-iterations", report_iterations, "Number of iterations N");
  report->add_flag("--skip-errored", report_skip_errored, "Exclude errored runs from denominators");

  auto* validate = app.add_subcommand("validate", "Check cue banks, datasets and pattern files");
  heart::ValidateInputs vin;
  std::string v_bank, v_baselines, v_script;
  std::vector<std::string> v_datasets, v_pattern_files, v_patterns;
  validate->add_option("--bank", v_bank, "Cue bank file");
  validate->add_option("--baselines", v_baselines, "Baseline prompt file");
  validate->add_option("--dataset", v_datasets, "BENCHMARK=PATH, repeatable");
  validate->add_option("--patterns", v_pattern_files, "Pattern/grid file, repeatable");
  validate->add_option("--pattern", v_patterns, "Single pattern spec, repeatable");
  validate->add_option("--script", v_script, "Scripted backend file");

  CLI11_PARSE(app, argc, argv);

  std::signal(SIGINT, on_sigint);
  heart::CommandContext ctx{std::cout, std::cerr, &g_stop, {}};

  auto load_config = [&]() -> heart::RunConfig {
    heart::RunConfig cfg = config_path.empty() ? heart::RunConfig{} : heart::load_run_config(config_path);
    heart::apply_overrides(cfg, ov);
    return cfg;
  };

  try {
    if (run->parsed()) return heart::cmd_run(load_config(), ctx);
    if (ablate->parsed()) return heart::cmd_ablate(load_config(), ctx);
    if (report->parsed()) {
      const auto records = records_path.empty() ? std::filesystem::path(report_out) / "records.jsonl"
                                                : std::filesystem::path(records_path);
      return heart::cmd_report(records, std::filesystem::path(report_out) / "reports", report_iterations,
                               report_skip_errored, ctx);
    }
    if (validate->parsed()) {
      if (!v_bank.empty()) vin.bank = v_bank;
      if (!v_baselines.empty()) vin.baselines = v_baselines;
      if (!v_script.empty()) vin.script = v_script;
      for (const auto& d : v_datasets) {
        const auto eq = d.find('=');
        if (eq == std::string::npos) {
          std::cerr << "config error: --dataset expects BENCHMARK=PATH, got '" << d << "'\n";
          return heart::kExitConfigError;
        }
        vin.datasets.emplace_back(heart::parse_benchmark(d.substr(0, eq)), d.substr(eq + 1));
      }
      for (const auto& f : v_pattern_files) vin.pattern_files.emplace_back(f);
      vin.patterns = v_patterns;
      if (!vin.bank && !vin.baselines && !vin.script && vin.datasets.empty() && vin.pattern_files.empty() &&
          vin.patterns.empty()) {
        vin.bank = std::filesystem::path(HEART_DATA_DIR) / "cues" / "ekman_30.jsonl";
        vin.baselines = std::filesystem::path(HEART_DATA_DIR) / "cues" / "baselines.jsonl";
      }
      return heart::cmd_validate(vin, ctx);
    }
  } catch (const heart::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return heart::kExitConfigError;
  }
  return heart::kExitOk;
}
