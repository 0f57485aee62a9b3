// Compares the alternating default schedule against a static one on the
// simulated respondent. Usage: heart_demo [tasks] [seed]

#include <cstdlib>
#include <iostream>
#include <memory>
#include <string>

#include "heart/evalreport.hpp"
#include "heart/protocol.hpp"
#include "heart/stochastic_backend.hpp"

int main(int argc, char** argv) {
  const std::size_t n = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 2000;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;

  std::vector<heart::Task> tasks;
  std::map<std::string, heart::GoldAnswer, std::less<>> answers;
  for (std::size_t i = 0; i < n; ++i) {
    heart::Task t;
    t.id = "sim-" + std::to_string(i);
    t.question = "Simulated question " + std::to_string(i);
    t.gold = std::to_string(i % 97);
    t.answer_type = heart::AnswerType::Numerical;
    t.benchmark = heart::Benchmark::OlympiadMath;
    answers.emplace(t.id, heart::GoldAnswer{t.gold, t.answer_type});
    tasks.push_back(std::move(t));
  }

  heart::AlternationRespondent model;
  auto backend = std::make_shared<heart::StochasticBackend>(model, seed, answers);
  const auto data = std::string(HEART_DATA_DIR);
  heart::Engine engine(heart::load_bank(data + "/cues/ekman_30.jsonl"),
                       heart::load_baselines(data + "/cues/baselines.jsonl"), backend, heart::ProtocolConfig{});

  std::vector<heart::MetricSeries> series;
  for (const char* spec : {"hsur->sa->hsur->sa", "hsur->hsur->hsur->hsur", "sa->sa->sa->sa", "wait"}) {
    const auto strategy = heart::parse_strategy(spec, heart::default_heart_pattern(), 4);
    series.push_back(heart::build_series(heart::run_strategy(engine, tasks, strategy), 4));
  }
  std::cout << heart::render_series(series, heart::ReportFormat::Markdown);
}
