#pragma once

// In-silico respondent: answers correctly with a probability that depends on
// the iteration and on the affective polarity of the active cue group.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include "heart/backend.hpp"
#include "heart/error.hpp"
#include "heart/prompt_bank.hpp"
#include "heart/util.hpp"
#include "heart/verifier.hpp"

namespace heart {

struct RespondentContext {
  int iteration = 0;
  std::optional<Polarity> polarity;           // polarity of the active group, if any
  std::optional<Polarity> previous_polarity;  // polarity at t-1, if any
  bool was_prev_correct = false;
  bool ensembler = false;
  bool any_candidate_correct = false;  // ensembler calls only
};

/// Probability of emitting the gold answer for one call.
using RespondentModel = std::function<double(const RespondentContext&)>;

/// p_initial at t = 0; afterwards p_base, plus switch_bonus whenever the
/// group polarity differs from the previous iteration's. A correct previous
/// answer is kept with probability p_keep_correct. An ensembler call keeps a
/// correct candidate with probability p_keep_correct, else behaves like p_base.
struct AlternationRespondent {
  double p_initial = 0.2;
  double p_base = 0.05;
  double switch_bonus = 0.1;
  double p_keep_correct = 1.0;

  void validate() const {
    for (double p : {p_initial, p_base, p_base + switch_bonus, p_keep_correct}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ModelConfigError("respondent probabilities must lie in [0, 1]");
    }
    if (switch_bonus < 0.0) throw ModelConfigError("switch_bonus must be >= 0");
  }

  [[nodiscard]] bool switches(const RespondentContext& ctx) const {
    return ctx.polarity && ctx.previous_polarity && *ctx.polarity != *ctx.previous_polarity;
  }

  double operator()(const RespondentContext& ctx) const {
    if (ctx.iteration == 0) return p_initial;
    if (ctx.ensembler) return ctx.any_candidate_correct ? p_keep_correct : p_base;
    if (ctx.was_prev_correct) return p_keep_correct;
    return p_base + (switches(ctx) ? switch_bonus : 0.0);
  }
};

struct GoldAnswer {
  std::string gold;
  AnswerType type = AnswerType::FreeText;
};

class StochasticBackend final : public Backend {
public:
  StochasticBackend(RespondentModel model, std::uint64_t seed, std::map<std::string, GoldAnswer, std::less<>> answers,
                    std::string id = "stochastic")
      : model_(std::move(model)), seed_(seed), answers_(std::move(answers)), id_(std::move(id)) {
    if (!model_) throw ModelConfigError("stochastic backend needs a respondent model");
  }

  /// Uniform [0,1) draw for one (task, t, prompt) cell. Independent of call
  /// order, so concurrency does not perturb results.
  static double draw(std::uint64_t seed, std::string_view task_id, int iteration, std::string_view prompt_id) {
    std::string key(task_id);
    key += '\x1f';
    key += std::to_string(iteration);
    key += '\x1f';
    key += prompt_id;
    const std::uint64_t h = util::splitmix64(seed ^ util::fnv1a64(key));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  static std::string correct_text(const std::string& gold) {
    return "Working through the problem step by step.\nSo the final answer is \\boxed{" + gold + "}.";
  }

  static std::string wrong_text(const std::string& gold) {
    return "Working through the problem step by step.\nSo the final answer is \\boxed{not-" + gold + "}.";
  }

  GenResult generate(const GenRequest& request) override {
    request.validate();
    const auto& tags = request.tags;
    auto it = answers_.find(tags.task_id);
    if (it == answers_.end()) throw ModelConfigError("stochastic backend has no answer for task " + tags.task_id);
    const auto& answer = it->second;

    RespondentContext ctx;
    ctx.iteration = tags.iteration;
    if (auto p = lookup(tags, tag::kPolarity)) ctx.polarity = parse_polarity(*p);
    if (auto p = lookup(tags, tag::kPrevPolarity)) ctx.previous_polarity = parse_polarity(*p);
    if (auto prev = lookup(tags, tag::kPrevAnswer); prev && !prev->empty()) {
      ctx.was_prev_correct = exact_match(*prev, answer.gold, answer.type).correct;
    }
    if (auto role = lookup(tags, tag::kRole)) ctx.ensembler = *role == "ensembler";
    if (ctx.ensembler) {
      ctx.any_candidate_correct = request.user_text().find("\\boxed{" + answer.gold + "}") != std::string::npos;
    }

    const double p = model_(ctx);
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ModelConfigError("respondent model returned probability " + std::to_string(p) + " outside [0, 1]");
    }
    const bool correct = draw(seed_, tags.task_id, tags.iteration, tags.prompt_id) < p;
    return GenResult{correct ? correct_text(answer.gold) : wrong_text(answer.gold), id_, std::chrono::milliseconds(0),
                     1};
  }

  [[nodiscard]] std::string id() const override { return id_; }

private:
  static std::optional<std::string> lookup(const RequestTags& tags, std::string_view key) {
    auto it = tags.extra.find(key);
    if (it == tags.extra.end()) return std::nullopt;
    return it->second;
  }

  RespondentModel model_;
  std::uint64_t seed_;
  std::map<std::string, GoldAnswer, std::less<>> answers_;
  std::string id_;
};

}  // namespace heart
