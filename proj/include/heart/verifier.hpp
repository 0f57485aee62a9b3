#pragma once

// Final-answer extraction and the exact-match oracle.

#include <cctype>
#include <concepts>
#include <cstddef>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "heart/error.hpp"
#include "heart/util.hpp"

namespace heart {

enum class AnswerType { Numerical, Expression, FreeText, MultipleChoice };

inline std::string_view answer_type_id(AnswerType t) {
  switch (t) {
    case AnswerType::Numerical: return "numerical";
    case AnswerType::Expression: return "expression";
    case AnswerType::FreeText: return "free_text";
    case AnswerType::MultipleChoice: return "multiple_choice";
  }
  return "?";
}

/// Sentence form used in prompts ("The answer type is: Numerical.").
inline std::string_view answer_type_label(AnswerType t) {
  switch (t) {
    case AnswerType::Numerical: return "Numerical";
    case AnswerType::Expression: return "Expression";
    case AnswerType::FreeText: return "Text";
    case AnswerType::MultipleChoice: return "Multiple choice";
  }
  return "?";
}

inline std::optional<AnswerType> parse_answer_type(std::string_view s) {
  std::string key;
  for (char c : util::to_lower(util::trim(s))) {
    if (std::isalnum(static_cast<unsigned char>(c))) key += c;
  }
  if (key == "numerical" || key == "numeric" || key == "number" || key == "integer") return AnswerType::Numerical;
  if (key == "expression" || key == "formula" || key == "equation" || key == "interval" || key == "tuple") {
    return AnswerType::Expression;
  }
  if (key == "freetext" || key == "text" || key == "exactmatch" || key == "string" || key == "shortanswer") {
    return AnswerType::FreeText;
  }
  if (key == "multiplechoice" || key == "mc" || key == "choice") return AnswerType::MultipleChoice;
  return std::nullopt;
}

enum class VerdictReason { Match, Mismatch, ExtractionFailed };

inline std::string_view verdict_reason_id(VerdictReason r) {
  switch (r) {
    case VerdictReason::Match: return "match";
    case VerdictReason::Mismatch: return "mismatch";
    case VerdictReason::ExtractionFailed: return "extraction_failed";
  }
  return "?";
}

struct VerifierResult {
  bool correct = false;
  std::optional<std::string> extracted;
  std::optional<std::string> normalized_pred;
  std::string normalized_gold;
  VerdictReason reason = VerdictReason::Mismatch;

  friend bool operator==(const VerifierResult&, const VerifierResult&) = default;
};

struct VerifierOptions {
  /// Two numerical answers within this relative distance compare equal.
  double numeric_relative_tolerance = 1e-9;
};

namespace detail {

// Returns the index one past the brace matching the '{' at `open`, or npos.
inline std::size_t match_brace(std::string_view s, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == '{' || s[i + 1] == '}')) {
      ++i;
      continue;
    }
    if (s[i] == '{') ++depth;
    if (s[i] == '}' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

inline std::string trim_answer_punctuation(std::string_view s) {
  s = util::trim(s);
  bool changed = true;
  while (changed && !s.empty()) {
    changed = false;
    for (std::string_view wrap : {"**", "$", "`", "\"", "'"}) {
      if (s.size() >= 2 * wrap.size() && s.substr(0, wrap.size()) == wrap &&
          s.substr(s.size() - wrap.size()) == wrap) {
        s = util::trim(s.substr(wrap.size(), s.size() - 2 * wrap.size()));
        changed = true;
      }
    }
    while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';' || s.back() == '!' ||
                          s.back() == ':')) {
      s.remove_suffix(1);
      s = util::trim(s);
      changed = true;
    }
    while (!s.empty() && (s.front() == ':' || s.front() == ',')) {
      s.remove_prefix(1);
      s = util::trim(s);
      changed = true;
    }
  }
  return std::string(s);
}

}  // namespace detail

/// Content of the last balanced \boxed{...}; otherwise the rest of the line
/// after the last "final answer is"; otherwise nothing.
inline std::optional<std::string> extract_answer(std::string_view text, AnswerType /*type*/ = AnswerType::FreeText) {
  static constexpr std::string_view marker = "\\boxed";
  std::vector<std::size_t> starts;
  for (auto pos = text.find(marker); pos != std::string_view::npos; pos = text.find(marker, pos + 1)) {
    starts.push_back(pos);
  }
  for (auto it = starts.rbegin(); it != starts.rend(); ++it) {
    std::size_t open = *it + marker.size();
    while (open < text.size() && text[open] == ' ') ++open;
    if (open >= text.size() || text[open] != '{') continue;
    const auto close = detail::match_brace(text, open);
    if (close == std::string_view::npos) continue;
    return std::string(util::trim(text.substr(open + 1, close - open - 2)));
  }

  const std::string lower = util::to_lower(text);
  static constexpr std::string_view phrase = "final answer is";
  const auto pos = lower.rfind(phrase);
  if (pos == std::string::npos) return std::nullopt;
  auto rest = text.substr(pos + phrase.size());
  if (const auto nl = rest.find('\n'); nl != std::string_view::npos) rest = rest.substr(0, nl);
  auto answer = detail::trim_answer_punctuation(rest);
  if (answer.empty()) return std::nullopt;
  return answer;
}

namespace detail {

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

inline std::optional<Rational> parse_decimal(std::string_view s) {
  static const std::regex number(R"(([+-]?)(\d*)(?:\.(\d*))?(?:[eE]([+-]?\d{1,4}))?)");
  std::match_results<std::string_view::const_iterator> m;
  if (s.empty() || !std::regex_match(s.begin(), s.end(), m, number)) return std::nullopt;
  const std::string whole = m[2].str();
  const std::string frac = m[3].str();
  if (whole.empty() && frac.empty()) return std::nullopt;
  // cpp_int reads a leading zero as an octal prefix
  std::string digits = whole + frac;
  digits.erase(0, std::min(digits.find_first_not_of('0'), digits.size()));
  BigInt mantissa(digits.empty() ? std::string("0") : digits);
  BigInt scale = boost::multiprecision::pow(BigInt(10), static_cast<unsigned>(frac.size()));
  Rational value(mantissa, scale);
  if (m[4].matched) {
    const int exp = std::stoi(m[4].str());
    const BigInt p = boost::multiprecision::pow(BigInt(10), static_cast<unsigned>(exp < 0 ? -exp : exp));
    value = exp < 0 ? value / Rational(p) : value * Rational(p);
  }
  if (m[1].str() == "-") value = -value;
  return value;
}

inline std::string_view strip_parens(std::string_view s) {
  while (s.size() >= 2 && s.front() == '(' && s.back() == ')' &&
         s.find(')') == s.size() - 1 /* single balanced pair */) {
    s = s.substr(1, s.size() - 2);
  }
  return s;
}

// Rationals written as a decimal, "a/b", "(a)/(b)" or "-(a)/(b)".
inline std::optional<Rational> parse_rational(std::string_view s) {
  bool negate = false;
  if (s.size() > 1 && s.front() == '-' && s[1] == '(') {
    negate = true;
    s.remove_prefix(1);
  }
  std::optional<Rational> value;
  if (const auto slash = s.find('/'); slash != std::string_view::npos) {
    if (s.find('/', slash + 1) != std::string_view::npos) return std::nullopt;
    auto num = parse_decimal(strip_parens(s.substr(0, slash)));
    auto den = parse_decimal(strip_parens(s.substr(slash + 1)));
    if (!num || !den || *den == 0) return std::nullopt;
    value = *num / *den;
  } else {
    value = parse_decimal(strip_parens(s));
  }
  if (value && negate) *value = -*value;
  return value;
}

inline std::string render_rational(const Rational& r) {
  const BigInt num = boost::multiprecision::numerator(r);
  const BigInt den = boost::multiprecision::denominator(r);
  if (den == 1) return num.str();
  return num.str() + "/" + den.str();
}

inline bool is_atom(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.') return false;
  }
  return true;
}

// Replaces every `\cmd{arg}` by f(arg); arguments may nest.
template <typename F>
std::string rewrite_command(std::string s, std::string_view cmd, F&& f) {
  std::size_t pos = 0;
  while ((pos = s.find(cmd, pos)) != std::string::npos) {
    std::size_t open = pos + cmd.size();
    if (open < s.size() && std::isalpha(static_cast<unsigned char>(s[open]))) {
      pos = open;  // prefix of a longer command name
      continue;
    }
    while (open < s.size() && s[open] == ' ') ++open;
    if (open >= s.size() || s[open] != '{') {
      pos = open;
      continue;
    }
    const auto close = match_brace(s, open);
    if (close == std::string::npos) break;
    const std::string arg = s.substr(open + 1, close - open - 2);
    const std::string repl = f(arg);
    s.replace(pos, close - pos, repl);
    pos += repl.size();
  }
  return s;
}

// Replaces `\frac{a}{b}` by a/b (parenthesising compound operands).
inline std::string rewrite_fractions(std::string s) {
  for (std::string_view variant : {"\\dfrac", "\\tfrac"}) s = util::replace_all(std::move(s), variant, "\\frac");
  static constexpr std::string_view cmd = "\\frac";
  std::size_t pos = 0;
  while ((pos = s.find(cmd, pos)) != std::string::npos) {
    std::size_t open1 = pos + cmd.size();
    while (open1 < s.size() && s[open1] == ' ') ++open1;
    if (open1 >= s.size() || s[open1] != '{') {
      pos = open1;
      continue;
    }
    const auto close1 = match_brace(s, open1);
    if (close1 == std::string::npos) break;
    std::size_t open2 = close1;
    while (open2 < s.size() && s[open2] == ' ') ++open2;
    if (open2 >= s.size() || s[open2] != '{') {
      pos = close1;
      continue;
    }
    const auto close2 = match_brace(s, open2);
    if (close2 == std::string::npos) break;
    const std::string a = rewrite_fractions(s.substr(open1 + 1, close1 - open1 - 2));
    const std::string b = rewrite_fractions(s.substr(open2 + 1, close2 - open2 - 2));
    const std::string repl = (is_atom(a) ? a : "(" + a + ")") + "/" + (is_atom(b) ? b : "(" + b + ")");
    s.replace(pos, close2 - pos, repl);
    pos += repl.size();
  }
  return s;
}

inline std::string normalize_once(std::string_view input, AnswerType type) {
  std::string s(util::trim(input));

  // Math-mode wrappers.
  bool changed = true;
  while (changed) {
    changed = false;
    auto v = std::string_view(s);
    v = util::trim(v);
    for (auto [open, close] : {std::pair<std::string_view, std::string_view>{"$", "$"},
                               {"\\(", "\\)"},
                               {"\\[", "\\]"}}) {
      if (v.size() >= open.size() + close.size() && v.substr(0, open.size()) == open &&
          v.substr(v.size() - close.size()) == close) {
        v = util::trim(v.substr(open.size(), v.size() - open.size() - close.size()));
        changed = true;
      }
    }
    s = std::string(v);
  }

  for (std::string_view cmd : {"\\text", "\\textbf", "\\mathrm", "\\mathbf", "\\operatorname", "\\boxed"}) {
    s = rewrite_command(std::move(s), cmd, [](const std::string& arg) { return arg; });
  }
  for (std::string_view token : {"\\left", "\\right", "\\displaystyle"}) {
    s = util::replace_all(std::move(s), token, "");
  }
  for (std::string_view space : {"\\,", "\\;", "\\!", "\\:", "\\quad", "\\qquad", "~"}) {
    s = util::replace_all(std::move(s), space, " ");
  }
  s = util::replace_all(std::move(s), "\\ ", " ");
  s = rewrite_fractions(std::move(s));
  s = rewrite_command(std::move(s), "\\sqrt", [](const std::string& arg) { return "sqrt(" + arg + ")"; });

  switch (type) {
    case AnswerType::FreeText: {
      std::string collapsed;
      bool space = false;
      for (char c : util::to_lower(s)) {
        if (std::isspace(static_cast<unsigned char>(c))) {
          space = true;
          continue;
        }
        if (space && !collapsed.empty()) collapsed += ' ';
        space = false;
        collapsed += c;
      }
      return trim_answer_punctuation(collapsed);
    }
    case AnswerType::MultipleChoice: {
      std::string t = trim_answer_punctuation(s);
      auto v = std::string_view(t);
      while (v.size() >= 2 && v.front() == '(' && v.back() == ')') v = util::trim(v.substr(1, v.size() - 2));
      while (!v.empty() && v.back() == ')') v.remove_suffix(1);
      return util::to_upper(util::trim(v));
    }
    case AnswerType::Numerical:
    case AnswerType::Expression: {
      s = util::replace_all(std::move(s), "\\cdot", "*");
      s = util::replace_all(std::move(s), "\\times", "*");
      s = util::replace_all(std::move(s), "\\pi", "pi");
      std::string compact;
      for (char c : s) {
        if (!std::isspace(static_cast<unsigned char>(c))) compact += c;
      }
      compact = trim_answer_punctuation(compact);
      static const std::regex thousands(R"([+-]?\d{1,3}(,\d{3})+(\.\d+)?)");
      if (std::regex_match(compact, thousands)) compact = util::replace_all(std::move(compact), ",", "");
      if (auto r = parse_rational(compact)) return render_rational(*r);
      return compact;
    }
  }
  return s;
}

}  // namespace detail

/// Canonical comparison form of an answer. Numbers become exact reduced
/// fractions ("141.75" -> "567/4"); LaTeX wrappers are removed; \frac and
/// \sqrt are rewritten to a/b and sqrt(x). Unparseable numerical content
/// degrades to the cleaned string. Applied to a fixed point, so idempotent.
inline std::string normalize(std::string_view answer, AnswerType type) {
  std::string current(answer);
  for (int round = 0; round < 8; ++round) {
    std::string next = detail::normalize_once(current, type);
    if (next == current) break;
    current = std::move(next);
  }
  return current;
}

namespace detail {

inline bool numerically_close(std::string_view a, std::string_view b, double tolerance) {
  const auto x = parse_rational(a);
  const auto y = parse_rational(b);
  if (!x || !y) return false;
  if (*x == *y) return true;
  if (tolerance <= 0) return false;
  const Rational tol(tolerance);
  const Rational diff = abs(Rational(*x - *y));
  const Rational ax = abs(*x);
  const Rational ay = abs(*y);
  const Rational scale = ax > ay ? ax : ay;
  return diff <= tol * scale;
}

}  // namespace detail

/// Compares an extracted prediction with the gold answer.
inline VerifierResult exact_match(std::optional<std::string_view> pred, std::string_view gold, AnswerType type,
                                  const VerifierOptions& options = {}) {
  if (util::trim(gold).empty()) throw PreconditionError("gold answer must not be empty");
  VerifierResult r;
  r.normalized_gold = normalize(gold, type);
  if (!pred || util::trim(*pred).empty()) {
    r.reason = VerdictReason::ExtractionFailed;
    if (pred) r.extracted = std::string(*pred);
    return r;
  }
  r.extracted = std::string(*pred);
  r.normalized_pred = normalize(*pred, type);
  r.correct = *r.normalized_pred == r.normalized_gold ||
              (type == AnswerType::Numerical &&
               detail::numerically_close(*r.normalized_pred, r.normalized_gold, options.numeric_relative_tolerance));
  r.reason = r.correct ? VerdictReason::Match : VerdictReason::Mismatch;
  return r;
}

template <typename S>
  requires std::convertible_to<const S&, std::string_view>
inline VerifierResult exact_match(const S& pred, std::string_view gold, AnswerType type,
                                  const VerifierOptions& options = {}) {
  return exact_match(std::optional<std::string_view>(pred), gold, type, options);
}

/// Extracts from a full completion and then compares.
inline VerifierResult verify_completion(std::string_view completion, std::string_view gold, AnswerType type,
                                        const VerifierOptions& options = {}) {
  const auto extracted = extract_answer(completion, type);
  if (!extracted) return exact_match(std::optional<std::string_view>{}, gold, type, options);
  return exact_match(std::optional<std::string_view>(*extracted), gold, type, options);
}

struct OracleSelection {
  std::size_t index = 0;
  VerifierResult result;
  bool halt = false;
  std::vector<VerifierResult> verdicts;  // one per candidate, in order
};

/// Binary-verifier argmax: the lowest-index correct candidate halts the run;
/// with no correct candidate, index 0 is selected and the run continues.
inline OracleSelection oracle_select(std::span<const std::optional<std::string>> extracted, std::string_view gold,
                                     AnswerType type, const VerifierOptions& options = {}) {
  if (extracted.empty()) throw EmptyCandidateError("oracle selection over an empty candidate set");
  OracleSelection sel;
  sel.verdicts.reserve(extracted.size());
  for (const auto& e : extracted) {
    sel.verdicts.push_back(e ? exact_match(std::optional<std::string_view>(*e), gold, type, options)
                             : exact_match(std::optional<std::string_view>{}, gold, type, options));
  }
  for (std::size_t i = 0; i < sel.verdicts.size(); ++i) {
    if (sel.verdicts[i].correct) {
      sel.index = i;
      sel.halt = true;
      sel.result = sel.verdicts[i];
      return sel;
    }
  }
  sel.result = sel.verdicts.front();
  return sel;
}

}  // namespace heart
