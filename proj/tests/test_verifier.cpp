#include <gtest/gtest.h>

#include <numeric>
#include <optional>
#include <random>
#include <string>

#include "heart/verifier.hpp"

using namespace heart;

namespace {

// Independent exact-arithmetic reference: decimal and a/b strings to a
// reduced fraction over long long, rendered "n" or "n/d".
struct Frac {
  long long num;
  long long den;
};

std::optional<Frac> oracle_parse(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (auto slash = s.find('/'); slash != std::string::npos) {
    auto a = oracle_parse(s.substr(0, slash));
    auto b = oracle_parse(s.substr(slash + 1));
    if (!a || !b || b->num == 0) return std::nullopt;
    Frac f{a->num * b->den, a->den * b->num};
    if (f.den < 0) {
      f.num = -f.num;
      f.den = -f.den;
    }
    const auto g = std::gcd(f.num, f.den);
    return Frac{f.num / g, f.den / g};
  }
  std::size_t i = 0;
  bool neg = false;
  if (s[i] == '-' || s[i] == '+') neg = s[i++] == '-';
  long long num = 0;
  long long den = 1;
  bool digits = false;
  bool point = false;
  for (; i < s.size(); ++i) {
    if (s[i] == '.' && !point) {
      point = true;
      continue;
    }
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
    num = num * 10 + (s[i] - '0');
    if (point) den *= 10;
    digits = true;
  }
  if (!digits) return std::nullopt;
  const auto g = std::gcd(num, den);
  return Frac{(neg ? -num : num) / g, den / g};
}

std::string oracle_render(const Frac& f) {
  return f.den == 1 ? std::to_string(f.num) : std::to_string(f.num) + "/" + std::to_string(f.den);
}

}  // namespace

TEST(RationalOracle, SelfCheck) {
  EXPECT_EQ(oracle_render(*oracle_parse("141.75")), "567/4");
  EXPECT_EQ(oracle_render(*oracle_parse("567/4")), "567/4");
  EXPECT_EQ(oracle_render(*oracle_parse("-0.50")), "-1/2");
  EXPECT_EQ(oracle_render(*oracle_parse("12/4")), "3");
}

TEST(ExtractAnswer, WorkedExampleReturnsFour) {
  const std::string text =
      "The digits of 2^10 = 1024 are 1, 0, 2 and 4. Sum of the digits = 1 + 0 + 2 + 1 = 4. "
      "So the final answer is $\\boxed{4}$.";
  EXPECT_EQ(extract_answer(text, AnswerType::Numerical), "4");
}

TEST(ExtractAnswer, LastBoxedWins) {
  EXPECT_EQ(extract_answer("first \\boxed{\\frac{567}{4}} and then \\boxed{108}"), "108");
}

TEST(ExtractAnswer, NestedBracesAreBalanced) {
  EXPECT_EQ(extract_answer("\\boxed{\\frac{1}{\\sqrt{2}}}"), "\\frac{1}{\\sqrt{2}}");
}

TEST(ExtractAnswer, FallbackAfterFinalAnswerPhrase) {
  EXPECT_EQ(extract_answer("Working.\nThe Final Answer is: 42.\nThanks"), "42");
  EXPECT_EQ(extract_answer("so the final answer is Paris"), "Paris");
}

TEST(ExtractAnswer, AbsentWithoutMarker) {
  EXPECT_FALSE(extract_answer("I cannot solve this.").has_value());
  EXPECT_FALSE(extract_answer("").has_value());
}

TEST(ExtractAnswer, SingleBoxedPropertyOverGeneratedStrings) {
  std::mt19937 rng(11);
  const std::string alphabet = "abcxyz0123456789 +-*/^_.,()";
  for (int trial = 0; trial < 2000; ++trial) {
    auto word = [&](std::size_t n) {
      std::string s;
      for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
      return s;
    };
    // content with balanced braces
    std::string content = word(1 + rng() % 8);
    if (rng() % 2) content += "{" + word(rng() % 5) + "}";
    if (rng() % 3 == 0) content = "\\frac{" + content + "}{" + word(1 + rng() % 3) + "}";
    const std::string text = word(rng() % 20) + "\\boxed{" + content + "}" + word(rng() % 20);
    ASSERT_EQ(extract_answer(text), util::trim(content)) << text;
  }
}

TEST(Normalize, PaperFewShotForms) {
  EXPECT_EQ(normalize("$\\frac{567}{4}$", AnswerType::Numerical), "567/4");
  EXPECT_EQ(normalize("141.75", AnswerType::Numerical), "567/4");
  EXPECT_EQ(normalize("567/4", AnswerType::Numerical), "567/4");
  EXPECT_EQ(normalize("  4 ", AnswerType::Numerical), "4");
  EXPECT_EQ(normalize("\\sqrt{15}", AnswerType::Expression), "sqrt(15)");
}

TEST(Normalize, WrappersAndSpacing) {
  EXPECT_EQ(normalize("\\text{Paris}", AnswerType::FreeText), "paris");
  EXPECT_EQ(normalize("\\left( 3 \\right)", AnswerType::Numerical), "3");
  EXPECT_EQ(normalize("1\\,000", AnswerType::Numerical), "1000");
  EXPECT_EQ(normalize("1,000", AnswerType::Numerical), "1000");
  EXPECT_EQ(normalize("007", AnswerType::Numerical), "7");
  EXPECT_EQ(normalize("-\\frac{3}{6}", AnswerType::Numerical), "-1/2");
  EXPECT_EQ(normalize("\\dfrac{2}{4}", AnswerType::Numerical), "1/2");
}

TEST(Normalize, FreeTextIsCaseAndSpaceInsensitive) {
  EXPECT_EQ(normalize("  William   Shakespeare. ", AnswerType::FreeText), "william shakespeare");
}

TEST(Normalize, MultipleChoiceLetters) {
  EXPECT_EQ(normalize("(C)", AnswerType::MultipleChoice), "C");
  EXPECT_EQ(normalize("c", AnswerType::MultipleChoice), "C");
  EXPECT_EQ(normalize("B)", AnswerType::MultipleChoice), "B");
}

TEST(Normalize, UnparseableNumericalDegradesToString) {
  EXPECT_EQ(normalize("x + 1", AnswerType::Numerical), "x+1");
  EXPECT_NO_THROW(normalize("}{", AnswerType::Numerical));
}

TEST(Normalize, AgreesWithRationalOracleOnRandomFractions) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5000; ++trial) {
    const long long a = static_cast<long long>(rng() % 200001) - 100000;
    const long long b = 1 + static_cast<long long>(rng() % 5000);
    const auto expected = oracle_render(*oracle_parse(std::to_string(a) + "/" + std::to_string(b)));
    const std::string latex = "\\frac{" + std::to_string(a) + "}{" + std::to_string(b) + "}";
    ASSERT_EQ(normalize(latex, AnswerType::Numerical), expected) << latex;
    ASSERT_EQ(normalize(std::to_string(a) + "/" + std::to_string(b), AnswerType::Numerical), expected);
  }
}

TEST(Normalize, AgreesWithRationalOracleOnRandomDecimals) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5000; ++trial) {
    const long long whole = static_cast<long long>(rng() % 100000);
    const int places = 1 + static_cast<int>(rng() % 6);
    std::string frac;
    for (int i = 0; i < places; ++i) frac += static_cast<char>('0' + rng() % 10);
    const std::string dec = (rng() % 2 ? "-" : "") + std::to_string(whole) + "." + frac;
    ASSERT_EQ(normalize(dec, AnswerType::Numerical), oracle_render(*oracle_parse(dec))) << dec;
  }
}

TEST(Normalize, IsIdempotent) {
  const std::vector<std::string> inputs = {"$\\frac{567}{4}$", "141.75", "\\sqrt{\\frac{1}{4}}", "\\text{ A }",
                                           "(C)",  "1,000", "\\left(x\\right)", "\\frac{\\frac{1}{2}}{3}",
                                           "  Hello World. ", "2\\pi", "$$4$$", "\\boxed{7}"};
  for (auto type : {AnswerType::Numerical, AnswerType::Expression, AnswerType::FreeText, AnswerType::MultipleChoice}) {
    for (const auto& s : inputs) {
      const auto once = normalize(s, type);
      EXPECT_EQ(normalize(once, type), once) << s << " as " << answer_type_id(type);
    }
  }
}

TEST(ExactMatch, EquivalentFormsMatch) {
  EXPECT_TRUE(exact_match("\\frac{567}{4}", "567/4", AnswerType::Numerical).correct);
  EXPECT_TRUE(exact_match("141.75", "\\frac{567}{4}", AnswerType::Numerical).correct);
  EXPECT_TRUE(exact_match("567/4", "141.75", AnswerType::Numerical).correct);
  EXPECT_TRUE(exact_match("\\sqrt{15}", "sqrt(15)", AnswerType::Expression).correct);
  EXPECT_TRUE(exact_match("4", "4", AnswerType::Numerical).correct);
}

TEST(ExactMatch, MismatchAndAuditFields) {
  const auto r = exact_match("3", "4", AnswerType::Numerical);
  EXPECT_FALSE(r.correct);
  EXPECT_EQ(r.reason, VerdictReason::Mismatch);
  EXPECT_EQ(r.normalized_pred, "3");
  EXPECT_EQ(r.normalized_gold, "4");
  EXPECT_EQ(r.extracted, "3");
}

TEST(ExactMatch, ExtractionFailureIsNeverCorrect) {
  const auto r = exact_match(std::optional<std::string_view>{}, "4", AnswerType::Numerical);
  EXPECT_FALSE(r.correct);
  EXPECT_EQ(r.reason, VerdictReason::ExtractionFailed);
  EXPECT_FALSE(verify_completion("no answer here", "4", AnswerType::Numerical).correct);
}

TEST(ExactMatch, NumericToleranceIsRelative) {
  EXPECT_TRUE(exact_match("0.3333333333333", "1/3", AnswerType::Numerical).correct);
  EXPECT_FALSE(exact_match("0.3333", "1/3", AnswerType::Numerical).correct);
  VerifierOptions strict;
  strict.numeric_relative_tolerance = 0.0;
  EXPECT_FALSE(exact_match("0.3333333333333", "1/3", AnswerType::Numerical, strict).correct);
}

TEST(ExactMatch, GoldMustBeNonEmpty) {
  EXPECT_THROW(exact_match("4", "", AnswerType::Numerical), PreconditionError);
}

TEST(ExactMatch, ReflexiveOnRandomStrings) {
  std::mt19937 rng(9);
  const std::string alphabet = "ab1234567890./-\\{}() $";
  for (int trial = 0; trial < 3000; ++trial) {
    std::string s;
    const auto n = 1 + rng() % 12;
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    if (std::string_view(s).find_first_not_of(" ") == std::string::npos) continue;
    for (auto type : {AnswerType::Numerical, AnswerType::Expression, AnswerType::FreeText}) {
      ASSERT_TRUE(exact_match(s, s, type).correct) << "'" << s << "'";
    }
  }
}

TEST(OracleSelect, LowestCorrectIndexHalts) {
  std::vector<std::optional<std::string>> c = {"3", "4", "4"};
  const auto sel = oracle_select(c, "4", AnswerType::Numerical);
  EXPECT_TRUE(sel.halt);
  EXPECT_EQ(sel.index, 1U);
  EXPECT_TRUE(sel.result.correct);
  ASSERT_EQ(sel.verdicts.size(), 3U);
}

TEST(OracleSelect, AllWrongSelectsIndexZero) {
  std::vector<std::optional<std::string>> c = {"3", std::nullopt};
  const auto sel = oracle_select(c, "4", AnswerType::Numerical);
  EXPECT_FALSE(sel.halt);
  EXPECT_EQ(sel.index, 0U);
  EXPECT_FALSE(sel.result.correct);
}

TEST(OracleSelect, EmptySetThrows) {
  std::vector<std::optional<std::string>> c;
  EXPECT_THROW(oracle_select(c, "4", AnswerType::Numerical), EmptyCandidateError);
}

TEST(AnswerTypes, LabelsAndAliases) {
  EXPECT_EQ(answer_type_label(AnswerType::Numerical), "Numerical");
  EXPECT_EQ(parse_answer_type("exactMatch"), AnswerType::FreeText);
  EXPECT_EQ(parse_answer_type("multipleChoice"), AnswerType::MultipleChoice);
  EXPECT_EQ(parse_answer_type("Numerical"), AnswerType::Numerical);
  EXPECT_FALSE(parse_answer_type("image").has_value());
}
