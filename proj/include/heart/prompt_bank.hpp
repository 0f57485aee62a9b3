#pragma once

// Emotion taxonomy, affective-cue bank, baseline prompts and the short-code
// schedule notation ("hsur->sa->hsur->sa").

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "heart/error.hpp"
#include "heart/util.hpp"

namespace heart {

enum class Emotion : std::uint8_t { Happy, Sadness, Fear, Disgust, Anger, Surprise };

inline constexpr std::array<Emotion, 6> kAllEmotions = {Emotion::Happy, Emotion::Sadness, Emotion::Fear,
                                                        Emotion::Disgust, Emotion::Anger, Emotion::Surprise};

inline constexpr std::size_t kCuesPerEmotion = 5;
inline constexpr std::size_t kBankSize = kCuesPerEmotion * kAllEmotions.size();

inline std::string_view short_code(Emotion e) {
  switch (e) {
    case Emotion::Happy: return "h";
    case Emotion::Sadness: return "s";
    case Emotion::Fear: return "f";
    case Emotion::Disgust: return "d";
    case Emotion::Anger: return "a";
    case Emotion::Surprise: return "sur";
  }
  return "?";
}

inline std::string_view emotion_name(Emotion e) {
  switch (e) {
    case Emotion::Happy: return "Happy";
    case Emotion::Sadness: return "Sadness";
    case Emotion::Fear: return "Fear";
    case Emotion::Disgust: return "Disgust";
    case Emotion::Anger: return "Anger";
    case Emotion::Surprise: return "Surprise";
  }
  return "?";
}

/// Accepts canonical names, common adjective forms and short codes, case-insensitively.
inline std::optional<Emotion> parse_emotion(std::string_view s) {
  static const std::map<std::string, Emotion> aliases = {
      {"happy", Emotion::Happy},       {"happiness", Emotion::Happy}, {"h", Emotion::Happy},
      {"sadness", Emotion::Sadness},   {"sad", Emotion::Sadness},     {"s", Emotion::Sadness},
      {"fear", Emotion::Fear},         {"f", Emotion::Fear},          {"disgust", Emotion::Disgust},
      {"d", Emotion::Disgust},         {"anger", Emotion::Anger},     {"angry", Emotion::Anger},
      {"a", Emotion::Anger},           {"surprise", Emotion::Surprise}, {"sur", Emotion::Surprise},
  };
  auto it = aliases.find(util::to_lower(util::trim(s)));
  if (it == aliases.end()) return std::nullopt;
  return it->second;
}

enum class Polarity { Positive, Negative, Mixed };

inline std::string_view polarity_name(Polarity p) {
  switch (p) {
    case Polarity::Positive: return "positive";
    case Polarity::Negative: return "negative";
    case Polarity::Mixed: return "mixed";
  }
  return "?";
}

inline std::optional<Polarity> parse_polarity(std::string_view s) {
  if (s == "positive") return Polarity::Positive;
  if (s == "negative") return Polarity::Negative;
  if (s == "mixed") return Polarity::Mixed;
  return std::nullopt;
}

/// A non-empty set of emotions whose cue pools are active together at one
/// iteration. Members keep the order they were written in so the pattern
/// notation round-trips; equality is set equality.
class EmotionGroup {
public:
  explicit EmotionGroup(std::vector<Emotion> members) : members_(std::move(members)) {
    if (members_.empty()) throw EmptyGroupError("emotion group must not be empty");
    for (auto e : members_) {
      const auto bit = bit_of(e);
      if ((mask_ & bit) != 0) {
        throw ParseError("duplicate emotion '" + std::string(emotion_name(e)) + "' in group");
      }
      mask_ |= bit;
    }
  }

  [[nodiscard]] const std::vector<Emotion>& members() const noexcept { return members_; }
  [[nodiscard]] std::size_t size() const noexcept { return members_.size(); }
  [[nodiscard]] bool contains(Emotion e) const noexcept { return (mask_ & bit_of(e)) != 0; }

  [[nodiscard]] Polarity polarity() const noexcept {
    const std::uint8_t positive = bit_of(Emotion::Happy) | bit_of(Emotion::Surprise);
    if ((mask_ & ~positive) == 0) return Polarity::Positive;
    if ((mask_ & positive) == 0) return Polarity::Negative;
    return Polarity::Mixed;
  }

  /// Concatenated short codes in member order, e.g. "hsur".
  [[nodiscard]] std::string render() const {
    std::string out;
    for (auto e : members_) out += short_code(e);
    return out;
  }

  friend bool operator==(const EmotionGroup& a, const EmotionGroup& b) noexcept { return a.mask_ == b.mask_; }

private:
  static constexpr std::uint8_t bit_of(Emotion e) noexcept {
    return static_cast<std::uint8_t>(1U << static_cast<unsigned>(e));
  }

  std::vector<Emotion> members_;
  std::uint8_t mask_ = 0;
};

struct SchedulePattern {
  std::vector<EmotionGroup> groups;

  [[nodiscard]] std::size_t size() const noexcept { return groups.size(); }

  [[nodiscard]] std::vector<Polarity> polarities() const {
    std::vector<Polarity> out;
    out.reserve(groups.size());
    for (const auto& g : groups) out.push_back(g.polarity());
    return out;
  }

  friend bool operator==(const SchedulePattern&, const SchedulePattern&) = default;
};

/// Canonical form: lowercase concatenated codes per iteration, joined by "->".
inline std::string render_pattern(const SchedulePattern& pattern) {
  std::string out;
  for (std::size_t i = 0; i < pattern.groups.size(); ++i) {
    if (i != 0) out += "->";
    out += pattern.groups[i].render();
  }
  return out;
}

namespace detail {

// Longest match over {sur, h, s, f, d, a}; '/' and blanks separate codes.
inline EmotionGroup parse_group(std::string_view segment, std::size_t segment_number) {
  const std::string text = util::to_lower(segment);
  std::vector<Emotion> members;
  std::size_t i = 0;
  bool expect_code = true;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ' || c == '\t') {
      ++i;
      continue;
    }
    if (c == '/') {
      if (expect_code) throw ParseError("empty code around '/' in segment " + std::to_string(segment_number));
      expect_code = true;
      ++i;
      continue;
    }
    if (text.compare(i, 3, "sur") == 0) {
      members.push_back(Emotion::Surprise);
      i += 3;
    } else {
      switch (c) {
        case 'h': members.push_back(Emotion::Happy); break;
        case 's': members.push_back(Emotion::Sadness); break;
        case 'f': members.push_back(Emotion::Fear); break;
        case 'd': members.push_back(Emotion::Disgust); break;
        case 'a': members.push_back(Emotion::Anger); break;
        default: throw InvalidEmotionCode(segment_number, i, std::string(1, c));
      }
      ++i;
    }
    expect_code = false;
  }
  if (members.empty()) throw ParseError("empty segment " + std::to_string(segment_number));
  if (expect_code) throw ParseError("trailing '/' in segment " + std::to_string(segment_number));
  return EmotionGroup(std::move(members));
}

}  // namespace detail

/// Parses the short-code schedule notation. Iterations are separated by "->"
/// (or the Unicode arrow); within one iteration codes are concatenated or
/// '/'-separated. Case-insensitive.
inline SchedulePattern parse_pattern(std::string_view spec) {
  std::string text(util::trim(spec));
  if (text.empty()) throw ParseError("empty pattern spec");
  text = util::replace_all(std::move(text), "→", "->");
  SchedulePattern pattern;
  const auto segments = util::split(text, "->");
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto seg = util::trim(segments[i]);
    if (seg.empty()) throw ParseError("empty segment " + std::to_string(i + 1) + " in '" + std::string(spec) + "'");
    pattern.groups.push_back(detail::parse_group(seg, i + 1));
  }
  return pattern;
}

inline constexpr std::string_view kDefaultHeartPattern = "hsur->sa->hsur->sa";

/// G+ = {Happy, Surprise} alternating with G- = {Sadness, Anger} over four iterations.
inline SchedulePattern default_heart_pattern() { return parse_pattern(kDefaultHeartPattern); }

struct AffectiveCue {
  std::string id;
  Emotion emotion;
  std::string text;
};

namespace detail {

// Tokens that would tie a cue to one benchmark or to the prompt scaffold.
inline bool violates_denylist(std::string_view text, std::string* hit) {
  static const std::array<std::string_view, 10> needles = {
      "olympiad", "simpleqa", "humanity's last exam", "hle ", "\\boxed", "<question>",
      "</question>", "answer type is", "ground truth", "gold answer"};
  const std::string lower = util::to_lower(text) + " ";
  for (auto n : needles) {
    if (lower.find(n) != std::string::npos) {
      if (hit) *hit = std::string(util::trim(n));
      return true;
    }
  }
  return false;
}

inline std::string require_string(const nlohmann::json& rec, const char* key, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end() || !it->is_string()) {
    throw ParseError("line " + std::to_string(line) + ": missing string field '" + key + "'");
  }
  return it->get<std::string>();
}

inline nlohmann::json parse_record(const util::Line& line, std::string_view source) {
  nlohmann::json rec;
  try {
    rec = nlohmann::json::parse(line.text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string(source) + ":" + std::to_string(line.number) + ": " + e.what());
  }
  if (!rec.is_object()) throw ParseError(std::string(source) + ":" + std::to_string(line.number) + ": not an object");
  return rec;
}

}  // namespace detail

/// Immutable, validated set of 30 affective cues (5 per emotion).
class CueBank {
public:
  /// Validates and takes ownership; cue order within an emotion is input order.
  explicit CueBank(std::vector<AffectiveCue> cues) : cues_(std::move(cues)) {
    std::set<std::string> ids;
    for (const auto& cue : cues_) {
      if (!ids.insert(cue.id).second) throw DuplicateIdError("duplicate cue id '" + cue.id + "'");
    }
    for (const auto& cue : cues_) {
      if (util::trim(cue.text).empty()) throw BankInvariantError("cue '" + cue.id + "' has empty text");
      std::string hit;
      if (detail::violates_denylist(cue.text, &hit)) {
        throw BankInvariantError("cue '" + cue.id + "' is not task-agnostic (contains '" + hit + "')");
      }
      by_emotion_[static_cast<std::size_t>(cue.emotion)].push_back(static_cast<std::size_t>(&cue - cues_.data()));
    }
    for (auto e : kAllEmotions) {
      const auto n = by_emotion_[static_cast<std::size_t>(e)].size();
      if (n != kCuesPerEmotion) {
        throw BankInvariantError("emotion " + std::string(emotion_name(e)) + " has " + std::to_string(n) +
                                 " cues, expected " + std::to_string(kCuesPerEmotion));
      }
    }
    if (cues_.size() != kBankSize) {
      throw BankInvariantError("bank has " + std::to_string(cues_.size()) + " cues, expected " +
                               std::to_string(kBankSize));
    }
  }

  [[nodiscard]] const std::vector<AffectiveCue>& cues() const noexcept { return cues_; }

  [[nodiscard]] std::vector<AffectiveCue> cues_for(Emotion e) const {
    std::vector<AffectiveCue> out;
    for (auto idx : by_emotion_[static_cast<std::size_t>(e)]) out.push_back(cues_[idx]);
    return out;
  }

  [[nodiscard]] const AffectiveCue* find(std::string_view id) const {
    for (const auto& c : cues_) {
      if (c.id == id) return &c;
    }
    return nullptr;
  }

  /// Content hash over (id, emotion, text) in bank order.
  [[nodiscard]] std::string hash() const {
    std::string canon;
    for (const auto& c : cues_) {
      canon += c.id + '\x1f' + std::string(emotion_name(c.emotion)) + '\x1f' + c.text + '\x1e';
    }
    return util::content_hash(canon);
  }

private:
  std::vector<AffectiveCue> cues_;
  std::array<std::vector<std::size_t>, kAllEmotions.size()> by_emotion_{};
};

/// Parses line-delimited `{"id","emotion","text"}` records.
inline CueBank parse_bank(std::string_view content, std::string_view source = "<bank>") {
  const auto lines = util::nonblank_lines(content);
  if (lines.empty()) throw ParseError(std::string(source) + ": no cue records");
  std::vector<AffectiveCue> cues;
  for (const auto& line : lines) {
    const auto rec = detail::parse_record(line, source);
    AffectiveCue cue;
    cue.id = detail::require_string(rec, "id", line.number);
    const auto emotion = detail::require_string(rec, "emotion", line.number);
    auto parsed = parse_emotion(emotion);
    if (!parsed) throw ParseError("line " + std::to_string(line.number) + ": unknown emotion '" + emotion + "'");
    cue.emotion = *parsed;
    cue.text = detail::require_string(rec, "text", line.number);
    cues.push_back(std::move(cue));
  }
  return CueBank(std::move(cues));
}

inline CueBank load_bank(const std::filesystem::path& path) {
  return parse_bank(util::read_file(path), path.string());
}

/// Union of per-emotion pools, ordered by emotion declaration order then bank order.
inline std::vector<AffectiveCue> cues_for_group(const CueBank& bank, const EmotionGroup& group) {
  std::vector<AffectiveCue> out;
  for (auto e : kAllEmotions) {
    if (!group.contains(e)) continue;
    auto pool = bank.cues_for(e);
    out.insert(out.end(), pool.begin(), pool.end());
  }
  return out;
}

struct SelfReflectionPrompt {
  int sr_id;
  std::string id;
  std::string text;
};

inline constexpr std::size_t kSelfReflectionCount = 10;

struct BaselinePromptSet {
  std::string wait_text;
  std::string cot_preamble;
  std::vector<SelfReflectionPrompt> self_reflection;  // sorted by sr_id, 1..10

  [[nodiscard]] const SelfReflectionPrompt& reflection(int sr_id) const {
    for (const auto& p : self_reflection) {
      if (p.sr_id == sr_id) return p;
    }
    throw ConfigError("unknown self-reflection prompt id " + std::to_string(sr_id));
  }

  [[nodiscard]] std::string hash() const {
    std::string canon = wait_text + '\x1e' + cot_preamble + '\x1e';
    for (const auto& p : self_reflection) canon += std::to_string(p.sr_id) + '\x1f' + p.text + '\x1e';
    return util::content_hash(canon);
  }
};

/// Parses `{"id","kind","text","sr_id"?}` records with kind in {wait, cot, self_reflection}.
inline BaselinePromptSet parse_baselines(std::string_view content, std::string_view source = "<baselines>") {
  const auto lines = util::nonblank_lines(content);
  if (lines.empty()) throw ParseError(std::string(source) + ": no baseline records");
  BaselinePromptSet set;
  bool have_wait = false;
  bool have_cot = false;
  std::set<std::string> ids;
  for (const auto& line : lines) {
    const auto rec = detail::parse_record(line, source);
    const auto id = detail::require_string(rec, "id", line.number);
    if (!ids.insert(id).second) throw DuplicateIdError("duplicate baseline prompt id '" + id + "'");
    const auto kind = detail::require_string(rec, "kind", line.number);
    auto text = detail::require_string(rec, "text", line.number);
    if (util::trim(text).empty()) throw BankInvariantError("baseline prompt '" + id + "' has empty text");
    if (kind == "wait") {
      if (have_wait) throw BankInvariantError("more than one wait prompt");
      set.wait_text = std::move(text);
      have_wait = true;
    } else if (kind == "cot") {
      if (have_cot) throw BankInvariantError("more than one cot prompt");
      set.cot_preamble = std::move(text);
      have_cot = true;
    } else if (kind == "self_reflection") {
      auto it = rec.find("sr_id");
      if (it == rec.end() || !it->is_number_integer()) {
        throw ParseError("line " + std::to_string(line.number) + ": self_reflection entry needs integer sr_id");
      }
      set.self_reflection.push_back({it->get<int>(), id, std::move(text)});
    } else {
      throw ParseError("line " + std::to_string(line.number) + ": unknown kind '" + kind + "'");
    }
  }
  if (!have_wait || !have_cot) throw BankInvariantError("baseline set needs one wait and one cot prompt");
  std::sort(set.self_reflection.begin(), set.self_reflection.end(),
            [](const auto& a, const auto& b) { return a.sr_id < b.sr_id; });
  if (set.self_reflection.size() != kSelfReflectionCount) {
    throw BankInvariantError("expected " + std::to_string(kSelfReflectionCount) + " self-reflection prompts, got " +
                             std::to_string(set.self_reflection.size()));
  }
  for (std::size_t i = 0; i < set.self_reflection.size(); ++i) {
    if (set.self_reflection[i].sr_id != static_cast<int>(i) + 1) {
      throw BankInvariantError("self-reflection sr_id values must be exactly 1..10");
    }
  }
  return set;
}

inline BaselinePromptSet load_baselines(const std::filesystem::path& path) {
  return parse_baselines(util::read_file(path), path.string());
}

}  // namespace heart
