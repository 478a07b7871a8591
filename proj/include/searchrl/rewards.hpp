#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl {

enum class StageId { Stage1, Stage2 };
enum class AnswerVariant { F1, EM, CEM };

inline const char* to_string(StageId s) { return s == StageId::Stage1 ? "stage1" : "stage2"; }

inline const char* to_string(AnswerVariant v) {
  switch (v) {
    case AnswerVariant::F1: return "f1";
    case AnswerVariant::EM: return "em";
    case AnswerVariant::CEM: return "cem";
  }
  return "f1";
}

inline AnswerVariant answer_variant_from_string(std::string_view s) {
  if (s == "f1") return AnswerVariant::F1;
  if (s == "em") return AnswerVariant::EM;
  if (s == "cem") return AnswerVariant::CEM;
  throw Error(ErrorCode::InvalidConfig, "unknown answer variant '" + std::string(s) + "'");
}

struct NormalizeOptions {
  bool strip_articles = true;
};

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace. Idempotent.
inline std::string normalize_answer(std::string_view s, NormalizeOptions opts = {}) {
  std::string lowered;
  lowered.reserve(s.size());
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::ispunct(u)) continue;
    lowered.push_back(to_lower(c));
  }
  std::vector<std::string> kept;
  for (auto& w : split_whitespace(lowered)) {
    if (opts.strip_articles && (w == "a" || w == "an" || w == "the")) continue;
    kept.push_back(std::move(w));
  }
  return join(kept, " ");
}

inline std::vector<std::string> answer_words(std::string_view s, NormalizeOptions opts = {}) {
  return split_whitespace(normalize_answer(s, opts));
}

/// Multiset intersection size.
inline std::size_t intersection_count(const std::vector<std::string>& pred,
                                      const std::vector<std::string>& gold) {
  std::map<std::string_view, std::size_t> counts;
  for (const auto& w : gold) ++counts[w];
  std::size_t in = 0;
  for (const auto& w : pred) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++in;
    }
  }
  return in;
}

struct AnswerCounts {
  std::size_t pn = 0;
  std::size_t rn = 0;
  std::size_t in = 0;

  bool operator==(const AnswerCounts&) const = default;
};

inline AnswerCounts answer_counts(std::string_view pred, std::string_view gold,
                                  NormalizeOptions opts = {}) {
  const auto p = answer_words(pred, opts);
  const auto g = answer_words(gold, opts);
  return {p.size(), g.size(), intersection_count(p, g)};
}

/// 2*IN/(PN+RN); two empty sides count as a perfect match.
inline double f1_from_counts(const AnswerCounts& c) {
  if (c.pn + c.rn == 0) return 1.0;
  return 2.0 * static_cast<double>(c.in) / static_cast<double>(c.pn + c.rn);
}

inline double f1_score(std::string_view pred, std::string_view gold, NormalizeOptions opts = {}) {
  return f1_from_counts(answer_counts(pred, gold, opts));
}

inline bool exact_match(std::string_view pred, std::string_view gold, NormalizeOptions opts = {}) {
  return normalize_answer(pred, opts) == normalize_answer(gold, opts);
}

/// Cover exact match: normalized gold is a substring of normalized prediction.
inline bool cover_exact_match(std::string_view pred, std::string_view gold,
                              NormalizeOptions opts = {}) {
  return normalize_answer(pred, opts).find(normalize_answer(gold, opts)) != std::string::npos;
}

struct RewardBreakdown {
  StageId stage = StageId::Stage1;
  double retrieval = 0.0;
  double format = 0.0;
  double answer = 0.0;
  double total = 0.0;
  FormatVerdict verdict;
  AnswerCounts counts;
};

inline RewardBreakdown stage1_reward(std::size_t n_retrievals, const FormatVerdict& verdict) {
  RewardBreakdown r;
  r.stage = StageId::Stage1;
  r.verdict = verdict;
  r.retrieval = n_retrievals >= 1 ? 0.5 : 0.0;
  r.format = verdict.ok ? 0.5 : 0.0;
  r.total = r.retrieval + r.format;
  return r;
}

inline RewardBreakdown stage2_reward(const std::optional<std::string>& pred, std::string_view gold,
                                     const FormatVerdict& verdict,
                                     AnswerVariant variant = AnswerVariant::F1,
                                     NormalizeOptions opts = {}) {
  RewardBreakdown r;
  r.stage = StageId::Stage2;
  r.verdict = verdict;
  const std::string p = pred.value_or("");
  r.counts = answer_counts(p, gold, opts);
  switch (variant) {
    case AnswerVariant::F1:
      r.answer = f1_from_counts(r.counts);
      break;
    case AnswerVariant::EM:
      r.answer = pred && exact_match(p, gold, opts) ? 1.0 : -1.0;
      break;
    case AnswerVariant::CEM:
      r.answer = pred && cover_exact_match(p, gold, opts) ? 1.0 : -1.0;
      break;
  }
  if (!pred) r.answer = variant == AnswerVariant::F1 ? 0.0 : -1.0;
  r.format = verdict.ok ? 0.0 : -2.0;
  r.total = r.answer + r.format;
  return r;
}

struct RewardConfig {
  StageId stage = StageId::Stage1;
  AnswerVariant variant = AnswerVariant::F1;
  NormalizeOptions normalize;
  FormatConfig format;
  TagTable tags;
};

inline FormatVerdict episode_verdict(const Episode& ep, const RewardConfig& cfg = {}) {
  return validate_format(ep.transcript, ep.execution_log(), cfg.format, cfg.tags);
}

inline RewardBreakdown stage1_reward(const Episode& ep, const RewardConfig& cfg = {}) {
  return stage1_reward(ep.n_retrievals, episode_verdict(ep, cfg));
}

inline RewardBreakdown stage2_reward(const Episode& ep, std::string_view gold,
                                     const RewardConfig& cfg = {}) {
  return stage2_reward(ep.answer(), gold, episode_verdict(ep, cfg), cfg.variant, cfg.normalize);
}

inline RewardBreakdown episode_reward(const Episode& ep, std::string_view gold,
                                      const RewardConfig& cfg) {
  return cfg.stage == StageId::Stage1 ? stage1_reward(ep, cfg) : stage2_reward(ep, gold, cfg);
}

inline nlohmann::json to_json(const RewardConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"strip_articles", c.normalize.strip_articles},
          {"answer_word_limit", c.format.answer_word_limit},
          {"max_ngram_repeats", c.format.max_ngram_repeats},
          {"require_think_content", c.format.require_think_content},
          {"allow_untagged_text", c.format.allow_untagged_text}};
}

inline void from_json_into(const nlohmann::json& j, RewardConfig& c) {
  if (j.contains("variant")) c.variant = answer_variant_from_string(j.at("variant").get<std::string>());
  c.normalize.strip_articles = j.value("strip_articles", c.normalize.strip_articles);
  c.format.answer_word_limit = j.value("answer_word_limit", c.format.answer_word_limit);
  c.format.max_ngram_repeats = j.value("max_ngram_repeats", c.format.max_ngram_repeats);
  c.format.require_think_content = j.value("require_think_content", c.format.require_think_content);
  c.format.allow_untagged_text = j.value("allow_untagged_text", c.format.allow_untagged_text);
}

inline nlohmann::json to_json(const FormatVerdict& v) {
  nlohmann::json codes = nlohmann::json::array();
  for (auto c : v.violations) codes.push_back(to_string(c));
  return {{"ok", v.ok}, {"violations", codes}};
}

inline nlohmann::json to_json(const RewardBreakdown& r) {
  return {{"stage", to_string(r.stage)},
          {"retrieval", r.retrieval},
          {"format", r.format},
          {"answer", r.answer},
          {"total", r.total},
          {"verdict", to_json(r.verdict)},
          {"PN", r.counts.pn},
          {"RN", r.counts.rn},
          {"IN", r.counts.in}};
}

}  // namespace searchrl
