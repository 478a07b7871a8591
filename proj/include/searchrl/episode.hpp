#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl {

struct QAItem {
  std::string id;
  std::string question;
  std::string gold_answer;
  std::string source;

  bool operator==(const QAItem&) const = default;
};

inline nlohmann::json to_json(const QAItem& q) {
  return {{"id", q.id}, {"question", q.question}, {"answer", q.gold_answer},
          {"source", q.source}};
}

inline QAItem qa_item_from_json(const nlohmann::json& j) {
  QAItem q{j.at("id").get<std::string>(), j.at("question").get<std::string>(),
           j.at("answer").get<std::string>(), j.value("source", std::string{})};
  if (is_blank(q.question) || is_blank(q.gold_answer)) {
    throw Error(ErrorCode::InvalidArgument, "QA item '" + q.id + "' has an empty question or answer");
  }
  return q;
}

inline std::vector<QAItem> read_qa(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<QAItem> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (is_blank(line)) continue;
    try {
      out.push_back(qa_item_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline void write_qa(const std::string& path, const std::vector<QAItem>& items) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  for (const auto& q : items) out << to_json(q).dump() << '\n';
}

struct EpisodeFlags {
  bool budget_exhausted = false;
  bool retrieval_failed = false;
  bool truncated = false;
  bool failed = false;  // aborted (policy unavailable or other error)

  bool operator==(const EpisodeFlags&) const = default;
};

/// Token-level record of one rollout.
struct Episode {
  std::string item_id;
  std::string question;
  std::string prompt;
  std::vector<Token> tokens;
  std::vector<double> policy_logprobs;
  std::vector<double> ref_logprobs;
  std::vector<TokenSpan> mask_spans;          // injected documents, ascending
  std::vector<std::string> observations;      // inner document text per span
  std::vector<std::string> executed_queries;  // one per injection
  std::size_t n_retrievals = 0;
  Transcript transcript;
  EpisodeFlags flags;
  std::string error;

  std::string text() const { return concat_pieces(tokens); }

  ExecutionLog execution_log() const { return {executed_queries}; }

  /// true at generated (loss-bearing) positions.
  std::vector<bool> loss_mask() const {
    std::vector<bool> m(tokens.size(), true);
    for (const auto& s : mask_spans) {
      for (std::size_t i = s.begin; i < s.end && i < m.size(); ++i) m[i] = false;
    }
    return m;
  }

  std::size_t generated_count() const {
    std::size_t masked = 0;
    for (const auto& s : mask_spans) masked += s.size();
    return tokens.size() - masked;
  }

  /// Context for rescoring the whole response as a continuation.
  Context scoring_context() const {
    return {question, prompt, {}, mask_spans, observations};
  }

  std::optional<std::string> answer() const { return extract_answer(transcript); }
};

inline nlohmann::json to_json(const EpisodeFlags& f) {
  nlohmann::json j = nlohmann::json::array();
  if (f.budget_exhausted) j.push_back("budget_exhausted");
  if (f.retrieval_failed) j.push_back("retrieval_failed");
  if (f.truncated) j.push_back("truncated");
  if (f.failed) j.push_back("failed");
  return j;
}

inline nlohmann::json to_json(const Episode& e) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : e.mask_spans) spans.push_back({s.begin, s.end});
  std::vector<TokenId> ids;
  for (const auto& t : e.tokens) ids.push_back(t.id);
  nlohmann::json j{{"item_id", e.item_id},
                   {"question", e.question},
                   {"text", e.text()},
                   {"token_ids", ids},
                   {"token_pieces", pieces_of(e.tokens)},
                   {"policy_logprobs", e.policy_logprobs},
                   {"ref_logprobs", e.ref_logprobs},
                   {"mask_spans", spans},
                   {"executed_queries", e.executed_queries},
                   {"n_retrievals", e.n_retrievals},
                   {"flags", to_json(e.flags)},
                   {"transcript", to_json(e.transcript)}};
  if (!e.error.empty()) j["error"] = e.error;
  return j;
}

}  // namespace searchrl
