#pragma once

#include <string>
#include <vector>

#include "searchrl/policy.hpp"
#include "searchrl/retrieval.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl::testing {

/// Replays a fixed text, one piece per token, regardless of the question.
/// Injected spans in the context are skipped when locating the next piece.
class ScriptedPolicy : public Policy {
 public:
  explicit ScriptedPolicy(std::string script) : pieces_(split_pieces(script)) {}

  std::vector<Token> tokenize(std::string_view text) const override {
    std::vector<Token> out;
    for (auto& p : split_pieces(text)) out.push_back({7, std::move(p)});
    return out;
  }

  Generation generate(const Context& ctx, const GenerateRequest& req, Rng&) const override {
    std::size_t k = generated(ctx);
    Generation g;
    std::string text;
    while (k < pieces_.size() && g.tokens.size() < req.max_tokens) {
      g.tokens.push_back({1, pieces_[k]});
      g.logprobs.push_back(-0.5);
      text += pieces_[k++];
      bool stop = false;
      for (const auto& s : req.stop) stop = stop || (!s.empty() && text.ends_with(s));
      if (stop) break;
    }
    return g;
  }

  std::vector<double> score(const Context&, std::span<const Token> cont) const override {
    return std::vector<double>(cont.size(), -0.25);
  }

  std::string descriptor() const override { return "scripted"; }

 private:
  static std::size_t generated(const Context& ctx) {
    std::size_t masked = 0;
    for (const auto& s : ctx.observed) masked += s.size();
    return ctx.response.size() - masked;
  }

  std::vector<std::string> pieces_;
};

/// Always fails like an unreachable backend.
class FailingRetriever : public Retriever {
 public:
  RetrievalResult retrieve(std::string_view) const override {
    throw Error(ErrorCode::NetworkError, "backend down");
  }
};

/// Fixed documents for every query.
class FixedRetriever : public Retriever {
 public:
  explicit FixedRetriever(std::vector<std::string> lines) : lines_(std::move(lines)) {}
  RetrievalResult retrieve(std::string_view q) const override {
    RetrievalResult r;
    r.query = std::string(q);
    r.lines = lines_;
    r.rendered = render_documents(lines_);
    return r;
  }

 private:
  std::vector<std::string> lines_;
};

}  // namespace searchrl::testing
