#pragma once

// JSON-over-HTTP adapters: an external policy (/sample, /score), a policy
// server exposing any in-process Policy with the same contract, and thin
// clients for web search, summarization and the LLM judge.

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/eval.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/retrieval.hpp"

namespace searchrl {

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;  // "/..." ("/" when empty)

  static Endpoint parse(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw Error(ErrorCode::InvalidConfig, "bad URL '" + url + "'");
    const auto slash = url.find('/', scheme + 3);
    Endpoint e;
    e.base = url.substr(0, slash);
    e.path = slash == std::string::npos ? "/" : url.substr(slash);
    return e;
  }

  std::string join(std::string_view suffix) const {
    std::string p = path;
    if (!p.empty() && p.back() == '/') p.pop_back();
    return p + std::string(suffix);
  }
};

inline std::optional<std::string> env_var(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

namespace detail {

struct HttpFailure {
  bool unreachable = false;  // connection error or 5xx
  std::string message;
};

/// POSTs JSON; returns the parsed reply or the failure.
inline std::variant<nlohmann::json, HttpFailure> post_json(const Endpoint& ep, const std::string& path,
                                                           const nlohmann::json& body,
                                                           const std::string& token,
                                                           double timeout_s) {
  httplib::Client cli(ep.base);
  const auto secs = static_cast<time_t>(timeout_s);
  const auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res) return HttpFailure{true, ep.base + path + ": " + httplib::to_string(res.error())};
  if (res->status >= 500) {
    return HttpFailure{true, ep.base + path + ": HTTP " + std::to_string(res->status)};
  }
  if (res->status != 200) {
    return HttpFailure{false, ep.base + path + ": HTTP " + std::to_string(res->status) + " " + res->body};
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    return HttpFailure{false, ep.base + path + ": malformed reply: " + e.what()};
  }
}

inline nlohmann::json context_fields(const Context& ctx) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : ctx.observed) spans.push_back({s.begin, s.end});
  std::vector<TokenId> ids;
  for (const auto& t : ctx.response) ids.push_back(t.id);
  return {{"context", std::string(ctx.prompt) + concat_pieces(ctx.response)},
          {"question", std::string(ctx.question)},
          {"prompt", std::string(ctx.prompt)},
          {"response", pieces_of(ctx.response)},
          {"response_ids", ids},
          {"observed", spans},
          {"observations", std::vector<std::string>(ctx.observations.begin(), ctx.observations.end())}};
}

}  // namespace detail

/// A policy behind the /sample and /score wire protocol. Besides the
/// required fields, requests carry the structured context (question, prompt,
/// response pieces/ids, observed spans) so a server can rebuild it exactly.
class HttpPolicy : public Policy {
 public:
  explicit HttpPolicy(std::string url, std::string token = {}, double timeout_s = 30.0)
      : url_(std::move(url)), ep_(Endpoint::parse(url_)), token_(std::move(token)), timeout_(timeout_s) {}

  std::vector<Token> tokenize(std::string_view text) const override {
    std::vector<Token> out;
    for (auto& p : split_pieces(text)) out.push_back({-1, std::move(p)});
    return out;
  }

  std::string descriptor() const override { return "http:" + url_; }

  Generation generate(const Context& ctx, const GenerateRequest& req, Rng& rng) const override {
    auto body = detail::context_fields(ctx);
    body["temperature"] = req.temperature;
    body["stop"] = req.stop;
    body["max_tokens"] = req.max_tokens;
    body["seed"] = rng();
    const auto j = call("/sample", body);
    Generation g;
    try {
      const auto ids = j.at("tokens").get<std::vector<TokenId>>();
      g.logprobs = j.at("logprobs").get<std::vector<double>>();
      const std::string text = j.value("text", std::string{});
      std::vector<std::string> pieces;
      if (j.contains("pieces")) {
        pieces = j.at("pieces").get<std::vector<std::string>>();
      } else {
        pieces = split_pieces(text);
        if (pieces.size() != ids.size()) {
          // Without per-token text the first token carries it all.
          pieces.assign(ids.size(), std::string{});
          if (!ids.empty()) pieces[0] = text;
        }
      }
      if (pieces.size() != ids.size() || g.logprobs.size() != ids.size()) {
        throw Error(ErrorCode::LengthMismatch, "/sample reply has mismatched lengths");
      }
      for (std::size_t i = 0; i < ids.size(); ++i) g.tokens.push_back({ids[i], pieces[i]});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, std::string("/sample reply: ") + e.what());
    }
    return g;
  }

  std::vector<double> score(const Context& ctx, std::span<const Token> continuation) const override {
    auto body = detail::context_fields(ctx);
    std::vector<TokenId> ids;
    for (const auto& t : continuation) ids.push_back(t.id);
    body["continuation"] = pieces_of(continuation);
    body["continuation_ids"] = ids;
    const auto j = call("/score", body);
    std::vector<double> out;
    try {
      out = j.at("logprobs").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, std::string("/score reply: ") + e.what());
    }
    if (out.size() != continuation.size()) {
      throw Error(ErrorCode::LengthMismatch, "/score returned " + std::to_string(out.size()) +
                                                 " log-probs for " + std::to_string(continuation.size()) +
                                                 " tokens");
    }
    return out;
  }

 private:
  nlohmann::json call(const std::string& route, const nlohmann::json& body) const {
    auto r = detail::post_json(ep_, ep_.join(route), body, token_, timeout_);
    if (auto* f = std::get_if<detail::HttpFailure>(&r)) {
      throw Error(f->unreachable ? ErrorCode::PolicyUnavailable : ErrorCode::InvalidArgument, f->message);
    }
    return std::get<nlohmann::json>(std::move(r));
  }

  std::string url_;
  Endpoint ep_;
  std::string token_;
  double timeout_;
};

/// Serves an in-process Policy over /sample and /score. Stateless per
/// request; sampling is seeded by the request's "seed" field (default 0).
class PolicyServer {
 public:
  explicit PolicyServer(const Policy& policy, std::size_t threads = 8) : policy_(policy) {
    svr_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    svr_.Post("/sample", [this](const httplib::Request& rq, httplib::Response& rs) {
      handle(rq, rs, true);
    });
    svr_.Post("/score", [this](const httplib::Request& rq, httplib::Response& rs) {
      handle(rq, rs, false);
    });
  }

  ~PolicyServer() { stop(); }
  PolicyServer(const PolicyServer&) = delete;
  PolicyServer& operator=(const PolicyServer&) = delete;

  /// Binds (port 0 picks a free one) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? svr_.bind_to_any_port(host) : (svr_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    host_ = host;
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      svr_.stop();
      thread_.join();
    }
  }

  std::string url() const { return "http://" + host_ + ":" + std::to_string(port_); }

 private:
  struct Rebuilt {
    std::string question;
    std::string prompt;
    std::vector<Token> response;
    std::vector<TokenSpan> observed;
    std::vector<std::string> observations;
    Context context() const { return {question, prompt, response, observed, observations}; }
  };

  std::vector<Token> tokens_of(const nlohmann::json& pieces, const nlohmann::json* ids) const {
    std::vector<Token> out;
    const auto ps = pieces.get<std::vector<std::string>>();
    std::vector<TokenId> is;
    if (ids) is = ids->get<std::vector<TokenId>>();
    if (ids && is.size() != ps.size()) throw Error(ErrorCode::InvalidArgument, "ids and pieces differ in length");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      TokenId id = ids ? is[i] : -1;
      if (!ids) {
        auto t = policy_.tokenize(ps[i]);
        if (!t.empty()) id = t.front().id;
      }
      out.push_back({id, ps[i]});
    }
    return out;
  }

  Rebuilt rebuild(const nlohmann::json& j) const {
    Rebuilt r;
    const std::string context = j.at("context").get<std::string>();
    r.question = j.value("question", context);
    r.prompt = j.value("prompt", context);
    if (j.contains("response")) {
      r.response = tokens_of(j.at("response"), j.contains("response_ids") ? &j.at("response_ids") : nullptr);
    } else if (context.size() > r.prompt.size()) {
      r.response = policy_.tokenize(std::string_view(context).substr(r.prompt.size()));
    }
    if (j.contains("observed")) {
      for (const auto& s : j.at("observed")) r.observed.push_back({s.at(0), s.at(1)});
    }
    r.observations = j.value("observations", std::vector<std::string>{});
    return r;
  }

  void handle(const httplib::Request& rq, httplib::Response& rs, bool sample) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(rq.body);
    } catch (const nlohmann::json::exception& e) {
      reply_error(rs, 400, std::string("malformed JSON: ") + e.what());
      return;
    }
    try {
      if (!j.is_object() || !j.contains("context")) throw Error(ErrorCode::InvalidArgument, "missing context");
      const Rebuilt r = rebuild(j);
      nlohmann::json out;
      if (sample) {
        GenerateRequest req;
        req.temperature = j.value("temperature", 1.0);
        req.stop = j.value("stop", std::vector<std::string>{});
        req.max_tokens = j.value("max_tokens", std::size_t{1});
        Rng rng(j.value("seed", std::uint64_t{0}));
        const auto g = policy_.generate(r.context(), req, rng);
        std::vector<TokenId> ids;
        for (const auto& t : g.tokens) ids.push_back(t.id);
        out = {{"tokens", ids}, {"text", concat_pieces(g.tokens)}, {"pieces", pieces_of(g.tokens)},
               {"logprobs", g.logprobs}};
      } else {
        if (!j.contains("continuation")) throw Error(ErrorCode::InvalidArgument, "missing continuation");
        std::vector<Token> cont;
        const auto& c = j.at("continuation");
        if (c.is_string()) {
          cont = policy_.tokenize(c.get<std::string>());
        } else {
          cont = tokens_of(c, j.contains("continuation_ids") ? &j.at("continuation_ids") : nullptr);
        }
        out = {{"logprobs", policy_.score(r.context(), cont)}};
      }
      rs.set_content(out.dump(), "application/json");
    } catch (const nlohmann::json::exception& e) {
      reply_error(rs, 400, e.what());
    } catch (const Error& e) {
      reply_error(rs, e.code() == ErrorCode::InvalidArgument || e.code() == ErrorCode::UnknownToken ? 400 : 500,
                  std::string(to_string(e.code())) + ": " + e.what());
    }
  }

  static void reply_error(httplib::Response& rs, int status, const std::string& msg) {
    rs.status = status;
    rs.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  }

  const Policy& policy_;
  httplib::Server svr_;
  std::thread thread_;
  std::string host_ = "127.0.0.1";
  int port_ = -1;
};

/// POST {query, max_results} -> {pages: [{url, title, content}]}.
class HttpSearchClient : public SearchClient {
 public:
  explicit HttpSearchClient(std::string url, std::string token = {}, double timeout_s = 10.0)
      : ep_(Endpoint::parse(url)), token_(std::move(token)), timeout_(timeout_s) {}

  SearchResponse search(const SearchRequest& req) const override {
    auto r = detail::post_json(ep_, ep_.path, {{"query", req.query}, {"max_results", req.max_results}},
                               token_, timeout_);
    if (auto* f = std::get_if<detail::HttpFailure>(&r)) throw Error(ErrorCode::NetworkError, f->message);
    SearchResponse out;
    try {
      for (const auto& p : std::get<nlohmann::json>(r).at("pages")) out.pages.push_back(web_page_from_json(p));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::NetworkError, std::string("malformed search reply: ") + e.what());
    }
    return out;
  }

 private:
  Endpoint ep_;
  std::string token_;
  double timeout_;
};

/// POST {query, content} -> {summary}.
class HttpSummarizer : public Summarizer {
 public:
  explicit HttpSummarizer(std::string url, std::string token = {}, double timeout_s = 30.0)
      : ep_(Endpoint::parse(url)), token_(std::move(token)), timeout_(timeout_s) {}

  std::string summarize(const SummaryRequest& req) const override {
    auto r = detail::post_json(ep_, ep_.path, {{"query", req.query}, {"content", req.content}}, token_,
                               timeout_);
    if (auto* f = std::get_if<detail::HttpFailure>(&r)) throw Error(ErrorCode::SummarizerError, f->message);
    try {
      return std::get<nlohmann::json>(r).at("summary").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::SummarizerError, std::string("malformed summary reply: ") + e.what());
    }
  }

 private:
  Endpoint ep_;
  std::string token_;
  double timeout_;
};

/// POST {prompt} -> {text}.
class HttpJudgeClient : public JudgeClient {
 public:
  explicit HttpJudgeClient(std::string url, std::string token = {}, double timeout_s = 30.0)
      : ep_(Endpoint::parse(url)), token_(std::move(token)), timeout_(timeout_s) {}

  /// From SEARCHRL_JUDGE_URL / SEARCHRL_JUDGE_TOKEN; null when unset.
  static std::shared_ptr<HttpJudgeClient> from_env() {
    auto url = env_var("SEARCHRL_JUDGE_URL");
    if (!url) return nullptr;
    return std::make_shared<HttpJudgeClient>(*url, env_var("SEARCHRL_JUDGE_TOKEN").value_or(""));
  }

  std::string complete(const std::string& prompt) const override {
    auto r = detail::post_json(ep_, ep_.path, {{"prompt", prompt}}, token_, timeout_);
    if (auto* f = std::get_if<detail::HttpFailure>(&r)) throw Error(ErrorCode::JudgeUnavailable, f->message);
    const auto& j = std::get<nlohmann::json>(r);
    if (!j.is_object() || !j.contains("text") || !j.at("text").is_string()) return {};
    return j.at("text").get<std::string>();
  }

 private:
  Endpoint ep_;
  std::string token_;
  double timeout_;
};

}  // namespace searchrl
