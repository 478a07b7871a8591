#pragma once

#include <atomic>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/prompts.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/rollout.hpp"

namespace searchrl {

struct PredictionScores {
  bool em = false;
  bool cem = false;
  double f1 = 0.0;
};

inline PredictionScores score_prediction(std::string_view pred, std::string_view gold,
                                         NormalizeOptions opts = {}) {
  return {exact_match(pred, gold, opts), cover_exact_match(pred, gold, opts), f1_score(pred, gold, opts)};
}

// ---------------------------------------------------------------------------
// LLM-as-judge

/// {prompt} -> {text}. Throws Error(JudgeUnavailable) or Error(NetworkError)
/// when the backend cannot answer.
class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual std::string complete(const std::string& prompt) const = 0;
};

/// Judge backed by a function of (question, gold, prediction), recovered
/// from the rendered prompt. Used as the deterministic stub.
class FunctionJudge : public JudgeClient {
 public:
  using Fn = std::function<std::string(const std::string&, const std::string&, const std::string&)>;
  explicit FunctionJudge(Fn fn) : fn_(std::move(fn)) {}

  std::string complete(const std::string& prompt) const override {
    auto field = [&](std::string_view key, std::string_view next) {
      auto b = prompt.find(key);
      if (b == std::string::npos) return std::string();
      b += key.size();
      auto e = next.empty() ? prompt.size() : prompt.find(next, b);
      if (e == std::string::npos) e = prompt.size();
      return std::string(trim(std::string_view(prompt).substr(b, e - b)));
    };
    return fn_(field("\nQuestion: ", "\n\nGolden Answer: "),
               field("\n\nGolden Answer: ", "\n\nPredicted Answer: "),
               field("\n\nPredicted Answer: ", ""));
  }

 private:
  Fn fn_;
};

inline std::shared_ptr<JudgeClient> cem_judge(NormalizeOptions opts = {}) {
  return std::make_shared<FunctionJudge>(
      [opts](const std::string&, const std::string& gold, const std::string& pred) {
        return cover_exact_match(pred, gold, opts) ? std::string("True") : std::string("False");
      });
}

/// True/False from the first word of the reply (case-insensitive, trailing
/// punctuation ignored); absent when the reply is anything else.
inline std::optional<bool> parse_judge_reply(std::string_view text) {
  const auto words = split_whitespace(text);
  if (words.empty()) return std::nullopt;
  std::string w;
  for (char c : words.front()) {
    if (is_alnum(c)) w.push_back(to_lower(c));
  }
  if (w == "true") return true;
  if (w == "false") return false;
  return std::nullopt;
}

/// One retry on a malformed reply; absent after that or when the judge is
/// unreachable.
inline std::optional<bool> judge(const JudgeClient& client, std::string_view question,
                                 std::string_view gold, std::string_view pred) {
  const std::string prompt = render_judge_prompt(question, gold, pred);
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      if (auto v = parse_judge_reply(client.complete(prompt))) return v;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::JudgeUnavailable || e.code() == ErrorCode::NetworkError) {
        return std::nullopt;
      }
      throw;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Benchmark

struct EvalRecord {
  std::string item_id;
  std::string source;
  std::string question;
  std::optional<std::string> prediction;
  std::string gold;
  bool em = false;
  bool cem = false;
  double f1 = 0.0;
  std::optional<bool> judge;
  std::size_t length = 0;
  std::size_t n_retrievals = 0;
  bool format_ok = false;
  bool failed = false;
  std::string error;
};

inline nlohmann::json to_json(const EvalRecord& r) {
  nlohmann::json j{{"id", r.item_id},
                   {"source", r.source},
                   {"question", r.question},
                   {"prediction", r.prediction ? nlohmann::json(*r.prediction) : nlohmann::json()},
                   {"gold", r.gold},
                   {"em", r.em},
                   {"cem", r.cem},
                   {"f1", r.f1},
                   {"judge", r.judge ? nlohmann::json(*r.judge) : nlohmann::json()},
                   {"length", r.length},
                   {"n_retrievals", r.n_retrievals},
                   {"format_ok", r.format_ok},
                   {"failed", r.failed}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

struct MetricAggregate {
  std::size_t count = 0;
  std::size_t judged = 0;
  std::size_t failed = 0;
  double acc_r = 0.0;  // CEM rate
  double acc_l = 0.0;  // judge rate over the judged subset
  double em = 0.0;
  double f1 = 0.0;
  double mean_retrievals = 0.0;
  double mean_length = 0.0;
};

struct MetricSuite {
  std::map<std::string, MetricAggregate> per_source;
  MetricAggregate overall;
};

inline MetricAggregate aggregate(const std::vector<const EvalRecord*>& rs) {
  MetricAggregate a;
  a.count = rs.size();
  std::size_t judged_true = 0;
  for (const auto* r : rs) {
    a.acc_r += r->cem ? 1.0 : 0.0;
    a.em += r->em ? 1.0 : 0.0;
    a.f1 += r->f1;
    a.mean_retrievals += static_cast<double>(r->n_retrievals);
    a.mean_length += static_cast<double>(r->length);
    if (r->failed) ++a.failed;
    if (r->judge) {
      ++a.judged;
      if (*r->judge) ++judged_true;
    }
  }
  if (a.count) {
    const double n = static_cast<double>(a.count);
    a.acc_r /= n;
    a.em /= n;
    a.f1 /= n;
    a.mean_retrievals /= n;
    a.mean_length /= n;
  }
  a.acc_l = a.judged ? static_cast<double>(judged_true) / static_cast<double>(a.judged) : 0.0;
  return a;
}

inline MetricSuite summarize(const std::vector<EvalRecord>& records) {
  MetricSuite s;
  std::map<std::string, std::vector<const EvalRecord*>> by_source;
  std::vector<const EvalRecord*> all;
  for (const auto& r : records) {
    by_source[r.source].push_back(&r);
    all.push_back(&r);
  }
  for (const auto& [src, rs] : by_source) s.per_source[src] = aggregate(rs);
  s.overall = aggregate(all);
  return s;
}

inline nlohmann::json to_json(const MetricAggregate& a) {
  return {{"count", a.count},   {"judged", a.judged}, {"failed", a.failed},
          {"acc_r", a.acc_r},   {"acc_l", a.acc_l},   {"em", a.em},
          {"f1", a.f1},         {"mean_retrievals", a.mean_retrievals},
          {"mean_length", a.mean_length}};
}

inline nlohmann::json to_json(const MetricSuite& s) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [src, a] : s.per_source) per[src] = to_json(a);
  return {{"overall", to_json(s.overall)}, {"per_source", per}};
}

inline std::string render_table(const MetricSuite& s) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %6s %7s %7s %7s %7s %6s %7s\n", "source", "n", "ACC_R",
                "ACC_L", "EM", "F1", "ret", "len");
  out << buf;
  auto row = [&](const std::string& name, const MetricAggregate& a) {
    std::snprintf(buf, sizeof buf, "%-12s %6zu %7.3f %7s %7.3f %7.3f %6.2f %7.1f\n", name.c_str(),
                  a.count, a.acc_r,
                  a.judged ? std::to_string(a.acc_l).substr(0, 5).c_str() : "-", a.em, a.f1,
                  a.mean_retrievals, a.mean_length);
    out << buf;
  };
  for (const auto& [src, a] : s.per_source) row(src.empty() ? "(none)" : src, a);
  row("overall", s.overall);
  return out.str();
}

struct EvalConfig {
  RolloutConfig rollout = [] {
    RolloutConfig c;
    c.temperature = 0.0;
    return c;
  }();
  NormalizeOptions normalize;
  FormatConfig format;
  std::uint64_t seed = 0;
};

struct BenchmarkResult {
  MetricSuite suite;
  std::vector<EvalRecord> records;
};

/// One greedy rollout per item (by default); item failures become records.
inline BenchmarkResult run_benchmark(const Policy& policy, const Retriever& env,
                                     const std::vector<QAItem>& items, const EvalConfig& cfg,
                                     const JudgeClient* judge_client = nullptr) {
  BenchmarkResult res;
  res.records.resize(items.size());
  auto run_one = [&](std::size_t i) {
    const auto& item = items[i];
    EvalRecord& r = res.records[i];
    r.item_id = item.id;
    r.source = item.source;
    r.question = item.question;
    r.gold = item.gold_answer;
    try {
      Rng rng(mix_seed(cfg.seed, i));
      const Episode ep = rollout(policy, nullptr, item, env, cfg.rollout, rng);
      r.prediction = ep.answer();
      r.length = ep.generated_count();
      r.n_retrievals = ep.n_retrievals;
      r.format_ok = validate_format(ep.transcript, ep.execution_log(), cfg.format,
                                    cfg.rollout.tags).ok;
      const auto s = score_prediction(r.prediction.value_or(""), item.gold_answer, cfg.normalize);
      r.em = r.prediction && s.em;
      r.cem = r.prediction && s.cem;
      r.f1 = r.prediction ? s.f1 : 0.0;
      if (judge_client) r.judge = judge(*judge_client, item.question, item.gold_answer,
                                        r.prediction.value_or(""));
    } catch (const std::exception& e) {
      r.failed = true;
      r.error = e.what();
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.rollout.threads, items.size()));
  if (threads <= 1) {
    for (std::size_t i = 0; i < items.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < items.size(); k = next++) run_one(k);
      });
    }
    for (auto& th : pool) th.join();
  }
  res.suite = summarize(res.records);
  return res;
}

}  // namespace searchrl
