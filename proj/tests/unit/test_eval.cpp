#include <gtest/gtest.h>

#include "searchrl/eval.hpp"
#include "searchrl/synthetic.hpp"
#include "searchrl/toy_policy.hpp"

using namespace searchrl;

namespace {

class ScriptedJudge : public JudgeClient {
 public:
  explicit ScriptedJudge(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string complete(const std::string&) const override {
    const auto r = replies_.at(std::min(calls_, replies_.size() - 1));
    ++calls_;
    if (r == "!down") throw Error(ErrorCode::JudgeUnavailable, "no judge");
    return r;
  }
  std::size_t calls() const { return calls_; }

 private:
  std::vector<std::string> replies_;
  mutable std::size_t calls_ = 0;
};

std::shared_ptr<SynthWorld> world() {
  static auto w = std::make_shared<SynthWorld>(generate_world(WorldConfig{}));
  return w;
}

void check_consistency(const BenchmarkResult& r) {
  for (const auto& rec : r.records) {
    if (rec.em) {
      EXPECT_TRUE(rec.cem) << rec.item_id;
    }
    EXPECT_GE(rec.f1, 0.0);
    EXPECT_LE(rec.f1, 1.0);
  }
  EXPECT_GE(r.suite.overall.f1, r.suite.overall.em);
  for (const auto& [src, a] : r.suite.per_source) {
    EXPECT_GE(a.f1, a.em) << src;
    for (double x : {a.acc_r, a.acc_l, a.em, a.f1}) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

}  // namespace

TEST(Score, Examples) {
  auto s = score_prediction("James Madison", "james madison");
  EXPECT_TRUE(s.em);
  EXPECT_TRUE(s.cem);
  EXPECT_EQ(s.f1, 1.0);
  s = score_prediction("James Madison was president in 1812", "james madison");
  EXPECT_FALSE(s.em);
  EXPECT_TRUE(s.cem);
  s = score_prediction("John Adams", "james madison");
  EXPECT_FALSE(s.em);
  EXPECT_FALSE(s.cem);
  EXPECT_EQ(s.f1, 0.0);
}

TEST(Score, ExactMatchImpliesCoverAndFullF1) {
  Rng rng(10);
  const std::vector<std::string> words{"The", "red", "fox", "a", "Fox", "dog,", "red."};
  for (int i = 0; i < 1000; ++i) {
    std::string p, g;
    for (std::size_t k = 0, n = uniform_index(rng, 4); k < n; ++k) p += words[uniform_index(rng, words.size())] + " ";
    for (std::size_t k = 0, n = 1 + uniform_index(rng, 3); k < n; ++k) g += words[uniform_index(rng, words.size())] + " ";
    const auto s = score_prediction(p, g);
    if (s.em) {
      EXPECT_TRUE(s.cem);
      EXPECT_EQ(s.f1, 1.0);
    }
  }
}

TEST(Judge, ReplyParsing) {
  EXPECT_EQ(parse_judge_reply("True"), true);
  EXPECT_EQ(parse_judge_reply("  false."), false);
  EXPECT_EQ(parse_judge_reply("TRUE, because"), true);
  EXPECT_EQ(parse_judge_reply("maybe"), std::nullopt);
  EXPECT_EQ(parse_judge_reply(""), std::nullopt);
}

TEST(Judge, RetriesOnceThenAbsent) {
  ScriptedJudge twice({"perhaps", "unsure"});
  EXPECT_EQ(judge(twice, "q", "g", "p"), std::nullopt);
  EXPECT_EQ(twice.calls(), 2u);
  ScriptedJudge recover({"hmm", "True"});
  EXPECT_EQ(judge(recover, "q", "g", "p"), true);
  ScriptedJudge down({"!down"});
  EXPECT_EQ(judge(down, "q", "g", "p"), std::nullopt);
  EXPECT_EQ(down.calls(), 1u);
}

TEST(Judge, FunctionJudgeSeesTheRenderedFields) {
  std::string seen;
  FunctionJudge fj([&](const std::string& q, const std::string& g, const std::string& p) {
    seen = q + "|" + g + "|" + p;
    return std::string("False");
  });
  EXPECT_EQ(judge(fj, "who is it?", "james madison", "John Adams"), false);
  EXPECT_EQ(seen, "who is it?|james madison|John Adams");
}

TEST(Benchmark, OracleScoresPerfectlyAndJudgeAgreesWithCem) {
  const auto w = world();
  LocalRetriever env(w->corpus());
  const OraclePolicy oracle(w);
  const auto judge_client = cem_judge();
  const auto r = run_benchmark(oracle, env, w->items(), EvalConfig{}, judge_client.get());
  EXPECT_EQ(r.suite.overall.count, 60u);
  EXPECT_EQ(r.suite.overall.acc_r, 1.0);
  EXPECT_EQ(r.suite.overall.f1, 1.0);
  EXPECT_EQ(r.suite.overall.em, 1.0);
  EXPECT_EQ(r.suite.overall.judged, 60u);
  EXPECT_EQ(r.suite.overall.acc_l, 1.0);
  EXPECT_EQ(r.suite.overall.mean_retrievals, 2.0);
  EXPECT_EQ(r.suite.per_source.size(), 2u);
  for (const auto& rec : r.records) EXPECT_EQ(rec.judge, rec.cem);
  check_consistency(r);
}

TEST(Benchmark, UniformToyPolicyIsNearZero) {
  const auto w = world();
  LocalRetriever env(w->corpus());
  const ToyPolicy uniform(w->toy_vocab(), ToyFeatureSpec::desk());
  EvalConfig cfg;
  cfg.rollout.temperature = 1.0;
  cfg.rollout.max_tokens = 64;
  const auto r = run_benchmark(uniform, env, w->items(), cfg);
  EXPECT_LE(r.suite.overall.acc_r, 0.05);
  check_consistency(r);
}

TEST(Benchmark, PartialJudgeUsesTheJudgedSubset) {
  const auto w = world();
  LocalRetriever env(w->corpus());
  const OraclePolicy oracle(w);
  FunctionJudge flaky([](const std::string& q, const std::string&, const std::string&) {
    return q.find("founder") != std::string::npos ? std::string("garbage") : std::string("True");
  });
  const auto r = run_benchmark(oracle, env, w->items(), EvalConfig{}, &flaky);
  EXPECT_LT(r.suite.overall.judged, r.suite.overall.count);
  EXPECT_GT(r.suite.overall.judged, 0u);
  EXPECT_EQ(r.suite.overall.acc_l, 1.0);
}

TEST(Benchmark, EmptyItemsGiveZeroCounts) {
  const auto w = world();
  LocalRetriever env(w->corpus());
  const OraclePolicy oracle(w);
  const auto r = run_benchmark(oracle, env, {}, EvalConfig{});
  EXPECT_EQ(r.suite.overall.count, 0u);
  EXPECT_EQ(r.suite.overall.acc_r, 0.0);
  EXPECT_TRUE(r.suite.per_source.empty());
  const auto j = to_json(r.suite);
  EXPECT_EQ(j.at("overall").at("count"), 0);
  EXPECT_NE(render_table(r.suite).find("overall"), std::string::npos);
}

TEST(Benchmark, ItemFailuresAreRecorded) {
  const auto w = world();
  LocalRetriever env(w->corpus());
  const OraclePolicy oracle(w);
  auto items = w->items();
  items.push_back({"stray", "a question the oracle never saw ?", "x", "hotpotqa"});
  const auto r = run_benchmark(oracle, env, items, EvalConfig{});
  EXPECT_TRUE(r.records.back().failed);
  EXPECT_FALSE(r.records.back().error.empty());
  EXPECT_EQ(r.suite.overall.failed, 1u);
  EXPECT_EQ(r.suite.overall.count, 61u);
}

TEST(Benchmark, SeededRunsAreReproducibleAcrossThreads) {
  const auto w = world();
  LocalRetriever env(w->corpus());
  ToyPolicy p(w->toy_vocab(), ToyFeatureSpec::desk());
  Rng rng(1);
  for (auto& x : p.parameters()) x = uniform01(rng) - 0.5;
  EvalConfig cfg;
  cfg.rollout.temperature = 1.0;
  cfg.rollout.max_tokens = 48;
  cfg.seed = 5;
  const auto a = run_benchmark(p, env, w->items(), cfg);
  cfg.rollout.threads = 4;
  const auto b = run_benchmark(p, env, w->items(), cfg);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(to_json(a.records[i]), to_json(b.records[i]));
  }
  EXPECT_EQ(to_json(a.suite), to_json(b.suite));
  check_consistency(a);
}
