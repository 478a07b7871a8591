#pragma once

#include <atomic>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/prompts.hpp"
#include "searchrl/retrieval.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl {

struct RolloutConfig {
  double temperature = 1.0;
  std::size_t max_retrievals = 8;
  std::size_t max_tokens = 512;  // generated tokens; injected documents excluded
  std::size_t rollouts_per_question = 16;
  PromptTemplate prompt = PromptTemplate::Raw;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  TagTable tags;

  void validate() const {
    if (!(temperature >= 0.0)) throw Error(ErrorCode::InvalidConfig, "temperature must be >= 0");
    if (max_tokens == 0) throw Error(ErrorCode::InvalidConfig, "max_tokens must be > 0");
    if (rollouts_per_question == 0) {
      throw Error(ErrorCode::InvalidConfig, "rollouts_per_question must be > 0");
    }
    tags.validate();
  }
};

inline nlohmann::json to_json(const RolloutConfig& c) {
  return {{"temperature", c.temperature},
          {"max_retrievals", c.max_retrievals},
          {"max_tokens", c.max_tokens},
          {"rollouts_per_question", c.rollouts_per_question},
          {"prompt", to_string(c.prompt)},
          {"seed", c.seed},
          {"threads", c.threads}};
}

inline void from_json_into(const nlohmann::json& j, RolloutConfig& c) {
  c.temperature = j.value("temperature", c.temperature);
  c.max_retrievals = j.value("max_retrievals", c.max_retrievals);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.rollouts_per_question = j.value("rollouts_per_question", c.rollouts_per_question);
  if (j.contains("prompt")) c.prompt = prompt_template_from_string(j.at("prompt").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
}

/// Runs one rollout: sample until a closing query tag, retrieve, inject the
/// documents, resume; stop at the first closing answer tag or when the
/// generation budget runs out. Throws Error(PolicyUnavailable) when the policy
/// cannot be reached. `ref` may be null, in which case ref_logprobs are empty.
inline Episode rollout(const Policy& policy, const Policy* ref, const QAItem& item,
                       const Retriever& env, const RolloutConfig& cfg, Rng& rng) {
  if (is_blank(item.question)) throw Error(ErrorCode::InvalidArgument, "empty question");
  const TagTable& tags = cfg.tags;
  Episode ep;
  ep.item_id = item.id;
  ep.question = item.question;
  ep.prompt = render_prompt(cfg.prompt, item.question);
  StreamParser parser(tags);
  std::size_t generated = 0;
  bool done = false;

  GenerateRequest req;
  req.temperature = cfg.temperature;
  req.stop = {tags.query_close, tags.answer_close};

  while (!done && generated < cfg.max_tokens) {
    req.max_tokens = cfg.max_tokens - generated;
    const Context ctx{ep.question, ep.prompt, ep.tokens, ep.mask_spans, ep.observations};
    Generation gen = policy.generate(ctx, req, rng);
    if (gen.tokens.size() != gen.logprobs.size()) {
      throw Error(ErrorCode::LengthMismatch, "policy returned mismatched tokens and logprobs");
    }
    if (gen.tokens.empty()) break;
    for (std::size_t i = 0; i < gen.tokens.size() && generated < cfg.max_tokens; ++i) {
      ep.tokens.push_back(std::move(gen.tokens[i]));
      ep.policy_logprobs.push_back(gen.logprobs[i]);
      ++generated;
      auto step = parser.feed(ep.tokens.back().piece);
      if (step.answer_closed || parser.answer_closed()) {
        done = true;
        break;
      }
      if (step.halt_queries.empty()) continue;
      for (const auto& query : step.halt_queries) {
        if (ep.n_retrievals >= cfg.max_retrievals) {
          ep.flags.budget_exhausted = true;
          continue;
        }
        RetrievalResult res;
        try {
          res = env.retrieve(query);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::NetworkError && e.code() != ErrorCode::SummarizerError) throw;
          res = {};
          res.query = query;
          res.failed = true;
          res.rendered = render_documents({}, tags);
        }
        if (res.failed) ep.flags.retrieval_failed = true;
        auto docs = policy.tokenize(res.rendered);
        const TokenSpan span{ep.tokens.size(), ep.tokens.size() + docs.size()};
        auto pieces = pieces_of(docs);
        for (auto& t : docs) {
          ep.tokens.push_back(std::move(t));
          ep.policy_logprobs.push_back(0.0);
        }
        parser.feed_injected(pieces);
        ep.mask_spans.push_back(span);
        ep.observations.push_back(join(res.lines, "\n"));
        ep.executed_queries.push_back(query);
        ++ep.n_retrievals;
      }
      // Anything sampled past the closing query tag is discarded.
      break;
    }
  }
  parser.finish();
  ep.transcript = parser.transcript();
  ep.flags.truncated = !ep.transcript.complete;

  if (ref) {
    ep.ref_logprobs = ref->score(ep.scoring_context(), ep.tokens);
    if (ep.ref_logprobs.size() != ep.tokens.size()) {
      throw Error(ErrorCode::LengthMismatch, "reference score length differs from token count");
    }
    for (const auto& s : ep.mask_spans) {
      for (std::size_t i = s.begin; i < s.end; ++i) ep.ref_logprobs[i] = 0.0;
    }
  }
  return ep;
}

struct RolloutBatch {
  std::vector<Episode> episodes;
  std::vector<std::vector<std::size_t>> groups;  // episode indices per question
  std::vector<std::size_t> item_of;              // question index per episode
};

/// rollouts_per_question episodes per item. Episode k of the batch draws from
/// its own stream mix_seed(seed, k), so results do not depend on threading.
/// Per-episode errors become failed episodes.
inline RolloutBatch rollout_batch(const Policy& policy, const Policy* ref,
                                  const std::vector<QAItem>& items, const Retriever& env,
                                  const RolloutConfig& cfg, std::uint64_t seed) {
  if (items.empty()) throw Error(ErrorCode::InvalidArgument, "rollout_batch needs questions");
  const std::size_t per = cfg.rollouts_per_question;
  const std::size_t total = items.size() * per;
  RolloutBatch b;
  b.episodes.resize(total);
  b.groups.resize(items.size());
  b.item_of.resize(total);
  for (std::size_t q = 0; q < items.size(); ++q) {
    for (std::size_t r = 0; r < per; ++r) {
      b.groups[q].push_back(q * per + r);
      b.item_of[q * per + r] = q;
    }
  }
  auto run_one = [&](std::size_t k) {
    const QAItem& item = items[b.item_of[k]];
    Rng rng(mix_seed(seed, k));
    try {
      b.episodes[k] = rollout(policy, ref, item, env, cfg, rng);
    } catch (const std::exception& e) {
      Episode ep;
      ep.item_id = item.id;
      ep.question = item.question;
      ep.prompt = render_prompt(cfg.prompt, item.question);
      ep.flags.failed = true;
      ep.error = e.what();
      b.episodes[k] = std::move(ep);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, total));
  if (threads == 1) {
    for (std::size_t k = 0; k < total; ++k) run_one(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < total; k = next++) run_one(k);
      });
    }
    for (auto& th : pool) th.join();
  }
  return b;
}

}  // namespace searchrl
