// Acceptance gates. One PASS/FAIL line per gate; exit status 1 if any fails.
//
//   acceptance                 all gates
//   acceptance NAME [NAME...]  only the named gates

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "searchrl/searchrl.hpp"

using namespace searchrl;

namespace {

struct Gate {
  std::string name;
  bool pass = true;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const FormatVerdict kOk{true, {}};
const FormatVerdict kBad{false, {Violation::GarbledOutput}};

// ---------------------------------------------------------------------------

Gate reward_tables() {
  Gate g{"reward_tables", true, {}};
  std::size_t cases = 0, wrong = 0;
  auto expect = [&](double got, double want) {
    ++cases;
    if (got != want) ++wrong;
  };
  for (std::size_t n = 0; n <= 8; ++n) {
    for (bool ok : {false, true}) {
      const auto r = stage1_reward(n, ok ? kOk : kBad);
      expect(r.retrieval, n >= 1 ? 0.5 : 0.0);
      expect(r.format, ok ? 0.5 : 0.0);
      expect(r.total, (n >= 1 ? 0.5 : 0.0) + (ok ? 0.5 : 0.0));
    }
  }
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"james madison", "James Madison"},
      {"James Madison was the fourth president", "james madison"},
      {"john adams", "james madison"},
      {"the 20 June 1837", "20 June 1837"}};
  for (const auto& [pred, gold] : pairs) {
    for (bool ok : {false, true}) {
      const auto v = ok ? kOk : kBad;
      const auto f1 = stage2_reward(pred, gold, v, AnswerVariant::F1);
      expect(f1.format, ok ? 0.0 : -2.0);
      expect(f1.answer, f1_score(pred, gold));
      expect(f1.total, f1_score(pred, gold) + (ok ? 0.0 : -2.0));
      const auto em = stage2_reward(pred, gold, v, AnswerVariant::EM);
      expect(em.answer, exact_match(pred, gold) ? 1.0 : -1.0);
      const auto cem = stage2_reward(pred, gold, v, AnswerVariant::CEM);
      expect(cem.answer, cover_exact_match(pred, gold) ? 1.0 : -1.0);
      expect(cem.total, cem.answer + (ok ? 0.0 : -2.0));
    }
  }
  // Hand values: EM on the padded answer is false, CEM true.
  expect(stage2_reward(std::string("James Madison was the fourth president"), "james madison", kOk,
                       AnswerVariant::EM).answer, -1.0);
  expect(stage2_reward(std::string("James Madison was the fourth president"), "james madison", kOk,
                       AnswerVariant::CEM).answer, 1.0);
  expect(stage2_reward(std::string("the 20 June 1837"), "20 June 1837", kOk).answer, 1.0);
  for (auto v : {AnswerVariant::EM, AnswerVariant::CEM}) expect(stage2_reward(std::nullopt, "x", kOk, v).answer, -1.0);
  expect(stage2_reward(std::nullopt, "x", kOk).answer, 0.0);
  g.pass = wrong == 0;
  g.detail = fmt("%zu/%zu cases exact", cases - wrong, cases);
  return g;
}

// ---------------------------------------------------------------------------

std::size_t brute_intersection(const std::vector<std::string>& p, const std::vector<std::string>& gold) {
  std::vector<bool> used(gold.size(), false);
  std::size_t n = 0;
  for (const auto& w : p) {
    for (std::size_t j = 0; j < gold.size(); ++j) {
      if (!used[j] && gold[j] == w) {
        used[j] = true;
        ++n;
        break;
      }
    }
  }
  return n;
}

Gate f1_oracle() {
  Gate g{"f1_oracle", true, {}};
  Clock clock;
  Rng rng(2025);
  const std::vector<std::string> pool{"a", "an", "the", "red", "Red,", "fox", "1837", "june", "x"};
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> p, q;
    for (std::size_t k = 0, n = uniform_index(rng, 8); k < n; ++k) p.push_back(pool[uniform_index(rng, pool.size())]);
    for (std::size_t k = 0, n = uniform_index(rng, 8); k < n; ++k) q.push_back(pool[uniform_index(rng, pool.size())]);
    const auto ps = join(p, " ");
    const auto qs = join(q, " ");
    const auto pw = answer_words(ps);
    const auto qw = answer_words(qs);
    const std::size_t in = brute_intersection(pw, qw);
    const double oracle = pw.empty() && qw.empty()
                              ? 1.0
                              : 2.0 * static_cast<double>(in) / static_cast<double>(pw.size() + qw.size());
    if (f1_score(ps, qs) != oracle) ++mismatches;
  }
  const double secs = clock.seconds();
  g.pass = mismatches == 0 && secs < 5.0;
  g.detail = fmt("%zu mismatches on 1000 pairs, %.3f s", mismatches, secs);
  return g;
}

// ---------------------------------------------------------------------------
// Transcripts as alternating generated / injected parts.

struct Part {
  std::string text;
  bool injected = false;
};

std::vector<Part> parts_of(const Episode& ep) {
  std::vector<Part> out;
  std::size_t s = 0;
  for (std::size_t i = 0; i < ep.tokens.size(); ++i) {
    const bool inj = s < ep.mask_spans.size() && i >= ep.mask_spans[s].begin && i < ep.mask_spans[s].end;
    if (out.empty() || out.back().injected != inj) out.push_back({"", inj});
    out.back().text += ep.tokens[i].piece;
    if (s < ep.mask_spans.size() && i + 1 == ep.mask_spans[s].end) ++s;
  }
  return out;
}

Transcript transcript_of(const std::vector<Part>& parts) {
  StreamParser p;
  for (const auto& part : parts) {
    const auto pieces = split_pieces(part.text);
    if (part.injected) {
      p.feed_injected(pieces);
    } else {
      for (const auto& piece : pieces) p.feed(piece);
    }
  }
  p.finish();
  return p.transcript();
}

std::size_t count_injected(const std::vector<Part>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.injected;
  return n;
}

void replace_first(std::string& s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  if (at != std::string::npos) s.replace(at, from.size(), to);
}

Gate hacking_suite() {
  Gate g{"hacking_suite", true, {}};
  const auto world = std::make_shared<SynthWorld>(generate_world(WorldConfig{}));
  LocalRetriever env(world->corpus());
  const TagTable tags;

  std::size_t false_rejects = 0;
  std::vector<std::vector<Part>> oracle_parts;
  std::vector<ExecutionLog> oracle_logs;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto ep = oracle_solve(world->questions[i], world, env);
    const auto parts = parts_of(ep);
    const auto v = validate_format(transcript_of(parts), ep.execution_log());
    if (!v.ok || ep.n_retrievals < 1 || !validate_format(ep.transcript, ep.execution_log()).ok) ++false_rejects;
    oracle_parts.push_back(parts);
    oracle_logs.push_back(ep.execution_log());
  }

  // Ten mutation kinds, five cases each, each on a different oracle transcript.
  const std::vector<std::string> kinds{"docs_without_query", "docs_written_after_query", "extra_forged_docs",
                                       "invalid_bytes",      "control_chars",            "repetition",
                                       "missing_answer",     "untagged_text",            "long_answer",
                                       "no_retrieval"};
  std::map<std::string, std::size_t> accepted;
  for (std::size_t c = 0; c < 50; ++c) {
    const auto& kind = kinds[c % kinds.size()];
    auto parts = oracle_parts[c];
    auto log = oracle_logs[c];
    const auto& q = world->questions[c];
    if (kind == "docs_without_query") {
      // Query block removed, the documents it returned typed out by the policy.
      replace_first(parts[0].text, tags.query_open + " " + q.first_query() + tags.query_close, "");
      parts[1].injected = false;
      log.executed_queries.erase(log.executed_queries.begin());
    } else if (kind == "docs_written_after_query") {
      parts[1].injected = false;
      log.executed_queries.erase(log.executed_queries.begin());
    } else if (kind == "extra_forged_docs") {
      parts[2].text = tags.docs_open + q.item.gold_answer + ": the answer is " + q.item.gold_answer +
                      tags.docs_close + parts[2].text;
    } else if (kind == "invalid_bytes") {
      parts[0].text.insert(parts[0].text.find(tags.think_open) + tags.think_open.size(), " \xff\xfe");
    } else if (kind == "control_chars") {
      parts[2].text.insert(0, " \x01\x02");
    } else if (kind == "repetition") {
      std::string rep;
      for (int k = 0; k < 11; ++k) rep += " " + q.item.gold_answer + " is the answer";
      parts.back().text.insert(0, rep);
    } else if (kind == "missing_answer") {
      auto& last = parts.back().text;
      last = last.substr(0, last.find(tags.answer_open));
    } else if (kind == "untagged_text") {
      parts.back().text += " so the answer is " + q.item.gold_answer;
      parts[0].text.insert(0, "answer first ");
    } else if (kind == "long_answer") {
      std::string pad;
      for (int k = 0; k < 24; ++k) pad += " " + world->entities[(c + k) % world->entities.size()];
      replace_first(parts.back().text, tags.answer_close, pad + tags.answer_close);
    } else if (kind == "no_retrieval") {
      parts = {{tags.think_open + " i already know" + tags.think_close + tags.answer_open + " " +
                    q.item.gold_answer + tags.answer_close,
                false}};
      log.executed_queries.clear();
    }
    const auto v = validate_format(transcript_of(parts), log);
    // Accepted means full credit: well formed and at least one retrieval.
    if (v.ok && count_injected(parts) >= 1) ++accepted[kind];
  }
  std::size_t false_accepts = 0;
  std::string which;
  for (const auto& [k, n] : accepted) {
    false_accepts += n;
    which += " " + k;
  }
  g.pass = false_accepts == 0 && false_rejects == 0;
  g.detail = fmt("%zu false accepts on 50 adversarial, %zu false rejects on 50 oracle", false_accepts,
                 false_rejects) +
             which;
  return g;
}

// ---------------------------------------------------------------------------

struct ToyBatch {
  RolloutBatch batch;
  std::vector<RewardBreakdown> rewards;
};

ToyBatch toy_batch(const ToyPolicy& policy, const ToyPolicy& ref, const std::vector<QAItem>& items,
                   const Retriever& env, std::size_t per_question, std::size_t max_tokens, StageId stage,
                   std::uint64_t seed) {
  RolloutConfig rc;
  rc.rollouts_per_question = per_question;
  rc.max_tokens = max_tokens;
  ToyBatch b;
  b.batch = rollout_batch(policy, &ref, items, env, rc, seed);
  RewardConfig cfg;
  cfg.stage = stage;
  for (std::size_t i = 0; i < b.batch.episodes.size(); ++i) {
    b.rewards.push_back(episode_reward(b.batch.episodes[i], items[b.batch.item_of[i]].gold_answer, cfg));
  }
  return b;
}

void randomize(ToyPolicy& p, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& w : p.parameters()) w = scale * (uniform01(rng) - 0.5);
}

Gate mask_exclusion() {
  Gate g{"mask_exclusion", true, {}};
  const auto world = std::make_shared<SynthWorld>(generate_world(WorldConfig{}));
  LocalRetriever env(world->corpus());
  auto spec = ToyFeatureSpec::desk();
  spec.copy_class.clear();  // probe answers may name unseen entities
  ToyPolicy policy(world->toy_vocab(), spec);
  randomize(policy, 5, 2.0);
  ToyPolicy ref = policy.snapshot();
  randomize(ref, 6, 2.0);

  // Probe rollouts follow the query script, so every episode carries two
  // masked spans; answers are wrong at random.
  const ProbePolicy probe(world, 0.2, 0.8);
  const auto items = world->items();
  RolloutConfig rc;
  rc.rollouts_per_question = 2;
  rc.max_tokens = 64;
  RolloutBatch batch = rollout_batch(probe, nullptr, items, env, rc, 17);
  Rng rng(99);
  for (auto& ep : batch.episodes) {
    const auto ctx = ep.scoring_context();
    const auto mask = ep.loss_mask();
    ep.policy_logprobs = policy.score(ctx, ep.tokens);
    ep.ref_logprobs = ref.score(ctx, ep.tokens);
    for (std::size_t t = 0; t < ep.tokens.size(); ++t) {
      if (mask[t]) {
        ep.policy_logprobs[t] += 0.6 * (uniform01(rng) - 0.5);  // some ratios clip
      } else {
        ep.policy_logprobs[t] = 0.0;
        ep.ref_logprobs[t] = 0.0;
      }
    }
  }
  RewardConfig rcfg;
  rcfg.stage = StageId::Stage2;
  std::vector<RewardBreakdown> rewards;
  for (std::size_t i = 0; i < batch.episodes.size(); ++i) {
    rewards.push_back(episode_reward(batch.episodes[i], items[batch.item_of[i]].gold_answer, rcfg));
  }

  std::size_t masked_episodes = 0, masked_tokens = 0, differing = 0;
  for (const auto& ep : batch.episodes) masked_episodes += !ep.mask_spans.empty();
  RolloutBatch swapped = batch;
  for (auto& ep : swapped.episodes) {
    for (const auto& s : ep.mask_spans) {
      for (std::size_t t = s.begin; t < s.end; ++t) {
        ep.tokens[t] = policy.vocab().make(static_cast<TokenId>(uniform_index(rng, policy.vocab().size())));
        ep.policy_logprobs[t] = -50.0 * uniform01(rng);
        ep.ref_logprobs[t] = 7.0 * uniform01(rng);
        ++masked_tokens;
      }
    }
  }
  TrainerConfig cfg;
  cfg.kl_coeff = 0.05;
  cfg.gamma = 0.9;
  for (auto mode : {AdvantageMode::BatchNorm, AdvantageMode::GroupRelative}) {
    cfg.advantage_mode = mode;
    auto c1 = shape_rewards(batch, rewards, cfg);
    compute_advantages(c1, batch.groups, mode);
    auto c2 = shape_rewards(swapped, rewards, cfg);
    compute_advantages(c2, swapped.groups, mode);
    const auto a = policy_loss(batch, c1, policy, cfg);
    const auto b = policy_loss(swapped, c2, policy, cfg);
    if (std::memcmp(&a.loss, &b.loss, sizeof(double)) != 0) ++differing;
    if (a.grad.size() != b.grad.size() ||
        std::memcmp(a.grad.data(), b.grad.data(), a.grad.size() * sizeof(double)) != 0) {
      ++differing;
    }
  }
  // Control: the same edit on one generated token does move the loss.
  RolloutBatch control = batch;
  const auto mask0 = control.episodes[0].loss_mask();
  for (std::size_t t = 0; t < mask0.size(); ++t) {
    if (mask0[t]) {
      control.episodes[0].policy_logprobs[t] -= 0.01;
      break;
    }
  }
  cfg.advantage_mode = AdvantageMode::BatchNorm;
  auto c1 = shape_rewards(batch, rewards, cfg);
  compute_advantages(c1, batch.groups, cfg.advantage_mode);
  auto c3 = shape_rewards(control, rewards, cfg);
  compute_advantages(c3, control.groups, cfg.advantage_mode);
  const bool control_moves = policy_loss(batch, c1, policy, cfg).loss != policy_loss(control, c3, policy, cfg).loss;
  g.pass = differing == 0 && masked_episodes >= 100 && control_moves;
  g.detail = fmt("%zu episodes with masks (%zu masked tokens replaced), loss/grad differences %zu, "
                 "unmasked control %s",
                 masked_episodes, masked_tokens, differing, control_moves ? "moves" : "does not move");
  return g;
}

// ---------------------------------------------------------------------------

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::max(std::sqrt(na), std::sqrt(nb));
  return den == 0.0 ? 0.0 : std::sqrt(num) / den;
}

Gate gradient_check() {
  Gate g{"gradient_check", true, {}};
  Clock clock;
  WorldConfig wc;
  wc.n_questions = 12;
  const auto world = std::make_shared<SynthWorld>(generate_world(wc));
  LocalRetriever env(world->corpus());
  const auto items = world->items();
  double worst_logp = 0.0, worst_loss = 0.0;
  std::size_t coords = 0;
  const double h = 1e-5;
  for (std::uint64_t b = 0; b < 50; ++b) {
    ToyPolicy policy(world->toy_vocab(), ToyFeatureSpec::desk());
    randomize(policy, 1000 + b, 1.0);
    Rng rng(b);
    const std::vector<QAItem> qs{items[uniform_index(rng, items.size())], items[uniform_index(rng, items.size())]};
    auto tb = toy_batch(policy, policy, qs, env, 2, 24, StageId::Stage2, b);
    TrainerConfig cfg;
    cfg.advantage_mode = AdvantageMode::BatchNorm;
    auto credits = shape_rewards(tb.batch, tb.rewards, cfg);
    for (auto& c : credits) {
      for (std::size_t t = 0; t < c.adv.size(); ++t) c.adv[t] = c.loss_mask[t] ? uniform01(rng) - 0.5 : 0.0;
    }
    // Ratios near 1, away from the clip kinks.
    for (auto& ep : tb.batch.episodes) {
      for (auto& lp : ep.policy_logprobs) lp += 0.1 * (uniform01(rng) - 0.5);
    }
    const auto analytic = policy_loss(tb.batch, credits, policy, cfg);

    const auto& ep0 = tb.batch.episodes[0];
    const auto ctx = ep0.scoring_context();
    const auto mask = ep0.loss_mask();
    std::vector<double> coeffs(ep0.tokens.size(), 0.0);
    for (std::size_t t = 0; t < coeffs.size(); ++t) coeffs[t] = mask[t] ? uniform01(rng) - 0.5 : 0.0;
    std::vector<double> glogp(policy.parameter_count(), 0.0);
    policy.accumulate_logprob_grad(ctx, ep0.tokens, coeffs, glogp);
    auto logp_obj = [&](const ToyPolicy& p) {
      const auto s = p.score(ctx, ep0.tokens);
      double f = 0.0;
      for (std::size_t t = 0; t < s.size(); ++t) f += coeffs[t] * s[t];
      return f;
    };

    std::vector<std::size_t> probe;
    for (std::size_t i = 0; i < glogp.size(); ++i) {
      if (glogp[i] != 0.0 || analytic.grad[i] != 0.0) probe.push_back(i);
    }
    shuffle(probe, rng);
    if (probe.size() > 40) probe.resize(40);
    for (int k = 0; k < 10; ++k) probe.push_back(uniform_index(rng, glogp.size()));
    std::vector<double> fd_l, an_l, fd_p, an_p;
    for (auto i : probe) {
      ToyPolicy plus = policy, minus = policy;
      plus.parameters()[i] += h;
      minus.parameters()[i] -= h;
      fd_l.push_back((policy_loss(tb.batch, credits, plus, cfg).loss -
                      policy_loss(tb.batch, credits, minus, cfg).loss) / (2 * h));
      an_l.push_back(analytic.grad[i]);
      fd_p.push_back((logp_obj(plus) - logp_obj(minus)) / (2 * h));
      an_p.push_back(glogp[i]);
    }
    coords += probe.size();
    worst_loss = std::max(worst_loss, relative_error(fd_l, an_l));
    worst_logp = std::max(worst_logp, relative_error(fd_p, an_p));
  }
  const double secs = clock.seconds();
  g.pass = worst_loss <= 1e-4 && worst_logp <= 1e-4 && secs < 30.0;
  g.detail = fmt("50 batches, %zu coordinates, max rel err loss %.2e logpi %.2e, %.1f s", coords,
                 worst_loss, worst_logp, secs);
  return g;
}

// ---------------------------------------------------------------------------

Gate advantage_reductions() {
  Gate g{"advantage_reductions", true, {}};
  WorldConfig wc;
  wc.n_questions = 16;
  const auto world = std::make_shared<SynthWorld>(generate_world(wc));
  LocalRetriever env(world->corpus());
  ToyPolicy policy(world->toy_vocab(), ToyFeatureSpec::desk());
  randomize(policy, 3, 1.5);
  const auto tb = toy_batch(policy, policy, world->items(), env, 8, 40, StageId::Stage1, 4);

  std::size_t bad_returns = 0, bad_groups = 0, bad_equal = 0;
  TrainerConfig cfg;
  cfg.gamma = 1.0;
  cfg.kl_coeff = 0.0;
  const auto credits = shape_rewards(tb.batch, tb.rewards, cfg);
  for (std::size_t e = 0; e < credits.size(); ++e) {
    for (std::size_t t = 0; t < credits[e].ret.size(); ++t) {
      if (credits[e].loss_mask[t] && credits[e].ret[t] != tb.rewards[e].total) ++bad_returns;
    }
  }

  auto gr = credits;
  compute_advantages(gr, tb.batch.groups, AdvantageMode::GroupRelative);
  double worst = 0.0;
  for (const auto& group : tb.batch.groups) {
    double sum = 0.0;
    for (auto e : group) {
      const auto& c = gr[e];
      std::optional<double> a;
      for (std::size_t t = 0; t < c.adv.size(); ++t) {
        if (!c.loss_mask[t]) continue;
        if (a && *a != c.adv[t]) ++bad_groups;  // constant within an episode
        a = c.adv[t];
      }
      sum += a.value_or(0.0);
    }
    worst = std::max(worst, std::abs(sum) / static_cast<double>(group.size()));
    if (std::abs(sum) > 1e-6 * static_cast<double>(group.size())) ++bad_groups;
  }

  std::vector<RewardBreakdown> same(tb.rewards.size());
  for (auto& r : same) r.total = 0.5;
  for (auto mode : {AdvantageMode::GroupRelative, AdvantageMode::BatchNorm}) {
    auto cs = shape_rewards(tb.batch, same, cfg);
    compute_advantages(cs, tb.batch.groups, mode);
    for (const auto& c : cs) {
      for (double a : c.adv) bad_equal += a != 0.0;
    }
  }
  g.pass = bad_returns == 0 && bad_groups == 0 && bad_equal == 0;
  g.detail = fmt("%zu episodes: non-constant returns %zu, group violations %zu (max |sum A|/size %.1e), "
                 "nonzero equal-reward advantages %zu",
                 credits.size(), bad_returns, bad_groups, worst, bad_equal);
  return g;
}

// ---------------------------------------------------------------------------

double retrieval_fraction(const ToyPolicy& p, const DeskConfig& cfg, const DeskData& d, std::uint64_t seed) {
  const auto b = rollout_batch(p, nullptr, d.stage1, *d.env, cfg.rollout, seed);
  double n = 0.0;
  for (const auto& ep : b.episodes) n += ep.n_retrievals >= 1;
  return n / static_cast<double>(b.episodes.size());
}

double heldout_f1(const ToyPolicy& p, const DeskConfig& cfg, const DeskData& d, std::uint64_t seed) {
  EvalConfig ec;
  ec.rollout = cfg.rollout;
  ec.rollout.temperature = 0.0;
  ec.seed = seed;
  return run_benchmark(p, *d.env, d.heldout, ec).suite.overall.f1;
}

struct SeedRun {
  double ret_before = 0.0, ret_after = 0.0, stage1_secs = 0.0;
  double f1_before = 0.0, f1_after = 0.0, stage2_secs = 0.0;
};

SeedRun desk_run(std::uint64_t seed, bool stage2) {
  const DeskConfig cfg;
  const auto d = make_desk_data(cfg);
  SeedRun r;
  auto policy = make_desk_policy(d, cfg);
  const auto ref = policy.snapshot();
  r.ret_before = retrieval_fraction(policy, cfg, d, mix_seed(seed, 71));
  Clock c1;
  auto in1 = desk_stage_inputs(cfg, d, StageId::Stage1, seed);
  auto st1 = fresh_train_state(in1.trainer);
  train_stage(policy, ref, in1, st1);
  r.stage1_secs = c1.seconds();
  r.ret_after = retrieval_fraction(policy, cfg, d, mix_seed(seed, 72));
  if (!stage2) return r;

  Clock c2;
  r.f1_before = heldout_f1(policy, cfg, d, seed);
  const auto ref2 = policy.snapshot();
  auto in2 = desk_stage_inputs(cfg, d, StageId::Stage2, seed);
  auto st2 = fresh_train_state(in2.trainer);
  train_stage(policy, ref2, in2, st2);
  r.f1_after = heldout_f1(policy, cfg, d, seed);
  r.stage2_secs = c2.seconds();
  return r;
}

std::vector<SeedRun> g_runs;

Gate stage1_dynamics() {
  Gate g{"stage1_dynamics", true, {}};
  if (g_runs.empty()) g_runs.push_back(desk_run(1, false));
  const auto& r = g_runs[0];
  g.pass = r.ret_before < 0.2 && r.ret_after > 0.9 && r.stage1_secs < 600.0;
  g.detail = fmt("seed 1: retrieval fraction %.3f -> %.3f after 100 updates, %.1f s", r.ret_before,
                 r.ret_after, r.stage1_secs);
  return g;
}

Gate stage2_dynamics() {
  Gate g{"stage2_dynamics", true, {}};
  Clock clock;
  std::size_t passing = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = desk_run(seed, true);
    const double gain = r.f1_after - r.f1_before;
    passing += gain >= 0.3;
    per += fmt(" seed %llu: %.3f -> %.3f;", static_cast<unsigned long long>(seed), r.f1_before, r.f1_after);
  }
  const double secs = clock.seconds();
  g.pass = passing >= 2 && secs < 1800.0;
  g.detail = fmt("%zu/3 seeds gain >= 0.3,", passing) + per + fmt(" %.1f s with Stage 1", secs);
  return g;
}

// ---------------------------------------------------------------------------

Gate bucketing() {
  Gate g{"bucketing", true, {}};
  std::size_t wrong = 0;
  const std::vector<std::pair<std::size_t, Difficulty>> table{
      {9, Difficulty::Easy}, {10, Difficulty::Medium}, {20, Difficulty::Medium}, {21, Difficulty::Difficult}};
  for (const auto& [k, d] : table) wrong += bucket(k) != d;

  // A labelled pool large enough for the full composition.
  std::vector<LabeledItem> pool;
  std::size_t id = 0;
  for (const auto* src : {"hotpotqa", "2wiki"}) {
    for (auto d : {Difficulty::Easy, Difficulty::Medium, Difficulty::Difficult}) {
      for (std::size_t i = 0; i < 5000; ++i) {
        LabeledItem l;
        l.item = {"p" + std::to_string(id++), "question " + std::to_string(id), "a", src};
        l.label.value = d;
        pool.push_back(l);
      }
    }
  }
  std::size_t specs = 0;
  for (auto stage : {StageId::Stage1, StageId::Stage2}) {
    for (std::size_t scale : {1u, 10u, 100u}) {
      for (bool drop : {false, true}) {
        auto spec = standard_composition(stage, scale);
        if (drop) spec = without_difficult(spec);
        const auto ds = assemble_stage_dataset(pool, stage, spec, 7 + scale);
        std::map<std::string, std::size_t> want;
        std::size_t total = 0;
        for (const auto& c : spec) {
          want[cell_name(c.source, c.difficulty)] += c.count;
          total += c.count;
        }
        std::erase_if(want, [](const auto& kv) { return kv.second == 0; });
        auto got = ds.composition;
        std::erase_if(got, [](const auto& kv) { return kv.second == 0; });
        wrong += got != want || ds.items.size() != total;
        std::set<std::string> ids;
        for (const auto& l : ds.items) {
          ids.insert(l.item.id);
        }
        wrong += ids.size() != ds.items.size();
        ++specs;
      }
    }
  }
  std::size_t full = 0;
  for (const auto& c : standard_composition(StageId::Stage2)) full += c.count;
  g.pass = wrong == 0;
  g.detail = fmt("boundaries 9/10/20/21 and %zu composition specs exact (full Stage-2 total %zu)", specs, full);
  return g;
}

// ---------------------------------------------------------------------------

Gate metric_consistency() {
  Gate g{"metric_consistency", true, {}};
  const DeskConfig cfg;
  const auto d = make_desk_data(cfg);
  const auto all = d.world->items();
  const OraclePolicy oracle(d.world);
  const ProbePolicy probe(d.world);
  auto toy = make_desk_policy(d, cfg);
  randomize(toy, 8, 1.0);

  std::size_t violations = 0, records = 0;
  double oracle_acc_r = 0.0;
  EvalConfig greedy;
  greedy.rollout.max_tokens = 64;
  EvalConfig sampled = greedy;
  sampled.rollout.temperature = 1.0;
  sampled.seed = 3;
  const std::vector<std::pair<const Policy*, EvalConfig>> runs{
      {&oracle, greedy}, {&probe, sampled}, {&toy, greedy}, {&toy, sampled}};
  const auto judge_client = cem_judge();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto res = run_benchmark(*runs[i].first, *d.env, all, runs[i].second, judge_client.get());
    for (const auto& r : res.records) {
      ++records;
      violations += r.em && !r.cem;
    }
    violations += res.suite.overall.f1 < res.suite.overall.em;
    for (const auto& [src, a] : res.suite.per_source) violations += a.f1 < a.em;
    if (i == 0) oracle_acc_r = res.suite.overall.acc_r;
  }
  g.pass = violations == 0 && oracle_acc_r == 1.0;
  g.detail = fmt("%zu records over 4 runs, %zu violations, oracle ACC_R %.3f", records, violations, oracle_acc_r);
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Gate()>>> gates{
      {"reward_tables", reward_tables},
      {"f1_oracle", f1_oracle},
      {"hacking_suite", hacking_suite},
      {"mask_exclusion", mask_exclusion},
      {"gradient_check", gradient_check},
      {"advantage_reductions", advantage_reductions},
      {"bucketing", bucketing},
      {"metric_consistency", metric_consistency},
      {"stage1_dynamics", stage1_dynamics},
      {"stage2_dynamics", stage2_dynamics},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, run] : gates) {
    if (!only.empty() && !only.contains(name)) continue;
    Gate g;
    try {
      g = run();
    } catch (const std::exception& e) {
      g = {name, false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %s: %s\n", g.pass ? "PASS" : "FAIL", g.name.c_str(), g.detail.c_str());
    std::fflush(stdout);
    failed += !g.pass;
  }
  return failed ? 1 : 0;
}
