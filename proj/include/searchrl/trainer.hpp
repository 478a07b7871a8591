#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/rollout.hpp"

namespace searchrl {

enum class AdvantageMode { BatchNorm, GroupRelative };
enum class OptimizerKind { Sgd, Adam };

inline const char* to_string(AdvantageMode m) {
  return m == AdvantageMode::BatchNorm ? "batch_norm" : "group_relative";
}
inline AdvantageMode advantage_mode_from_string(std::string_view s) {
  if (s == "batch_norm" || s == "reinforce++") return AdvantageMode::BatchNorm;
  if (s == "group_relative" || s == "grpo") return AdvantageMode::GroupRelative;
  throw Error(ErrorCode::InvalidConfig, "unknown advantage mode '" + std::string(s) + "'");
}
inline const char* to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }
inline OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw Error(ErrorCode::InvalidConfig, "unknown optimizer '" + std::string(s) + "'");
}

struct TrainerConfig {
  double learning_rate = 2e-6;
  double kl_coeff = 0.0;  // 1e-4 for instruct-style policies
  double gamma = 1.0;
  AdvantageMode advantage_mode = AdvantageMode::BatchNorm;
  double clip_epsilon = 0.2;
  std::size_t train_batch = 256;  // episodes per update
  std::size_t epochs = 1;
  std::size_t updates = 100;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw Error(ErrorCode::InvalidConfig, "gamma must be in (0, 1]");
    if (!(kl_coeff >= 0.0)) throw Error(ErrorCode::InvalidConfig, "kl_coeff must be >= 0");
    if (!(clip_epsilon > 0.0)) throw Error(ErrorCode::InvalidConfig, "clip_epsilon must be > 0");
    if (!(learning_rate >= 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be >= 0");
    if (train_batch == 0 || epochs == 0) {
      throw Error(ErrorCode::InvalidConfig, "train_batch and epochs must be > 0");
    }
  }
};

inline nlohmann::json to_json(const TrainerConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"kl_coeff", c.kl_coeff},
          {"gamma", c.gamma},                 {"advantage_mode", to_string(c.advantage_mode)},
          {"clip_epsilon", c.clip_epsilon},   {"train_batch", c.train_batch},
          {"epochs", c.epochs},               {"updates", c.updates},
          {"optimizer", to_string(c.optimizer)}, {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},       {"adam_eps", c.adam_eps},
          {"max_grad_norm", c.max_grad_norm}, {"seed", c.seed}};
}

inline void from_json_into(const nlohmann::json& j, TrainerConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.kl_coeff = j.value("kl_coeff", c.kl_coeff);
  c.gamma = j.value("gamma", c.gamma);
  if (j.contains("advantage_mode")) {
    c.advantage_mode = advantage_mode_from_string(j.at("advantage_mode").get<std::string>());
  }
  c.clip_epsilon = j.value("clip_epsilon", c.clip_epsilon);
  c.train_batch = j.value("train_batch", c.train_batch);
  c.epochs = j.value("epochs", c.epochs);
  c.updates = j.value("updates", c.updates);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Credit assignment

struct TokenCredit {
  std::vector<double> reward;  // shaped r_t
  std::vector<double> ret;     // G_t
  std::vector<double> adv;     // A_t
  std::vector<bool> loss_mask;
  double terminal = 0.0;
  bool valid = false;  // failed or empty episodes carry no loss

  std::size_t unmasked() const {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
  }
};

/// r_t = -beta (log pi - log pi_ref) at generated tokens, plus the terminal
/// reward at the last generated token; G_t accumulates over generated tokens
/// only, so injected spans are invisible to the return.
inline TokenCredit shape_episode(const Episode& ep, double total, double beta, double gamma) {
  const std::size_t n = ep.tokens.size();
  if (ep.policy_logprobs.size() != n) {
    throw Error(ErrorCode::LengthMismatch, "policy log-probs do not match token count");
  }
  if (beta > 0.0 && ep.ref_logprobs.size() != n) {
    throw Error(ErrorCode::LengthMismatch, "reference log-probs do not match token count");
  }
  TokenCredit c;
  c.loss_mask = ep.loss_mask();
  c.reward.assign(n, 0.0);
  c.ret.assign(n, 0.0);
  c.adv.assign(n, 0.0);
  c.terminal = total;
  if (ep.flags.failed) {
    std::fill(c.loss_mask.begin(), c.loss_mask.end(), false);
    return c;
  }
  std::optional<std::size_t> last;
  for (std::size_t t = 0; t < n; ++t) {
    if (!c.loss_mask[t]) continue;
    if (beta > 0.0) c.reward[t] = -beta * (ep.policy_logprobs[t] - ep.ref_logprobs[t]);
    last = t;
  }
  if (!last) return c;
  c.valid = true;
  c.reward[*last] += total;
  double g = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    if (!c.loss_mask[t]) continue;
    g = c.reward[t] + gamma * g;
    c.ret[t] = g;
  }
  return c;
}

inline std::vector<TokenCredit> shape_rewards(const RolloutBatch& batch,
                                              const std::vector<RewardBreakdown>& breakdowns,
                                              const TrainerConfig& cfg) {
  if (breakdowns.size() != batch.episodes.size()) {
    throw Error(ErrorCode::LengthMismatch, "one reward breakdown per episode required");
  }
  std::vector<TokenCredit> out;
  out.reserve(batch.episodes.size());
  for (std::size_t i = 0; i < batch.episodes.size(); ++i) {
    out.push_back(shape_episode(batch.episodes[i], breakdowns[i].total, cfg.kl_coeff, cfg.gamma));
  }
  return out;
}

struct AdvantageStats {
  double mean = 0.0;
  double std = 0.0;
  bool degenerate = false;  // all rewards identical; advantages zeroed
};

inline constexpr double kAdvantageEps = 1e-8;

inline AdvantageStats compute_advantages(std::vector<TokenCredit>& credits,
                                         const std::vector<std::vector<std::size_t>>& groups,
                                         AdvantageMode mode) {
  AdvantageStats st;
  for (auto& c : credits) std::fill(c.adv.begin(), c.adv.end(), 0.0);
  if (mode == AdvantageMode::BatchNorm) {
    if (credits.size() < 2) throw Error(ErrorCode::InvalidArgument, "BatchNorm needs >= 2 episodes");
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& c : credits) {
      for (std::size_t t = 0; t < c.ret.size(); ++t) {
        if (c.loss_mask[t]) {
          sum += c.ret[t];
          ++count;
        }
      }
    }
    if (count == 0) {
      st.degenerate = true;
      return st;
    }
    st.mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& c : credits) {
      for (std::size_t t = 0; t < c.ret.size(); ++t) {
        if (c.loss_mask[t]) sq += (c.ret[t] - st.mean) * (c.ret[t] - st.mean);
      }
    }
    st.std = std::sqrt(sq / static_cast<double>(count));
    bool same = true;
    std::optional<double> first;
    for (const auto& c : credits) {
      if (!c.valid) continue;
      if (!first) first = c.terminal;
      same = same && c.terminal == *first;
    }
    if (st.std < kAdvantageEps || (same && st.std < 1e-6)) {
      st.degenerate = true;
      return st;
    }
    for (auto& c : credits) {
      for (std::size_t t = 0; t < c.ret.size(); ++t) {
        if (c.loss_mask[t]) c.adv[t] = (c.ret[t] - st.mean) / (st.std + kAdvantageEps);
      }
    }
    return st;
  }

  bool any_signal = false;
  for (const auto& g : groups) {
    if (g.size() < 2) throw Error(ErrorCode::InvalidArgument, "GroupRelative needs >= 2 episodes per group");
    std::vector<std::size_t> live;
    for (auto i : g) {
      if (credits.at(i).valid) live.push_back(i);
    }
    if (live.size() < 2) continue;
    double mean = 0.0;
    for (auto i : live) mean += credits[i].terminal;
    mean /= static_cast<double>(live.size());
    double sq = 0.0;
    for (auto i : live) sq += (credits[i].terminal - mean) * (credits[i].terminal - mean);
    const double sd = std::sqrt(sq / static_cast<double>(live.size()));
    if (sd < kAdvantageEps) continue;
    any_signal = true;
    for (auto i : live) {
      const double a = (credits[i].terminal - mean) / (sd + kAdvantageEps);
      auto& c = credits[i];
      for (std::size_t t = 0; t < c.adv.size(); ++t) {
        if (c.loss_mask[t]) c.adv[t] = a;
      }
    }
  }
  st.degenerate = !any_signal;
  return st;
}

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;  // dL/dparams
  std::size_t tokens = 0;    // unmasked tokens in the mean
  double clip_fraction = 0.0;
};

inline double clipped_term(double ratio, double adv, double eps) {
  return std::min(ratio * adv, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv);
}

/// L = -mean over generated tokens of min(rho A, clip(rho) A), with rho the
/// ratio of current to rollout-time probabilities. Masked tokens contribute
/// nothing to the value or the gradient.
template <TrainablePolicy P>
LossResult policy_loss(const RolloutBatch& batch, const std::vector<TokenCredit>& credits,
                       const P& policy, const TrainerConfig& cfg) {
  if (credits.size() != batch.episodes.size()) {
    throw Error(ErrorCode::LengthMismatch, "one credit record per episode required");
  }
  LossResult r;
  r.grad.assign(policy.parameter_count(), 0.0);
  for (const auto& c : credits) {
    if (c.valid) r.tokens += c.unmasked();
  }
  if (r.tokens == 0) return r;
  const double inv = 1.0 / static_cast<double>(r.tokens);
  std::size_t clipped = 0;
  double sum = 0.0;
  std::vector<double> coeffs;
  for (std::size_t e = 0; e < batch.episodes.size(); ++e) {
    const auto& c = credits[e];
    if (!c.valid) continue;
    const auto& ep = batch.episodes[e];
    const auto ctx = ep.scoring_context();
    const auto current = policy.score(ctx, ep.tokens);
    if (current.size() != ep.tokens.size()) {
      throw Error(ErrorCode::LengthMismatch, "score length differs from token count");
    }
    coeffs.assign(ep.tokens.size(), 0.0);
    for (std::size_t t = 0; t < ep.tokens.size(); ++t) {
      if (!c.loss_mask[t]) continue;
      const double ratio = std::exp(current[t] - ep.policy_logprobs[t]);
      const double a = c.adv[t];
      const double term = clipped_term(ratio, a, cfg.clip_epsilon);
      sum += term;
      // The unclipped branch carries the gradient; the clipped one is constant.
      if (ratio * a <= std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a) {
        coeffs[t] = -inv * a * ratio;
      } else {
        ++clipped;
      }
    }
    policy.accumulate_logprob_grad(ctx, ep.tokens, coeffs, r.grad);
  }
  r.loss = -sum * inv;
  r.clip_fraction = static_cast<double>(clipped) * inv;
  if (!std::isfinite(r.loss)) throw Error(ErrorCode::NonFiniteLoss, "policy loss is not finite");
  for (double g : r.grad) {
    if (!std::isfinite(g)) throw Error(ErrorCode::NonFiniteLoss, "policy gradient is not finite");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

class Optimizer {
 public:
  explicit Optimizer(const TrainerConfig& cfg = {}) : cfg_(cfg) {}

  /// Descends on `grad` (the gradient of the loss).
  void step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != grad.size()) throw Error(ErrorCode::LengthMismatch, "gradient size mismatch");
    const double lr = cfg_.learning_rate;
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
      return;
    }
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double b1 = cfg_.adam_beta1;
    const double b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      if (g == 0.0 && m_[i] == 0.0 && v_[i] == 0.0) continue;
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.adam_eps);
    }
  }

  nlohmann::json state() const { return {{"t", t_}, {"m", m_}, {"v", v_}}; }

  void load_state(const nlohmann::json& j) {
    t_ = j.value("t", std::uint64_t{0});
    m_ = j.value("m", std::vector<double>{});
    v_ = j.value("v", std::vector<double>{});
  }

 private:
  TrainerConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t t_ = 0;
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Training loop

struct UpdateReport {
  std::size_t step = 0;
  StageId stage = StageId::Stage1;
  double mean_reward = 0.0;
  double mean_length = 0.0;  // generated tokens
  double mean_retrievals = 0.0;
  double retrieval_fraction = 0.0;  // episodes with n >= 1
  double format_ok_rate = 0.0;
  double mean_answer = 0.0;
  double mean_kl = 0.0;
  double grad_norm = 0.0;
  double loss = 0.0;
  double clip_fraction = 0.0;
  std::size_t episodes = 0;
  std::size_t failed_episodes = 0;
  bool degenerate = false;
  bool skipped = false;
  std::string error;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const UpdateReport& r) {
  nlohmann::json j{{"step", r.step},
                   {"stage", to_string(r.stage)},
                   {"mean_reward", r.mean_reward},
                   {"mean_length", r.mean_length},
                   {"mean_retrievals", r.mean_retrievals},
                   {"retrieval_fraction", r.retrieval_fraction},
                   {"format_ok_rate", r.format_ok_rate},
                   {"mean_answer", r.mean_answer},
                   {"mean_kl", r.mean_kl},
                   {"grad_norm", r.grad_norm},
                   {"loss", r.loss},
                   {"clip_fraction", r.clip_fraction},
                   {"episodes", r.episodes},
                   {"failed_episodes", r.failed_episodes},
                   {"degenerate", r.degenerate},
                   {"skipped", r.skipped}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

/// Batch statistics that do not depend on the update.
inline void summarize_batch(const RolloutBatch& batch, const std::vector<RewardBreakdown>& rewards,
                            UpdateReport& r) {
  const double n = static_cast<double>(batch.episodes.size());
  r.episodes = batch.episodes.size();
  double kl_sum = 0.0;
  std::size_t kl_tokens = 0;
  for (std::size_t i = 0; i < batch.episodes.size(); ++i) {
    const auto& ep = batch.episodes[i];
    if (ep.flags.failed) ++r.failed_episodes;
    r.mean_reward += rewards[i].total / n;
    r.mean_length += static_cast<double>(ep.generated_count()) / n;
    r.mean_retrievals += static_cast<double>(ep.n_retrievals) / n;
    r.retrieval_fraction += (ep.n_retrievals >= 1 ? 1.0 : 0.0) / n;
    r.format_ok_rate += (rewards[i].verdict.ok ? 1.0 : 0.0) / n;
    r.mean_answer += rewards[i].answer / n;
    if (ep.ref_logprobs.size() == ep.tokens.size()) {
      const auto mask = ep.loss_mask();
      for (std::size_t t = 0; t < ep.tokens.size(); ++t) {
        if (!mask[t]) continue;
        kl_sum += ep.policy_logprobs[t] - ep.ref_logprobs[t];
        ++kl_tokens;
      }
    }
  }
  r.mean_kl = kl_tokens ? kl_sum / static_cast<double>(kl_tokens) : 0.0;
}

/// Mutable training state that a checkpoint must carry to resume exactly.
struct TrainState {
  std::size_t step = 0;
  std::size_t cursor = 0;           // position in the shuffled question order
  std::vector<std::size_t> order;   // current epoch's question order
  Rng rng{0};
  Optimizer optimizer;
};

struct StageInputs {
  StageId stage = StageId::Stage1;
  std::vector<QAItem> items;
  const Retriever* env = nullptr;
  RolloutConfig rollout;
  RewardConfig reward;
  TrainerConfig trainer;
};

/// One update: sample train_batch / rollouts_per_question questions, roll
/// out, reward, shape, normalize, and take an optimizer step.
template <TrainablePolicy P>
UpdateReport train_step(P& policy, const P& ref, const StageInputs& in, TrainState& st) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t per = in.rollout.rollouts_per_question;
  const std::size_t nq = std::max<std::size_t>(1, in.trainer.train_batch / per);
  std::vector<QAItem> qs;
  for (std::size_t k = 0; k < nq; ++k) {
    if (st.cursor >= st.order.size()) {
      st.order.resize(in.items.size());
      std::iota(st.order.begin(), st.order.end(), std::size_t{0});
      shuffle(st.order, st.rng);
      st.cursor = 0;
    }
    qs.push_back(in.items[st.order[st.cursor++]]);
  }
  UpdateReport rep;
  rep.step = st.step;
  rep.stage = in.stage;
  RewardConfig rc = in.reward;
  rc.stage = in.stage;
  const std::uint64_t batch_seed = mix_seed(in.trainer.seed, st.step);
  try {
    const Policy* ref_policy = in.trainer.kl_coeff > 0.0 ? &ref : nullptr;
    RolloutBatch batch = rollout_batch(policy, ref_policy, qs, *in.env, in.rollout, batch_seed);
    std::vector<RewardBreakdown> rewards;
    rewards.reserve(batch.episodes.size());
    for (std::size_t i = 0; i < batch.episodes.size(); ++i) {
      rewards.push_back(episode_reward(batch.episodes[i], qs[batch.item_of[i]].gold_answer, rc));
    }
    summarize_batch(batch, rewards, rep);
    auto credits = shape_rewards(batch, rewards, in.trainer);
    const auto adv = compute_advantages(credits, batch.groups, in.trainer.advantage_mode);
    rep.degenerate = adv.degenerate;
    for (std::size_t epoch = 0; epoch < in.trainer.epochs; ++epoch) {
      auto lr = policy_loss(batch, credits, policy, in.trainer);
      rep.loss = lr.loss;
      rep.clip_fraction = lr.clip_fraction;
      rep.grad_norm = l2_norm(lr.grad);
      if (in.trainer.max_grad_norm > 0.0 && rep.grad_norm > in.trainer.max_grad_norm) {
        const double s = in.trainer.max_grad_norm / rep.grad_norm;
        for (double& g : lr.grad) g *= s;
      }
      if (!adv.degenerate) st.optimizer.step(policy.parameters(), lr.grad);
    }
  } catch (const Error& e) {
    rep.skipped = true;
    rep.error = std::string(to_string(e.code())) + ": " + e.what();
  }
  ++st.step;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Runs `in.trainer.updates` updates. `ref` must be a frozen snapshot.
template <TrainablePolicy P>
std::vector<UpdateReport> train_stage(P& policy, const P& ref, const StageInputs& in,
                                      TrainState& st,
                                      const std::function<void(const UpdateReport&)>& on_report = {}) {
  in.trainer.validate();
  in.rollout.validate();
  if (in.items.empty()) throw Error(ErrorCode::InvalidArgument, "stage dataset is empty");
  if (!in.env) throw Error(ErrorCode::InvalidArgument, "no retrieval environment");
  std::vector<UpdateReport> reports;
  for (std::size_t u = 0; u < in.trainer.updates; ++u) {
    reports.push_back(train_step(policy, ref, in, st));
    if (on_report) on_report(reports.back());
  }
  return reports;
}

template <TrainablePolicy P>
std::vector<UpdateReport> train_stage(P& policy, const P& ref, const StageInputs& in) {
  TrainState st;
  st.rng.seed(mix_seed(in.trainer.seed, 0xdadaULL));
  st.optimizer = Optimizer(in.trainer);
  return train_stage(policy, ref, in, st);
}

}  // namespace searchrl
