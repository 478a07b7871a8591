#pragma once

// Desk-scale defaults for training the toy policy on the synthetic world.

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/retrieval.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/rollout.hpp"
#include "searchrl/synthetic.hpp"
#include "searchrl/toy_policy.hpp"
#include "searchrl/trainer.hpp"

namespace searchrl {

struct DeskConfig {
  WorldConfig world;                 // Stage-1 questions are the first world.n_questions
  std::size_t pool_questions = 300;  // same facts and corpus, more questions
  std::size_t heldout = 60;          // last questions of the pool, never trained on
  ToyFeatureSpec toy = ToyFeatureSpec::desk();
  RolloutConfig rollout = [] {
    RolloutConfig c;
    c.max_tokens = 32;
    c.rollouts_per_question = 16;
    return c;
  }();
  RewardConfig reward;
  TrainerConfig trainer = [] {
    TrainerConfig c;
    c.learning_rate = 0.01;
    c.optimizer = OptimizerKind::Adam;
    c.advantage_mode = AdvantageMode::GroupRelative;
    c.train_batch = 4096;
    return c;
  }();
  std::size_t stage1_updates = 100;
  std::size_t stage2_updates = 300;

  void validate() const {
    rollout.validate();
    trainer.validate();
    if (world.n_questions + heldout > pool_questions) {
      throw Error(ErrorCode::InvalidConfig,
                  "pool_questions must cover the Stage-1 questions and the held-out set");
    }
  }
};

inline nlohmann::json to_json(const DeskConfig& c) {
  return {{"world", to_json(c.world)},
          {"pool_questions", c.pool_questions},
          {"heldout", c.heldout},
          {"toy", to_json(c.toy)},
          {"rollout", to_json(c.rollout)},
          {"reward", to_json(c.reward)},
          {"trainer", to_json(c.trainer)},
          {"stage1_updates", c.stage1_updates},
          {"stage2_updates", c.stage2_updates}};
}

inline void from_json_into(const nlohmann::json& j, DeskConfig& c) {
  if (j.contains("world")) from_json_into(j.at("world"), c.world);
  c.pool_questions = j.value("pool_questions", c.pool_questions);
  c.heldout = j.value("heldout", c.heldout);
  if (j.contains("toy")) from_json_into(j.at("toy"), c.toy);
  if (j.contains("rollout")) from_json_into(j.at("rollout"), c.rollout);
  if (j.contains("reward")) from_json_into(j.at("reward"), c.reward);
  if (j.contains("trainer")) from_json_into(j.at("trainer"), c.trainer);
  c.stage1_updates = j.value("stage1_updates", c.stage1_updates);
  c.stage2_updates = j.value("stage2_updates", c.stage2_updates);
}

/// The question pool and its splits. Question generation draws after the
/// corpus, so the pool world has the Stage-1 world's corpus and its questions
/// as a prefix.
struct DeskData {
  std::shared_ptr<const SynthWorld> world;
  std::shared_ptr<const LocalRetriever> env;
  std::vector<QAItem> stage1;
  std::vector<QAItem> stage2;
  std::vector<QAItem> heldout;
};

inline DeskData make_desk_data(const DeskConfig& cfg) {
  cfg.validate();
  WorldConfig wc = cfg.world;
  wc.n_questions = cfg.pool_questions;
  auto world = std::make_shared<const SynthWorld>(generate_world(wc));
  DeskData d;
  d.world = world;
  d.env = std::make_shared<const LocalRetriever>(world->corpus(), cfg.world.k_top);
  const auto items = world->items();
  const auto n1 = static_cast<std::ptrdiff_t>(cfg.world.n_questions);
  const auto nh = static_cast<std::ptrdiff_t>(cfg.heldout);
  d.stage1.assign(items.begin(), items.begin() + n1);
  d.stage2.assign(items.begin(), items.end() - nh);
  d.heldout.assign(items.end() - nh, items.end());
  return d;
}

inline ToyPolicy make_desk_policy(const DeskData& d, const DeskConfig& cfg) {
  return ToyPolicy(d.world->toy_vocab(cfg.rollout.tags), cfg.toy);
}

inline StageInputs desk_stage_inputs(const DeskConfig& cfg, const DeskData& d, StageId stage,
                                     std::uint64_t seed) {
  StageInputs in;
  in.stage = stage;
  in.items = stage == StageId::Stage1 ? d.stage1 : d.stage2;
  in.env = d.env.get();
  in.rollout = cfg.rollout;
  in.reward = cfg.reward;
  in.reward.stage = stage;
  in.reward.tags = cfg.rollout.tags;
  in.trainer = cfg.trainer;
  in.trainer.updates = stage == StageId::Stage1 ? cfg.stage1_updates : cfg.stage2_updates;
  in.trainer.seed = mix_seed(seed, stage == StageId::Stage1 ? 1 : 2);
  return in;
}

inline TrainState fresh_train_state(const TrainerConfig& t) {
  TrainState st;
  st.rng.seed(mix_seed(t.seed, 0xdadaULL));
  st.optimizer = Optimizer(t);
  return st;
}

}  // namespace searchrl
