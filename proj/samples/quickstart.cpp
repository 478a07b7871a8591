// Builds a small synthetic world, shows an oracle episode with its masked
// document spans, then runs a few Stage-1 updates on the toy policy.

#include <iostream>

#include "searchrl/searchrl.hpp"

using namespace searchrl;

int main() {
  DeskConfig cfg;
  cfg.trainer.train_batch = 512;
  const auto d = make_desk_data(cfg);
  std::cout << "world: " << d.world->entities.size() << " entities, " << d.world->passages.size()
            << " passages, " << d.world->questions.size() << " questions\n";

  const auto& q = d.world->questions.front();
  const auto ep = oracle_solve(q, d.world, *d.env);
  std::cout << "\nQ: " << q.item.question << "\n";
  const auto mask = ep.loss_mask();
  for (std::size_t i = 0; i < ep.tokens.size(); ++i) {
    if (!mask[i] && (i == 0 || mask[i - 1])) std::cout << "\n  [masked] ";
    std::cout << ep.tokens[i].piece;
    if (!mask[i] && (i + 1 == ep.tokens.size() || mask[i + 1])) std::cout << "\n  [/masked]";
  }
  const auto r = stage2_reward(ep, q.item.gold_answer);
  std::cout << "\nanswer=" << ep.answer().value_or("") << " gold=" << q.item.gold_answer
            << " reward=" << r.total << "\n\n";

  auto policy = make_desk_policy(d, cfg);
  const auto ref = policy.snapshot();
  auto in = desk_stage_inputs(cfg, d, StageId::Stage1, 1);
  in.trainer.updates = 20;
  auto st = fresh_train_state(in.trainer);
  train_stage(policy, ref, in, st, [](const UpdateReport& u) {
    if (u.step % 5 == 4) {
      std::cout << "stage1 update " << u.step + 1 << ": reward " << u.mean_reward << ", retrieval "
                << u.retrieval_fraction << "\n";
    }
  });
  return 0;
}
