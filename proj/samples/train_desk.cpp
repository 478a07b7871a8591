// Full desk run: Stage 1 then Stage 2 for one seed, with held-out scores
// before and after each stage.
//
//   sample_train_desk [seed] [config.json]

#include <fstream>
#include <iostream>

#include "searchrl/searchrl.hpp"

using namespace searchrl;

namespace {

void report(const char* label, const ToyPolicy& p, const DeskConfig& cfg, const DeskData& d) {
  EvalConfig ec;
  ec.rollout = cfg.rollout;
  ec.rollout.temperature = 0.0;
  const auto res = run_benchmark(p, *d.env, d.heldout, ec);
  std::cout << label << "\n" << render_table(res.suite) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 1;
  DeskConfig cfg;
  if (argc > 2) {
    std::ifstream in(argv[2]);
    from_json_into(nlohmann::json::parse(in), cfg);
  }
  const auto d = make_desk_data(cfg);
  auto policy = make_desk_policy(d, cfg);
  report("uniform policy", policy, cfg, d);

  for (auto stage : {StageId::Stage1, StageId::Stage2}) {
    const auto ref = policy.snapshot();
    auto in = desk_stage_inputs(cfg, d, stage, seed);
    auto st = fresh_train_state(in.trainer);
    train_stage(policy, ref, in, st, [&](const UpdateReport& u) {
      if ((u.step + 1) % 25 == 0) {
        std::cout << to_string(stage) << " " << u.step + 1 << "/" << in.trainer.updates << " reward "
                  << u.mean_reward << " retrieval " << u.retrieval_fraction << " answer " << u.mean_answer
                  << "\n";
      }
    });
    report(stage == StageId::Stage1 ? "after stage1" : "after stage2", policy, cfg, d);
  }
  return 0;
}
