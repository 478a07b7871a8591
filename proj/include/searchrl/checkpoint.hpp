#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/toy_policy.hpp"
#include "searchrl/trainer.hpp"

namespace searchrl {

inline constexpr int kCheckpointVersion = 1;

/// FNV-1a, for provenance digests of parent checkpoints.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

inline void set_rng_state(Rng& rng, const std::string& s) {
  std::istringstream ss(s);
  ss >> rng;
  if (!ss) throw Error(ErrorCode::Parse, "bad RNG state in checkpoint");
}

struct Checkpoint {
  StageId stage = StageId::Stage1;
  ToyPolicy policy;
  TrainState state;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json provenance = nlohmann::json::object();
};

inline nlohmann::json to_json(const Checkpoint& c) {
  return {{"format", "searchrl-checkpoint"},
          {"version", kCheckpointVersion},
          {"stage", to_string(c.stage)},
          {"step", c.state.step},
          {"cursor", c.state.cursor},
          {"order", c.state.order},
          {"rng_state", rng_state(c.state.rng)},
          {"optimizer", c.state.optimizer.state()},
          {"config", c.config},
          {"provenance", c.provenance},
          {"policy", c.policy.to_json()}};
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp);
    out << to_json(c).dump() << '\n';
    if (!out) throw Error(ErrorCode::Io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// `trainer` supplies the optimizer hyperparameters for resuming.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainerConfig& trainer = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
  }
  if (j.value("format", std::string{}) != "searchrl-checkpoint") {
    throw Error(ErrorCode::Parse, path.string() + " is not a checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw Error(ErrorCode::Parse, path.string() + ": unsupported checkpoint version " +
                                      std::to_string(j.value("version", 0)));
  }
  Checkpoint c;
  c.stage = j.at("stage") == "stage1" ? StageId::Stage1 : StageId::Stage2;
  c.policy = ToyPolicy::from_json(j.at("policy"));
  c.state.step = j.at("step");
  c.state.cursor = j.at("cursor");
  c.state.order = j.at("order").get<std::vector<std::size_t>>();
  set_rng_state(c.state.rng, j.at("rng_state"));
  c.state.optimizer = Optimizer(trainer);
  c.state.optimizer.load_state(j.at("optimizer"));
  c.config = j.value("config", nlohmann::json::object());
  c.provenance = j.value("provenance", nlohmann::json::object());
  return c;
}

}  // namespace searchrl
