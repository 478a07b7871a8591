#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/retrieval.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/rollout.hpp"

namespace searchrl {

enum class Difficulty { Easy, Medium, Difficult, Unprobed };

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Medium: return "medium";
    case Difficulty::Difficult: return "difficult";
    case Difficulty::Unprobed: return "unprobed";
  }
  return "unprobed";
}

inline Difficulty difficulty_from_string(std::string_view s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "medium") return Difficulty::Medium;
  if (s == "difficult") return Difficulty::Difficult;
  if (s == "unprobed") return Difficulty::Unprobed;
  throw Error(ErrorCode::Parse, "unknown difficulty '" + std::string(s) + "'");
}

/// Easy < 10 rollouts, Medium 10..20 inclusive, Difficult > 20.
inline Difficulty bucket(std::size_t rollouts_used) {
  if (rollouts_used < 10) return Difficulty::Easy;
  if (rollouts_used <= 20) return Difficulty::Medium;
  return Difficulty::Difficult;
}

struct DifficultyLabel {
  Difficulty value = Difficulty::Unprobed;
  std::size_t rollouts_used = 0;

  bool operator==(const DifficultyLabel&) const = default;
};

using SuccessPredicate = std::function<bool(const std::string& pred, const std::string& gold)>;

inline SuccessPredicate cem_predicate(NormalizeOptions opts = {}) {
  return [opts](const std::string& p, const std::string& g) { return cover_exact_match(p, g, opts); };
}

/// Rolls out until the predicate accepts the extracted answer; rollouts_used
/// is the 1-based index of the first success, or max_rollouts + 1.
inline DifficultyLabel probe_difficulty(const QAItem& item, const Policy& probe, const Retriever& env,
                                        std::size_t max_rollouts, const RolloutConfig& cfg,
                                        std::uint64_t seed,
                                        const SuccessPredicate& success = cem_predicate()) {
  if (max_rollouts <= 20) {
    throw Error(ErrorCode::InvalidArgument, "max_rollouts must exceed 20 so Difficult is reachable");
  }
  for (std::size_t k = 1; k <= max_rollouts; ++k) {
    Rng rng(mix_seed(seed, k));
    Episode ep;
    try {
      ep = rollout(probe, nullptr, item, env, cfg, rng);
    } catch (const std::exception&) {
      return {Difficulty::Unprobed, 0};
    }
    const auto ans = ep.answer();
    if (ans && success(*ans, item.gold_answer)) return {bucket(k), k};
  }
  return {bucket(max_rollouts + 1), max_rollouts + 1};
}

struct LabeledItem {
  QAItem item;
  DifficultyLabel label;
};

inline nlohmann::json to_json(const LabeledItem& l) {
  auto j = to_json(l.item);
  j["difficulty"] = to_string(l.label.value);
  j["rollouts_used"] = l.label.rollouts_used;
  return j;
}

inline LabeledItem labeled_item_from_json(const nlohmann::json& j) {
  return {qa_item_from_json(j),
          {difficulty_from_string(j.at("difficulty").get<std::string>()),
           j.at("rollouts_used").get<std::size_t>()}};
}

inline std::vector<LabeledItem> read_pool(const std::string& path) {
  std::vector<LabeledItem> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (is_blank(line)) continue;
    try {
      out.push_back(labeled_item_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, path + ": " + e.what());
    }
  }
  return out;
}

/// Probes every item not yet in the cache file, appending each label as it
/// is produced so an interrupted run resumes where it stopped. Returns the
/// pool in `items` order.
inline std::vector<LabeledItem> probe_pool(const std::vector<QAItem>& items, const Policy& probe,
                                           const Retriever& env, std::size_t max_rollouts,
                                           const RolloutConfig& cfg, std::uint64_t seed,
                                           const std::string& cache_path = {},
                                           const SuccessPredicate& success = cem_predicate()) {
  std::map<std::string, DifficultyLabel> known;
  if (!cache_path.empty()) {
    for (const auto& l : read_pool(cache_path)) known[l.item.id] = l.label;
  }
  std::ofstream cache;
  if (!cache_path.empty()) {
    cache.open(cache_path, std::ios::app);
    if (!cache) throw Error(ErrorCode::Io, "cannot write " + cache_path);
  }
  std::vector<LabeledItem> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    auto it = known.find(item.id);
    if (it != known.end()) {
      out.push_back({item, it->second});
      continue;
    }
    const auto label =
        probe_difficulty(item, probe, env, max_rollouts, cfg, mix_seed(seed, i), success);
    out.push_back({item, label});
    if (cache.is_open()) cache << to_json(out.back()).dump() << '\n' << std::flush;
  }
  return out;
}

struct CompositionCell {
  std::string source;
  Difficulty difficulty = Difficulty::Medium;
  std::size_t count = 0;

  bool operator==(const CompositionCell&) const = default;
};

using CompositionSpec = std::vector<CompositionCell>;

inline std::string cell_name(const std::string& source, Difficulty d) {
  return source + "/" + to_string(d);
}

/// The training-data table, divided by `scale` with halves rounded up.
inline CompositionSpec standard_composition(StageId stage, std::size_t scale = 1,
                                           const std::string& hotpot = "hotpotqa",
                                           const std::string& wiki = "2wiki") {
  if (scale == 0) throw Error(ErrorCode::InvalidArgument, "scale must be positive");
  auto scaled = [&](std::size_t n) { return (2 * n + scale) / (2 * scale); };
  if (stage == StageId::Stage1) {
    return {{hotpot, Difficulty::Medium, scaled(200)}, {wiki, Difficulty::Medium, scaled(150)}};
  }
  return {{hotpot, Difficulty::Medium, scaled(2561)},
          {hotpot, Difficulty::Difficult, scaled(2000)},
          {wiki, Difficulty::Medium, scaled(1087)},
          {wiki, Difficulty::Difficult, scaled(2500)}};
}

/// The "w/o Difficult" mixture: Difficult cells fold into Medium of the same
/// source.
inline CompositionSpec without_difficult(const CompositionSpec& spec) {
  CompositionSpec out;
  for (const auto& c : spec) {
    const Difficulty d = c.difficulty == Difficulty::Difficult ? Difficulty::Medium : c.difficulty;
    auto it = std::find_if(out.begin(), out.end(), [&](const CompositionCell& o) {
      return o.source == c.source && o.difficulty == d;
    });
    if (it == out.end()) {
      out.push_back({c.source, d, c.count});
    } else {
      it->count += c.count;
    }
  }
  return out;
}

struct StageDataset {
  StageId stage = StageId::Stage1;
  std::vector<LabeledItem> items;
  std::map<std::string, std::size_t> composition;  // "source/difficulty" -> count

  std::vector<QAItem> qa_items() const {
    std::vector<QAItem> out;
    for (const auto& l : items) out.push_back(l.item);
    return out;
  }
};

/// Draws each cell from the matching pool items, in spec order, without
/// replacement. Deterministic in (pool order, spec, seed).
inline StageDataset assemble_stage_dataset(const std::vector<LabeledItem>& pool, StageId stage,
                                           const CompositionSpec& spec, std::uint64_t seed) {
  StageDataset ds;
  ds.stage = stage;
  std::set<std::string> taken;
  for (std::size_t c = 0; c < spec.size(); ++c) {
    const auto& cell = spec[c];
    std::vector<std::size_t> cands;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const auto& l = pool[i];
      if (l.item.source == cell.source && l.label.value == cell.difficulty &&
          !taken.contains(l.item.id)) {
        cands.push_back(i);
      }
    }
    if (cands.size() < cell.count) {
      throw Error(ErrorCode::InsufficientPool,
                  "cell " + cell_name(cell.source, cell.difficulty) + " needs " +
                      std::to_string(cell.count) + " items, pool has " +
                      std::to_string(cands.size()));
    }
    Rng rng(mix_seed(seed, c));
    shuffle(cands, rng);
    cands.resize(cell.count);
    std::sort(cands.begin(), cands.end());
    for (auto i : cands) {
      ds.items.push_back(pool[i]);
      taken.insert(pool[i].item.id);
    }
    ds.composition[cell_name(cell.source, cell.difficulty)] += cell.count;
  }
  return ds;
}

inline nlohmann::json to_json(const CompositionSpec& spec) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : spec) {
    j.push_back({{"source", c.source}, {"difficulty", to_string(c.difficulty)}, {"count", c.count}});
  }
  return j;
}

inline CompositionSpec composition_from_json(const nlohmann::json& j) {
  CompositionSpec spec;
  for (const auto& c : j) {
    spec.push_back({c.at("source").get<std::string>(),
                    difficulty_from_string(c.at("difficulty").get<std::string>()),
                    c.at("count").get<std::size_t>()});
  }
  return spec;
}

inline void write_dataset(const std::string& path, const StageDataset& ds) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  for (const auto& l : ds.items) out << to_json(l).dump() << '\n';
}

inline StageDataset read_dataset(const std::string& path, StageId stage) {
  StageDataset ds;
  ds.stage = stage;
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::Io, "cannot open " + path);
  ds.items = read_pool(path);
  for (const auto& l : ds.items) ++ds.composition[cell_name(l.item.source, l.label.value)];
  return ds;
}

}  // namespace searchrl
