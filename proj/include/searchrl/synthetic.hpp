#pragma once

// A small multi-hop QA world. Entities are pseudo-words, relations are single
// words, and every (subject, relation) pair has exactly one object. Each fact
// becomes a passage "<s> <r> <o>." titled <s>; distractors "<s> linked <x>."
// share the subject only. Questions chain two facts:
//   what is the <r2> of the <r1> of <s> ?   ->   o = f(f(s, r1), r2)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/retrieval.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/rollout.hpp"
#include "searchrl/toy_policy.hpp"

namespace searchrl {

struct Triple {
  std::string subject;
  std::string relation;
  std::string object;

  bool operator==(const Triple&) const = default;
  auto operator<=>(const Triple&) const = default;
};

struct SynthQuestion {
  QAItem item;
  std::array<Triple, 2> chain;
  std::array<std::string, 2> support_ids;  // passage ids of the two hops
  std::vector<std::string> distractor_ids;

  std::string first_query() const { return chain[0].subject + " " + chain[0].relation; }
  std::string second_query() const { return chain[1].subject + " " + chain[1].relation; }
};

struct WorldConfig {
  std::uint64_t seed = 7;
  std::size_t n_entities = 40;
  std::size_t n_relations = 4;
  std::size_t n_questions = 60;
  std::size_t distractors_per_entity = 1;
  std::size_t k_top = 5;

  bool operator==(const WorldConfig&) const = default;
};

inline nlohmann::json to_json(const WorldConfig& c) {
  return {{"seed", c.seed},
          {"n_entities", c.n_entities},
          {"n_relations", c.n_relations},
          {"n_questions", c.n_questions},
          {"distractors_per_entity", c.distractors_per_entity},
          {"k_top", c.k_top}};
}

inline void from_json_into(const nlohmann::json& j, WorldConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.n_entities = j.value("n_entities", c.n_entities);
  c.n_relations = j.value("n_relations", c.n_relations);
  c.n_questions = j.value("n_questions", c.n_questions);
  c.distractors_per_entity = j.value("distractors_per_entity", c.distractors_per_entity);
  c.k_top = j.value("k_top", c.k_top);
}

inline const std::vector<std::string>& relation_pool() {
  static const std::vector<std::string> pool{
      "founder", "capital", "mentor", "spouse", "rival",  "author",
      "leader",  "owner",   "parent", "ally",   "patron", "heir"};
  return pool;
}

inline const std::vector<std::string>& glue_words() {
  static const std::vector<std::string> glue{"what", "is", "the", "of", "linked", ":", ".", "?"};
  return glue;
}

struct SynthWorld {
  WorldConfig config;
  std::vector<std::string> entities;
  std::vector<std::string> relations;
  std::vector<Triple> facts;
  std::vector<Passage> passages;
  std::vector<SynthQuestion> questions;

  /// Every word the world can produce, in a fixed order.
  std::vector<std::string> vocabulary() const {
    std::vector<std::string> v = glue_words();
    v.insert(v.end(), relations.begin(), relations.end());
    v.insert(v.end(), entities.begin(), entities.end());
    return v;
  }

  /// Entity and relation words share output columns by class unless `tied` is off.
  ToyVocab toy_vocab(TagTable tags = {}, bool tied = true) const {
    std::map<std::string, std::string> classes;
    if (tied) {
      for (const auto& e : entities) classes[e] = "entity";
      for (const auto& r : relations) classes[r] = "relation";
    }
    return ToyVocab(vocabulary(), std::move(tags), std::move(classes));
  }

  std::shared_ptr<const Corpus> corpus() const {
    return std::make_shared<const Corpus>(Corpus::build(passages));
  }

  std::vector<QAItem> items() const {
    std::vector<QAItem> out;
    for (const auto& q : questions) out.push_back(q.item);
    return out;
  }

  const SynthQuestion* find_question(std::string_view text) const {
    for (const auto& q : questions) {
      if (q.item.question == text) return &q;
    }
    return nullptr;
  }
};

namespace detail {

inline std::string pseudo_word(Rng& rng) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  const std::size_t syllables = 2 + uniform_index(rng, 2);
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += onsets[uniform_index(rng, 14)];
    w += vowels[uniform_index(rng, 5)];
  }
  return w;
}

}  // namespace detail

/// Deterministic under config.seed. Every returned question passes the
/// two-query self-check: both supporting passages rank first under BM25.
inline SynthWorld generate_world(const WorldConfig& cfg) {
  if (cfg.n_entities < 4 || cfg.n_relations == 0 || cfg.n_relations > relation_pool().size()) {
    throw Error(ErrorCode::InvalidConfig, "world needs >= 4 entities and 1.." +
                                              std::to_string(relation_pool().size()) + " relations");
  }
  Rng rng(mix_seed(cfg.seed, 0x5eedULL));
  SynthWorld w;
  w.config = cfg;
  std::set<std::string> reserved(glue_words().begin(), glue_words().end());
  reserved.insert({"a", "an"});
  reserved.insert(relation_pool().begin(), relation_pool().end());
  std::set<std::string> seen;
  while (w.entities.size() < cfg.n_entities) {
    auto name = detail::pseudo_word(rng);
    if (reserved.contains(name) || !seen.insert(name).second) continue;
    w.entities.push_back(name);
  }
  w.relations.assign(relation_pool().begin(), relation_pool().begin() + cfg.n_relations);

  std::map<std::pair<std::string, std::string>, std::string> object_of;
  std::map<std::pair<std::string, std::string>, std::string> passage_of;
  std::map<std::string, std::vector<std::string>> distractors_of;
  std::size_t pid = 0;
  auto next_id = [&](char prefix) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%c%05zu", prefix, pid++);
    return std::string(buf);
  };
  for (const auto& s : w.entities) {
    for (const auto& r : w.relations) {
      std::string o;
      do {
        o = w.entities[uniform_index(rng, w.entities.size())];
      } while (o == s);
      w.facts.push_back({s, r, o});
      object_of[{s, r}] = o;
      const auto id = next_id('f');
      passage_of[{s, r}] = id;
      w.passages.push_back({id, s, s + " " + r + " " + o + "."});
    }
    for (std::size_t d = 0; d < cfg.distractors_per_entity; ++d) {
      std::string x;
      do {
        x = w.entities[uniform_index(rng, w.entities.size())];
      } while (x == s);
      const auto id = next_id('d');
      distractors_of[s].push_back(id);
      w.passages.push_back({id, s, s + " linked " + x + "."});
    }
  }

  const Corpus corpus = Corpus::build(w.passages);
  auto ranks_first = [&](const std::string& query, const std::string& id) {
    auto r = search(corpus, query, cfg.k_top);
    return !r.hits.empty() && r.hits.front().id == id;
  };

  std::set<std::tuple<std::string, std::string, std::string>> used;
  const std::size_t max_attempts = 200 * (cfg.n_questions + 1);
  for (std::size_t attempt = 0; w.questions.size() < cfg.n_questions; ++attempt) {
    if (attempt >= max_attempts) {
      throw Error(ErrorCode::InvalidConfig, "could not generate " + std::to_string(cfg.n_questions) +
                                                " distinct solvable questions");
    }
    const auto& s = w.entities[uniform_index(rng, w.entities.size())];
    const auto& r1 = w.relations[uniform_index(rng, w.relations.size())];
    const auto& r2 = w.relations[uniform_index(rng, w.relations.size())];
    const auto& m = object_of.at({s, r1});
    const auto& o = object_of.at({m, r2});
    if (o == s || o == m) continue;
    if (!used.insert({s, r1, r2}).second) continue;
    const auto& p1 = passage_of.at({s, r1});
    const auto& p2 = passage_of.at({m, r2});
    if (!ranks_first(s + " " + r1, p1) || !ranks_first(m + " " + r2, p2)) continue;
    SynthQuestion q;
    const std::size_t idx = w.questions.size();
    q.item.id = "q" + std::to_string(idx);
    q.item.question = "what is the " + r2 + " of the " + r1 + " of " + s + " ?";
    q.item.gold_answer = o;
    q.item.source = idx % 2 == 0 ? "hotpotqa" : "2wiki";
    q.chain = {Triple{s, r1, m}, Triple{m, r2, o}};
    q.support_ids = {p1, p2};
    q.distractor_ids = distractors_of[s];
    for (const auto& d : distractors_of[m]) q.distractor_ids.push_back(d);
    w.questions.push_back(std::move(q));
  }
  return w;
}

/// Deterministic split: the last `heldout` questions are held out.
inline std::pair<std::vector<QAItem>, std::vector<QAItem>> split_items(const SynthWorld& w,
                                                                       std::size_t heldout) {
  auto items = w.items();
  heldout = std::min(heldout, items.size());
  std::vector<QAItem> train(items.begin(), items.end() - static_cast<std::ptrdiff_t>(heldout));
  std::vector<QAItem> test(items.end() - static_cast<std::ptrdiff_t>(heldout), items.end());
  return {train, test};
}

// ---------------------------------------------------------------------------
// Files: world.json (config, entities, relations, facts, questions with
// chains), corpus.jsonl, questions.jsonl.

inline nlohmann::json to_json(const SynthQuestion& q) {
  auto j = to_json(q.item);
  j["chain"] = {{q.chain[0].subject, q.chain[0].relation, q.chain[0].object},
                {q.chain[1].subject, q.chain[1].relation, q.chain[1].object}};
  j["support_ids"] = q.support_ids;
  j["distractor_ids"] = q.distractor_ids;
  return j;
}

inline SynthQuestion synth_question_from_json(const nlohmann::json& j) {
  SynthQuestion q;
  q.item = qa_item_from_json(j);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& t = j.at("chain").at(k);
    q.chain[k] = {t.at(0), t.at(1), t.at(2)};
    q.support_ids[k] = j.at("support_ids").at(k);
  }
  q.distractor_ids = j.value("distractor_ids", std::vector<std::string>{});
  return q;
}

inline nlohmann::json to_json(const SynthWorld& w) {
  nlohmann::json facts = nlohmann::json::array();
  for (const auto& f : w.facts) facts.push_back({f.subject, f.relation, f.object});
  nlohmann::json qs = nlohmann::json::array();
  for (const auto& q : w.questions) qs.push_back(to_json(q));
  return {{"format", "searchrl-world"}, {"version", 1},       {"config", to_json(w.config)},
          {"entities", w.entities},     {"relations", w.relations}, {"facts", facts},
          {"questions", qs}};
}

inline SynthWorld world_from_json(const nlohmann::json& j, std::vector<Passage> passages) {
  SynthWorld w;
  from_json_into(j.at("config"), w.config);
  w.entities = j.at("entities").get<std::vector<std::string>>();
  w.relations = j.at("relations").get<std::vector<std::string>>();
  for (const auto& f : j.at("facts")) w.facts.push_back({f.at(0), f.at(1), f.at(2)});
  for (const auto& q : j.at("questions")) w.questions.push_back(synth_question_from_json(q));
  w.passages = std::move(passages);
  return w;
}

inline void save_world(const SynthWorld& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "world.json");
    if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / "world.json").string());
    out << to_json(w).dump(1) << '\n';
  }
  write_passages((dir / "corpus.jsonl").string(), w.passages);
  write_qa((dir / "questions.jsonl").string(), w.items());
}

inline SynthWorld load_world(const std::filesystem::path& dir) {
  std::ifstream in(dir / "world.json");
  if (!in) throw Error(ErrorCode::Io, "cannot open " + (dir / "world.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, (dir / "world.json").string() + ": " + e.what());
  }
  return world_from_json(j, read_passages((dir / "corpus.jsonl").string()));
}

// ---------------------------------------------------------------------------
// Oracle

/// Canonical solution text without the injected documents.
inline std::string oracle_script(const SynthQuestion& q, const TagTable& tags = {}) {
  const std::string q1 = q.first_query();
  const std::string q2 = q.second_query();
  const std::string& o = q.item.gold_answer;
  return tags.think_open + " " + q1 + tags.query_open + " " + q1 + tags.query_close + " " + q2 +
         tags.query_open + " " + q2 + tags.query_close + " " + o + tags.think_close +
         tags.answer_open + " " + o + tags.answer_close;
}

/// Scripted policy that replays the oracle script for known questions. Its
/// log-probs are 0 on the script and -inf elsewhere.
class OraclePolicy : public Policy {
 public:
  explicit OraclePolicy(std::shared_ptr<const SynthWorld> world, TagTable tags = {})
      : world_(std::move(world)), tags_(std::move(tags)), vocab_(world_->toy_vocab(tags_)) {}

  std::vector<Token> tokenize(std::string_view text) const override {
    return vocab_.tokenize(text);
  }

  std::string descriptor() const override { return "oracle"; }

  Generation generate(const Context& ctx, const GenerateRequest& req, Rng&) const override {
    const auto script = script_for(ctx.question);
    std::size_t k = generated_so_far(ctx);
    Generation g;
    std::string text;
    for (; k < script.size() && g.tokens.size() < req.max_tokens; ++k) {
      g.tokens.push_back(script[k]);
      g.logprobs.push_back(0.0);
      text += script[k].piece;
      bool stop = false;
      for (const auto& s : req.stop) {
        if (!s.empty() && text.size() >= s.size() && text.ends_with(s)) stop = true;
      }
      if (stop) break;
    }
    return g;
  }

  std::vector<double> score(const Context& ctx,
                            std::span<const Token> continuation) const override {
    const auto script = script_for(ctx.question);
    std::vector<double> out(continuation.size(), 0.0);
    std::size_t k = generated_so_far(ctx);
    const std::size_t base = ctx.response.size();
    for (std::size_t i = 0; i < continuation.size(); ++i) {
      bool observed = false;
      for (const auto& s : ctx.observed) observed = observed || s.contains(base + i);
      if (observed) continue;
      const bool match = k < script.size() && script[k].piece == continuation[i].piece;
      out[i] = match ? 0.0 : -std::numeric_limits<double>::infinity();
      ++k;
    }
    return out;
  }

 private:
  std::vector<Token> script_for(std::string_view question) const {
    const auto* q = world_->find_question(question);
    if (!q) throw Error(ErrorCode::OracleFailure, "oracle has no script for '" + std::string(question) + "'");
    return vocab_.tokenize(oracle_script(*q, tags_));
  }

  static std::size_t generated_so_far(const Context& ctx) {
    std::size_t masked = 0;
    for (const auto& s : ctx.observed) {
      if (s.end <= ctx.response.size()) masked += s.size();
    }
    return ctx.response.size() - masked;
  }

  std::shared_ptr<const SynthWorld> world_;
  TagTable tags_;
  ToyVocab vocab_;
};

/// Runs the oracle through the real engine. Throws OracleFailure when a
/// supporting passage is not among the retrieved hits.
inline Episode oracle_solve(const SynthQuestion& q, std::shared_ptr<const SynthWorld> world,
                            const LocalRetriever& env, RolloutConfig cfg = {}) {
  for (std::size_t hop = 0; hop < 2; ++hop) {
    const auto res = env.retrieve(hop == 0 ? q.first_query() : q.second_query());
    const bool found = std::any_of(res.hits.begin(), res.hits.end(),
                                   [&](const Hit& h) { return h.id == q.support_ids[hop]; });
    if (!found) {
      throw Error(ErrorCode::OracleFailure,
                  "supporting passage " + q.support_ids[hop] + " not retrieved for " + q.item.id);
    }
  }
  OraclePolicy oracle(std::move(world), cfg.tags);
  cfg.temperature = 0.0;
  Rng rng(0);
  return rollout(oracle, nullptr, q.item, env, cfg, rng);
}

/// Stand-in for a probe model: follows the oracle script but answers with a
/// wrong entity except with a per-question success probability drawn
/// log-uniformly from [p_min, p_max]. Gives a spread of probe difficulties.
class ProbePolicy : public Policy {
 public:
  ProbePolicy(std::shared_ptr<const SynthWorld> world, double p_min = 0.003, double p_max = 0.6,
              TagTable tags = {})
      : oracle_(world, tags), world_(std::move(world)), tags_(std::move(tags)) {
    Rng rng(mix_seed(world_->config.seed, 0x9b0bULL));
    const double lo = std::log(p_min);
    const double hi = std::log(p_max);
    for (const auto& q : world_->questions) {
      success_[q.item.question] = std::exp(lo + (hi - lo) * uniform01(rng));
    }
  }

  double success_probability(std::string_view question) const {
    auto it = success_.find(std::string(question));
    return it == success_.end() ? 0.0 : it->second;
  }

  std::vector<Token> tokenize(std::string_view text) const override {
    return oracle_.tokenize(text);
  }

  std::string descriptor() const override { return "probe"; }

  Generation generate(const Context& ctx, const GenerateRequest& req, Rng& rng) const override {
    Generation g = oracle_.generate(ctx, req, rng);
    const auto* q = world_->find_question(ctx.question);
    if (!q) return g;
    const std::string gold = " " + q->item.gold_answer;
    const bool final_chunk =
        std::any_of(g.tokens.begin(), g.tokens.end(),
                    [&](const Token& t) { return t.piece == tags_.answer_close; });
    if (!final_chunk || uniform01(rng) < success_probability(ctx.question)) return g;
    std::string wrong;
    do {
      wrong = world_->entities[uniform_index(rng, world_->entities.size())];
    } while (wrong == q->item.gold_answer);
    const auto repl = oracle_.tokenize(" " + wrong).front();
    for (auto& t : g.tokens) {
      if (t.piece == gold) t = repl;
    }
    return g;
  }

  std::vector<double> score(const Context&, std::span<const Token> continuation) const override {
    return std::vector<double>(continuation.size(), 0.0);
  }

 private:
  OraclePolicy oracle_;
  std::shared_ptr<const SynthWorld> world_;
  TagTable tags_;
  std::map<std::string, double> success_;
};

}  // namespace searchrl
