// searchrl: synthetic worlds, data selection, two-stage training, rollout
// dumps and evaluation from the command line.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "searchrl/checkpoint.hpp"
#include "searchrl/data_pipeline.hpp"
#include "searchrl/desk.hpp"
#include "searchrl/eval.hpp"
#include "searchrl/http.hpp"

namespace fs = std::filesystem;
using namespace searchrl;

namespace {

struct RetrieverOptions {
  std::string kind = "local";  // local | web
  std::string search_url;
  std::string summarizer_url;
  int max_pages = 3;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DeskConfig desk;
  RetrieverOptions retriever;
};

nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"desk", searchrl::to_json(c.desk)},
          {"retriever",
           {{"kind", c.retriever.kind},
            {"search_url", c.retriever.search_url},
            {"summarizer_url", c.retriever.summarizer_url},
            {"max_pages", c.retriever.max_pages}}}};
}

void from_json_into(const nlohmann::json& j, RunConfig& c) {
  c.seed = j.value("seed", c.seed);
  if (j.contains("desk")) searchrl::from_json_into(j.at("desk"), c.desk);
  if (j.contains("retriever")) {
    const auto& r = j.at("retriever");
    c.retriever.kind = r.value("kind", c.retriever.kind);
    c.retriever.search_url = r.value("search_url", c.retriever.search_url);
    c.retriever.summarizer_url = r.value("summarizer_url", c.retriever.summarizer_url);
    c.retriever.max_pages = r.value("max_pages", c.retriever.max_pages);
  }
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp);
    out << text;
    if (!out) throw Error(ErrorCode::Io, "write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

/// Line-oriented output that only appears under its final name on commit().
class PartialFile {
 public:
  explicit PartialFile(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    out_.open(path_.string() + ".partial");
    if (!out_) throw Error(ErrorCode::Io, "cannot write " + path_.string() + ".partial");
  }
  void line(const std::string& s) { out_ << s << '\n' << std::flush; }
  void commit() {
    out_.close();
    fs::rename(path_.string() + ".partial", path_);
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, p.string() + ": " + e.what());
  }
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

/// Records the effective config and start/finish times of one command.
class CommandLog {
 public:
  CommandLog(const fs::path& run_dir, std::string name, const nlohmann::json& config)
      : dir_(run_dir), name_(std::move(name)), started_(now_iso()) {
    write_atomic(dir_ / (name_ + ".config.json"), config.dump(2) + "\n");
  }
  void finish() {
    write_atomic(dir_ / (name_ + ".times.json"),
                 nlohmann::json{{"started", started_}, {"finished", now_iso()}}.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  std::string name_;
  std::string started_;
};

std::shared_ptr<const SynthWorld> world_for(const RunConfig& rc, const std::string& world_dir) {
  if (!world_dir.empty()) return std::make_shared<const SynthWorld>(load_world(world_dir));
  return make_desk_data(rc.desk).world;
}

std::shared_ptr<const Retriever> retriever_for(const RunConfig& rc, const SynthWorld& w) {
  if (rc.retriever.kind == "local") {
    return std::make_shared<LocalRetriever>(w.corpus(), rc.desk.world.k_top);
  }
  if (rc.retriever.kind != "web") {
    throw Error(ErrorCode::InvalidConfig, "retriever.kind must be local or web");
  }
  if (rc.retriever.search_url.empty()) {
    throw Error(ErrorCode::InvalidConfig, "web retrieval needs SEARCHRL_SEARCH_URL or retriever.search_url");
  }
  auto search = std::make_shared<HttpSearchClient>(rc.retriever.search_url,
                                                   env("SEARCHRL_SEARCH_TOKEN").value_or(""));
  std::shared_ptr<const Summarizer> summ;
  if (rc.retriever.summarizer_url.empty()) {
    summ = std::make_shared<IdentitySummarizer>();
  } else {
    summ = std::make_shared<HttpSummarizer>(rc.retriever.summarizer_url,
                                            env("SEARCHRL_SUMMARIZER_TOKEN").value_or(""));
  }
  return std::make_shared<WebRetriever>(search, summ, rc.retriever.max_pages, rc.desk.rollout.tags);
}

struct PolicyChoice {
  std::string kind = "oracle";  // oracle | uniform | checkpoint | http
  std::string checkpoint;
  std::string url;
};

std::shared_ptr<const Policy> policy_for(const RunConfig& rc, const PolicyChoice& pc,
                                         std::shared_ptr<const SynthWorld> w) {
  if (pc.kind == "oracle") return std::make_shared<OraclePolicy>(w, rc.desk.rollout.tags);
  if (pc.kind == "uniform") {
    return std::make_shared<ToyPolicy>(w->toy_vocab(rc.desk.rollout.tags), rc.desk.toy);
  }
  if (pc.kind == "checkpoint") {
    if (pc.checkpoint.empty()) throw Error(ErrorCode::InvalidConfig, "--policy checkpoint needs --checkpoint");
    return std::make_shared<ToyPolicy>(load_checkpoint(pc.checkpoint).policy);
  }
  if (pc.kind == "http") {
    const auto url = pc.url.empty() ? env("SEARCHRL_POLICY_URL").value_or("") : pc.url;
    if (url.empty()) throw Error(ErrorCode::InvalidConfig, "--policy http needs --policy-url or SEARCHRL_POLICY_URL");
    return std::make_shared<HttpPolicy>(url, env("SEARCHRL_POLICY_TOKEN").value_or(""));
  }
  throw Error(ErrorCode::InvalidConfig, "unknown policy '" + pc.kind + "'");
}

std::vector<QAItem> split_for(const RunConfig& rc, const SynthWorld& w, const std::string& split) {
  if (split == "all") return w.items();
  const auto [train, held] = split_items(w, std::min(rc.desk.heldout, w.questions.size()));
  if (split == "heldout") return held;
  if (split == "train") return train;
  throw Error(ErrorCode::InvalidConfig, "split must be heldout, train or all");
}

std::string highlight(const Episode& ep, bool color) {
  const std::string open = color ? "\x1b[2;36m" : "[[masked]]";
  const std::string close = color ? "\x1b[0m" : "[[/masked]]";
  std::string out;
  std::size_t s = 0;
  for (std::size_t i = 0; i < ep.tokens.size(); ++i) {
    if (s < ep.mask_spans.size() && i == ep.mask_spans[s].begin) out += open;
    out += ep.tokens[i].piece;
    if (s < ep.mask_spans.size() && i + 1 == ep.mask_spans[s].end) {
      out += close;
      ++s;
    }
  }
  return out;
}

std::string stage_name(StageId s) { return s == StageId::Stage1 ? "stage1" : "stage2"; }

/// Trains one stage, writing metrics and the checkpoint under run_dir.
void train_one(const RunConfig& rc, const DeskData& d, StageId stage, ToyPolicy policy,
               nlohmann::json provenance, const std::vector<QAItem>& override_items,
               const fs::path& run_dir, bool quiet) {
  auto in = desk_stage_inputs(rc.desk, d, stage, rc.seed);
  if (!override_items.empty()) in.items = override_items;
  const ToyPolicy ref = policy.snapshot();
  auto st = fresh_train_state(in.trainer);
  const auto name = stage_name(stage);
  PartialFile metrics(run_dir / (name + ".metrics.jsonl"));
  train_stage(policy, ref, in, st, [&](const UpdateReport& r) {
    metrics.line(to_json(r).dump());
    if (!quiet && ((r.step + 1) % 10 == 0 || r.step + 1 == in.trainer.updates)) {
      std::cout << name << " update " << r.step + 1 << " reward " << r.mean_reward << " retrieval "
                << r.retrieval_fraction << " answer " << r.mean_answer << "\n" << std::flush;
    }
  });
  metrics.commit();
  provenance["seed"] = rc.seed;
  provenance["items"] = in.items.size();
  save_checkpoint(run_dir / (name + ".ckpt.json"),
                  Checkpoint{stage, policy, st, to_json(rc), provenance});

  EvalConfig ec;
  ec.rollout = rc.desk.rollout;
  ec.rollout.temperature = 0.0;
  ec.seed = rc.seed;
  const auto res = run_benchmark(policy, *d.env, d.heldout, ec);
  write_atomic(run_dir / (name + ".heldout.json"), to_json(res.suite).dump(2) + "\n");
  if (!quiet) std::cout << name << " held-out f1 " << res.suite.overall.f1 << "\n";
}

[[noreturn]] void die(const Error& e) {
  std::string msg = e.what();
  std::string esc;
  for (char c : msg) {
    if (c == '"' || c == '\\') esc.push_back('\\');
    esc.push_back(c == '\n' ? ' ' : c);
  }
  std::cerr << "error: code=" << to_string(e.code()) << " message=\"" << esc << "\"\n";
  std::exit(e.code() == ErrorCode::InvalidConfig ? 2 : 1);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"searchrl: retrieval-augmented RL on a synthetic multi-hop world"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string run_dir = "run";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON run config (seed, desk, retriever)");
  app.add_option("--run-dir", run_dir, "directory for configs, logs and artifacts")->capture_default_str();
  app.add_option("--seed", seed, "run seed");
  app.add_flag("-q,--quiet", quiet, "less progress output");

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic world");
  std::string gen_out;
  std::optional<std::uint64_t> world_seed;
  std::optional<std::size_t> gen_questions;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--world-seed", world_seed, "world seed (defaults to the config's)");
  gen->add_option("--questions", gen_questions, "number of questions (defaults to pool_questions)");

  // index
  auto* idx = app.add_subcommand("index", "build and dump the retrieval index of a corpus");
  std::string corpus_path, index_out;
  idx->add_option("--corpus", corpus_path, "passages as jsonl")->required();
  idx->add_option("--out", index_out, "index dump (json)")->required();

  // select-data
  auto* sel = app.add_subcommand("select-data", "probe a pool and assemble a stage dataset");
  std::string sel_world, sel_out, sel_cache;
  int sel_stage = 2;
  std::size_t sel_scale = 200, sel_rollouts = 25;
  bool sel_no_difficult = false;
  sel->add_option("--world", sel_world, "world directory (defaults to the desk pool)");
  sel->add_option("--stage", sel_stage, "1 or 2")->check(CLI::IsMember({1, 2}))->capture_default_str();
  sel->add_option("--scale", sel_scale, "divide the standard composition counts by this")->capture_default_str();
  sel->add_option("--max-rollouts", sel_rollouts, "probe budget per question (>20)")->capture_default_str();
  sel->add_option("--cache", sel_cache, "probe label cache (jsonl, resumable)");
  sel->add_option("--out", sel_out, "dataset output (jsonl)")->required();
  sel->add_flag("--without-difficult", sel_no_difficult, "drop Difficult cells");

  // train
  auto* tr = app.add_subcommand("train", "run Stage 1, Stage 2 or both");
  std::string tr_stage = "all", tr_init, tr_data;
  std::optional<std::size_t> tr_s1, tr_s2, tr_batch;
  std::optional<double> tr_lr;
  tr->add_option("--stage", tr_stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}))->capture_default_str();
  tr->add_option("--init", tr_init, "Stage-2 starting checkpoint (default: run-dir/stage1.ckpt.json)");
  tr->add_option("--data", tr_data, "dataset jsonl replacing the stage's questions");
  tr->add_option("--stage1-updates", tr_s1);
  tr->add_option("--stage2-updates", tr_s2);
  tr->add_option("--train-batch", tr_batch);
  tr->add_option("--lr", tr_lr);

  // rollout and eval share policy selection
  PolicyChoice pc;
  std::string world_dir, split = "heldout";
  std::optional<double> temperature;
  auto add_policy_opts = [&](CLI::App* sub) {
    sub->add_option("--policy", pc.kind, "oracle, uniform, checkpoint or http")
        ->check(CLI::IsMember({"oracle", "uniform", "checkpoint", "http"}))
        ->capture_default_str();
    sub->add_option("--checkpoint", pc.checkpoint, "checkpoint for --policy checkpoint");
    sub->add_option("--policy-url", pc.url, "policy server for --policy http");
    sub->add_option("--world", world_dir, "world directory (defaults to the desk pool)");
    sub->add_option("--split", split, "heldout, train or all")->capture_default_str();
    sub->add_option("--temperature", temperature);
  };

  auto* ro = app.add_subcommand("rollout", "print episodes with injected documents marked");
  std::size_t ro_n = 3;
  bool ro_json = false, ro_color = false;
  add_policy_opts(ro);
  ro->add_option("-n", ro_n, "episodes")->capture_default_str();
  ro->add_flag("--json", ro_json, "one episode JSON per line");
  ro->add_flag("--color", ro_color, "ANSI highlight instead of [[masked]] markers");

  auto* ev = app.add_subcommand("eval", "benchmark a policy");
  std::string ev_out;
  std::string ev_judge = "env";
  std::size_t ev_threads = 1;
  add_policy_opts(ev);
  ev->add_option("--out", ev_out, "report directory (default: run-dir/eval)");
  ev->add_option("--judge", ev_judge, "env (SEARCHRL_JUDGE_URL), cem or none")
      ->check(CLI::IsMember({"env", "cem", "none"}))
      ->capture_default_str();
  ev->add_option("--threads", ev_threads)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    die(Error(ErrorCode::InvalidConfig, e.what()));
  }

  try {
    RunConfig rc;
    if (!config_path.empty()) from_json_into(read_json(config_path), rc);
    if (auto v = env("SEARCHRL_SEARCH_URL")) rc.retriever.search_url = *v;
    if (auto v = env("SEARCHRL_SUMMARIZER_URL")) rc.retriever.summarizer_url = *v;
    if (seed) rc.seed = *seed;
    const fs::path rd = run_dir;

    if (gen->parsed()) {
      WorldConfig wc = rc.desk.world;
      if (world_seed) wc.seed = *world_seed;
      rc.desk.world.seed = wc.seed;
      wc.n_questions = gen_questions.value_or(rc.desk.pool_questions);
      CommandLog log(rd, "gen-synth", to_json(rc));
      const auto w = generate_world(wc);
      const fs::path out = gen_out;
      const fs::path tmp = out.string() + ".partial";
      fs::remove_all(tmp);
      save_world(w, tmp);
      fs::remove_all(out);
      fs::rename(tmp, out);
      if (!quiet) {
        std::cout << "wrote " << w.questions.size() << " questions, " << w.passages.size()
                  << " passages to " << out.string() << "\n";
      }
      log.finish();
    } else if (idx->parsed()) {
      CommandLog log(rd, "index", to_json(rc));
      const auto corpus = Corpus::build(read_passages(corpus_path));
      write_atomic(index_out, index_to_json(corpus).dump() + "\n");
      log.finish();
    } else if (sel->parsed()) {
      auto cfg = to_json(rc);
      cfg["select"] = {{"stage", sel_stage}, {"scale", sel_scale}, {"max_rollouts", sel_rollouts},
                       {"without_difficult", sel_no_difficult}};
      CommandLog log(rd, "select-data", cfg);
      const auto w = world_for(rc, sel_world);
      const auto env_ptr = retriever_for(rc, *w);
      const ProbePolicy probe(w, 0.003, 0.6, rc.desk.rollout.tags);
      RolloutConfig rcfg = rc.desk.rollout;
      rcfg.max_tokens = std::max<std::size_t>(rcfg.max_tokens, 64);
      const auto pool = probe_pool(w->items(), probe, *env_ptr, sel_rollouts, rcfg, rc.seed, sel_cache);
      const auto stage = sel_stage == 1 ? StageId::Stage1 : StageId::Stage2;
      auto spec = standard_composition(stage, sel_scale);
      if (sel_no_difficult) spec = without_difficult(spec);
      const auto ds = assemble_stage_dataset(pool, stage, spec, rc.seed);
      const fs::path out = sel_out;
      const auto tmp = out.string() + ".partial";
      write_dataset(tmp, ds);
      fs::rename(tmp, out);
      if (!quiet) {
        for (const auto& [cell, n] : ds.composition) std::cout << cell << " " << n << "\n";
      }
      log.finish();
    } else if (tr->parsed()) {
      if (tr_s1) rc.desk.stage1_updates = *tr_s1;
      if (tr_s2) rc.desk.stage2_updates = *tr_s2;
      if (tr_batch) rc.desk.trainer.train_batch = *tr_batch;
      if (tr_lr) rc.desk.trainer.learning_rate = *tr_lr;
      rc.desk.validate();
      CommandLog log(rd, "train", to_json(rc));
      const auto d = make_desk_data(rc.desk);
      std::vector<QAItem> data;
      if (!tr_data.empty()) data = read_dataset(tr_data, StageId::Stage2).qa_items();
      if (tr_stage == "1" || tr_stage == "all") {
        train_one(rc, d, StageId::Stage1, make_desk_policy(d, rc.desk),
                  {{"parent", nullptr}, {"command", "train"}}, tr_stage == "1" ? data : std::vector<QAItem>{},
                  rd, quiet);
      }
      if (tr_stage == "2" || tr_stage == "all") {
        const fs::path init = tr_init.empty() ? rd / "stage1.ckpt.json" : fs::path(tr_init);
        if (!fs::exists(init)) throw Error(ErrorCode::Io, "missing Stage-2 start checkpoint " + init.string());
        auto parent = load_checkpoint(init);
        train_one(rc, d, StageId::Stage2, parent.policy,
                  {{"parent", init.string()}, {"parent_digest", fnv1a_hex(read_file(init))},
                   {"command", "train"}},
                  data, rd, quiet);
      }
      log.finish();
    } else if (ro->parsed() || ev->parsed()) {
      if (temperature) rc.desk.rollout.temperature = *temperature;
      const bool is_eval = ev->parsed();
      auto cfg = to_json(rc);
      cfg["policy"] = {{"kind", pc.kind}, {"checkpoint", pc.checkpoint}, {"url", pc.url}};
      cfg["split"] = split;
      const auto w = world_for(rc, world_dir);
      const auto env_ptr = retriever_for(rc, *w);
      const auto policy = policy_for(rc, pc, w);
      auto items = split_for(rc, *w, split);
      if (is_eval) {
        cfg["judge"] = ev_judge;
        CommandLog log(rd, "eval", cfg);
        EvalConfig ec;
        ec.rollout = rc.desk.rollout;
        ec.rollout.temperature = temperature.value_or(0.0);
        ec.rollout.threads = ev_threads;
        ec.seed = rc.seed;
        std::shared_ptr<JudgeClient> jc;
        if (ev_judge == "env") jc = HttpJudgeClient::from_env();
        if (ev_judge == "cem") jc = cem_judge();
        const auto res = run_benchmark(*policy, *env_ptr, items, ec, jc.get());
        const fs::path out = ev_out.empty() ? rd / "eval" : fs::path(ev_out);
        PartialFile recs(out / "records.jsonl");
        for (const auto& r : res.records) recs.line(to_json(r).dump());
        recs.commit();
        write_atomic(out / "summary.json", nlohmann::json{{"config", cfg}, {"metrics", to_json(res.suite)}}.dump(2) + "\n");
        std::cout << render_table(res.suite);
        log.finish();
      } else {
        CommandLog log(rd, "rollout", cfg);
        RolloutConfig rcfg = rc.desk.rollout;
        Rng rng(rc.seed);
        items.resize(std::min(ro_n, items.size()));
        for (const auto& item : items) {
          const auto ep = rollout(*policy, nullptr, item, *env_ptr, rcfg, rng);
          if (ro_json) {
            std::cout << nlohmann::json{{"id", ep.item_id}, {"question", ep.question},
                                        {"text", ep.text()}, {"mask_spans", [&] {
                                           nlohmann::json a = nlohmann::json::array();
                                           for (const auto& s : ep.mask_spans) a.push_back({s.begin, s.end});
                                           return a;
                                         }()},
                                        {"retrievals", ep.n_retrievals},
                                        {"answer", ep.answer().value_or("")},
                                        {"gold", item.gold_answer}}
                             .dump()
                      << "\n";
          } else {
            std::cout << "# " << ep.item_id << " retrievals=" << ep.n_retrievals << " answer=\""
                      << ep.answer().value_or("") << "\" gold=\"" << item.gold_answer << "\"\n"
                      << ep.question << "\n" << highlight(ep, ro_color) << "\n\n";
          }
        }
        log.finish();
      }
    }
  } catch (const Error& e) {
    die(e);
  } catch (const fs::filesystem_error& e) {
    die(Error(ErrorCode::Io, e.what()));
  } catch (const nlohmann::json::exception& e) {
    die(Error(ErrorCode::Parse, e.what()));
  } catch (const std::exception& e) {
    die(Error(ErrorCode::InvalidArgument, e.what()));
  }
  return 0;
}
