#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "searchrl/checkpoint.hpp"
#include "searchrl/data_pipeline.hpp"

namespace fs = std::filesystem;
using searchrl::fnv1a_hex;
using searchrl::read_file;

namespace {

struct CliResult {
  int status = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("searchrl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  CliResult run(const std::string& args) {
    const auto out = dir / "stdout.txt";
    const auto err = dir / "stderr.txt";
    const std::string cmd = "cd '" + dir.string() + "' && '" SEARCHRL_CLI_PATH "' " + args + " >'" +
                            out.string() + "' 2>'" + err.string() + "'";
    const int rc = std::system(cmd.c_str());
    CliResult r;
    r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = read_file(out);
    r.err = read_file(err);
    return r;
  }

  bool no_partials() const {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.path().string().ends_with(".partial")) return false;
    }
    return true;
  }

  fs::path dir;
};

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_F(Cli, GenSynthIsByteDeterministic) {
  ASSERT_EQ(run("gen-synth --out a --world-seed 11 -q").status, 0);
  ASSERT_EQ(run("gen-synth --out b --world-seed 11 -q").status, 0);
  ASSERT_EQ(run("gen-synth --out c --world-seed 12 -q").status, 0);
  for (const auto* f : {"world.json", "corpus.jsonl", "questions.jsonl"}) {
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  }
  EXPECT_NE(read_file(dir / "a" / "world.json"), read_file(dir / "c" / "world.json"));
  EXPECT_EQ(count_lines(dir / "a" / "questions.jsonl"), 300u);
  EXPECT_TRUE(fs::exists(dir / "run" / "gen-synth.config.json"));
  EXPECT_TRUE(fs::exists(dir / "run" / "gen-synth.times.json"));
  EXPECT_TRUE(no_partials());
}

TEST_F(Cli, EvalOracleWritesReports) {
  ASSERT_EQ(run("gen-synth --out w -q").status, 0);
  const auto r = run("eval --policy oracle --world w --judge cem --out rep");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("overall"), std::string::npos);
  const auto s = nlohmann::json::parse(read_file(dir / "rep" / "summary.json"));
  EXPECT_EQ(s.at("metrics").at("overall").at("acc_r"), 1.0);
  EXPECT_EQ(s.at("metrics").at("overall").at("acc_l"), 1.0);
  EXPECT_EQ(s.at("metrics").at("overall").at("count"), 60);
  EXPECT_EQ(count_lines(dir / "rep" / "records.jsonl"), 60u);
  EXPECT_TRUE(fs::exists(dir / "run" / "eval.config.json"));
  EXPECT_TRUE(no_partials());
}

TEST_F(Cli, RolloutDumpMarksInjectedDocuments) {
  const auto r = run("rollout --policy oracle -n 2");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(count(r.out, "[[masked]]<|begin_of_documents|>"), 4u);
  EXPECT_EQ(count(r.out, "<|end_of_documents|>[[/masked]]"), 4u);
  EXPECT_EQ(count(r.out, "retrievals=2"), 2u);
}

TEST_F(Cli, ErrorsUseOneLineFormat) {
  auto r = run("eval --policy checkpoint --checkpoint missing.json");
  EXPECT_EQ(r.status, 1);
  EXPECT_TRUE(r.err.starts_with("error: code=Io message=\"")) << r.err;
  r = run("train --stage 2 --run-dir empty");
  EXPECT_NE(r.status, 0);
  EXPECT_TRUE(r.err.starts_with("error: code=Io ")) << r.err;
  r = run("eval --no-such-flag");
  EXPECT_EQ(r.status, 2);
  EXPECT_TRUE(r.err.starts_with("error: code=InvalidConfig message=\"")) << r.err;
  {
    std::ofstream(dir / "bad.json") << "{oops";
  }
  r = run("--config bad.json rollout");
  EXPECT_TRUE(r.err.starts_with("error: code=Parse ")) << r.err;
  {
    std::ofstream(dir / "small.json") << R"({"desk": {"pool_questions": 10}})";
  }
  r = run("--config small.json train");
  EXPECT_EQ(r.status, 2);
  EXPECT_TRUE(r.err.starts_with("error: code=InvalidConfig ")) << r.err;
}

TEST_F(Cli, TrainRecordsConfigAndProvenance) {
  {
    std::ofstream(dir / "cfg.json") << R"({"seed": 5, "desk": {"trainer": {"train_batch": 64}}})";
  }
  const auto r = run("--config cfg.json --seed 9 train --stage all --stage1-updates 3 "
                     "--stage2-updates 2 --run-dir r -q");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto cfg = nlohmann::json::parse(read_file(dir / "r" / "train.config.json"));
  EXPECT_EQ(cfg.at("seed"), 9);
  EXPECT_EQ(cfg.at("desk").at("trainer").at("train_batch"), 64);
  EXPECT_EQ(cfg.at("desk").at("stage1_updates"), 3);
  EXPECT_EQ(count_lines(dir / "r" / "stage1.metrics.jsonl"), 3u);
  EXPECT_EQ(count_lines(dir / "r" / "stage2.metrics.jsonl"), 2u);

  const auto s1 = searchrl::load_checkpoint(dir / "r" / "stage1.ckpt.json");
  const auto s2 = searchrl::load_checkpoint(dir / "r" / "stage2.ckpt.json");
  EXPECT_EQ(s1.state.step, 3u);
  EXPECT_EQ(s2.state.step, 2u);
  EXPECT_TRUE(s1.provenance.at("parent").is_null());
  EXPECT_EQ(s2.provenance.at("parent"), "r/stage1.ckpt.json");
  EXPECT_EQ(s2.provenance.at("parent_digest"), fnv1a_hex(read_file(dir / "r" / "stage1.ckpt.json")));
  EXPECT_EQ(s2.config, cfg);
  EXPECT_TRUE(fs::exists(dir / "r" / "stage2.heldout.json"));
  EXPECT_TRUE(no_partials());

  // Same command, same bytes.
  ASSERT_EQ(run("--config cfg.json --seed 9 train --stage 1 --stage1-updates 3 "
                "--stage2-updates 2 --run-dir r2 -q").status, 0);
  EXPECT_TRUE(read_file(dir / "r" / "stage1.ckpt.json") == read_file(dir / "r2" / "stage1.ckpt.json"));
}

TEST_F(Cli, SelectDataFollowsTheScaledComposition) {
  ASSERT_EQ(run("gen-synth --out w -q").status, 0);
  const auto r = run("select-data --world w --stage 2 --scale 200 --cache probe.jsonl --out ds.jsonl");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto ds = searchrl::read_dataset((dir / "ds.jsonl").string(), searchrl::StageId::Stage2);
  EXPECT_EQ(ds.composition.at("hotpotqa/medium"), 13u);
  EXPECT_EQ(ds.composition.at("hotpotqa/difficult"), 10u);
  EXPECT_EQ(ds.composition.at("2wiki/medium"), 5u);
  EXPECT_EQ(ds.composition.at("2wiki/difficult"), 13u);
  EXPECT_EQ(count_lines(dir / "probe.jsonl"), 300u);
  // A second run reuses the cache and picks the same items.
  ASSERT_EQ(run("select-data --world w --stage 2 --scale 200 --cache probe.jsonl --out ds2.jsonl").status, 0);
  EXPECT_EQ(read_file(dir / "ds.jsonl"), read_file(dir / "ds2.jsonl"));
  EXPECT_EQ(count_lines(dir / "probe.jsonl"), 300u);
  EXPECT_EQ(run("select-data --world w --stage 2 --scale 100 --out ds3.jsonl").status, 1);
}
