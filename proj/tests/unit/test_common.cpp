#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "searchrl/common.hpp"
#include "searchrl/prompts.hpp"

using namespace searchrl;

TEST(Common, MixSeedIsDeterministicAndSpreads) {
  EXPECT_EQ(mix_seed(7, 3), mix_seed(7, 3));
  EXPECT_NE(mix_seed(7, 3), mix_seed(7, 4));
  EXPECT_NE(mix_seed(7, 3), mix_seed(8, 3));
}

TEST(Common, Uniform01StaysInUnitInterval) {
  Rng rng(1);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform01(rng);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LT(hi, 1.0);
  EXPECT_LT(lo, 0.01);
  EXPECT_GT(hi, 0.99);
}

TEST(Common, ShuffleIsAPermutationAndReproducible) {
  std::vector<int> a(50);
  std::iota(a.begin(), a.end(), 0);
  auto b = a;
  Rng r1(9), r2(9);
  shuffle(a, r1);
  shuffle(b, r2);
  EXPECT_EQ(a, b);
  std::sort(a.begin(), a.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(a[i], i);
}

TEST(Common, StringHelpers) {
  EXPECT_EQ(trim("  x y \n"), "x y");
  EXPECT_TRUE(is_blank(" \t\n"));
  EXPECT_EQ(split_whitespace("  a  bb\tc\n"), (std::vector<std::string>{"a", "bb", "c"}));
  const auto lines = split_lines("a\nb\n");
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "a");
  EXPECT_EQ(lines[1], "b");
  EXPECT_EQ(lines[2], "");
  EXPECT_EQ(join({"a", "b", "c"}, ", "), "a, b, c");
}

TEST(Common, ErrorCarriesCode) {
  try {
    throw Error(ErrorCode::DuplicateId, "dup");
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateId);
    EXPECT_STREQ(to_string(e.code()), "DuplicateId");
  }
}

TEST(Prompts, JudgePromptFillsSlotsInOrder) {
  const auto p = render_judge_prompt("Who?", "james madison", "James Madison");
  const auto q = p.find("Question: Who?");
  const auto g = p.find("Golden Answer: james madison");
  const auto r = p.find("Predicted Answer: James Madison");
  ASSERT_NE(q, std::string::npos);
  ASSERT_NE(g, std::string::npos);
  ASSERT_NE(r, std::string::npos);
  EXPECT_LT(q, g);
  EXPECT_LT(g, r);
  EXPECT_EQ(p.find("{}"), std::string::npos);
  EXPECT_EQ(p.rfind("Given a Question and its Golden Answer", 0), 0u);
}

TEST(Prompts, TemplatesWrapTheQuestion) {
  EXPECT_EQ(render_prompt(PromptTemplate::Raw, "q?"), "q?");
  const auto base = render_prompt(PromptTemplate::Base, "q?");
  EXPECT_EQ(base.rfind(std::string(kBaseSystemPrompt), 0), 0u);
  EXPECT_TRUE(base.ends_with("\nUser: q?\nAssistant:"));
  const auto sel = render_prompt(PromptTemplate::Selection, "q?");
  EXPECT_EQ(sel.rfind(std::string(kSelectionSystemPrompt), 0), 0u);
  EXPECT_NE(std::string(kBaseSystemPrompt).find("**A query must involve only a single triple**"),
            std::string::npos);
  EXPECT_EQ(prompt_template_from_string("instruct"), PromptTemplate::Selection);
  EXPECT_THROW(prompt_template_from_string("chat"), Error);
}
