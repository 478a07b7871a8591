#pragma once

#include <string>
#include <string_view>

#include "searchrl/common.hpp"

namespace searchrl {

inline constexpr std::string_view kBaseSystemPrompt =
    "The User asks a question, and the Assistant solves it. \n"
    "The Assistant first thinks about the reasoning process in the mind and then provides "
    "the User with the final answer. \n"
    "The output format of reasoning process and final answer are enclosed within "
    "<think> </think> and <answer> </answer> tags, respectively, i.e., \"<think> reasoning "
    "process here </think><answer> final answer here </answer>\". \n"
    "During the thinking process, **the Assistant can perform searching** for uncertain "
    "knowledge if necessary with the format of \"<|begin_of_query|> search query (only list "
    "keywords, such as \"keyword_1 keyword_2 ...\")<|end_of_query|>\". **A query must "
    "involve only a single triple**.\n"
    "Then, the search system will provide the Assistant with the retrieval information with "
    "the format of \"<|begin_of_documents|> ...search results... <|end_of_documents|>\".";

inline constexpr std::string_view kSelectionSystemPrompt =
    "You are a helpful assistant. Given a question, you should answer it by first thinking "
    "about the reasoning process in the mind and then providing the final answer. The output "
    "format of reasoning process and final answer are enclosed within <think> </think> and "
    "<answer> </answer> tags, respectively, i.e., \"<think> reasoning process here "
    "</think><answer> final answer here </answer>\". You should perform thinking with "
    "decomposing, reflecting, brainstorming, verifying, refining, and revising. Besides, you "
    "can perform searching for uncertain knowledge if necessary with the format of "
    "\"<|begin_of_query|> search query (only keywords) here <|end_of_query|>\".\"\"\"\n"
    "Then, the search system will provide you with the retrieval information with the format "
    "of \"<|begin_of_documents|> ...search results... <|end_of_documents|>\".";

inline constexpr std::string_view kJudgePrompt =
    "Given a Question and its Golden Answer, verify whether the Predicted Answer is correct. \n"
    "The prediction is correct if it fully aligns with the meaning and key information of the "
    "Golden Answer. \n"
    "Respond with True if the prediction is correct and False otherwise.\n"
    "\n"
    "Question: {}\n"
    "\n"
    "Golden Answer: {}\n"
    "\n"
    "Predicted Answer: {}";

/// Which system prompt a rollout uses. Raw sends the bare question (the toy
/// policy ignores prompt text anyway).
enum class PromptTemplate { Raw, Base, Selection };

inline const char* to_string(PromptTemplate p) {
  switch (p) {
    case PromptTemplate::Raw: return "raw";
    case PromptTemplate::Base: return "base";
    case PromptTemplate::Selection: return "selection";
  }
  return "raw";
}

inline PromptTemplate prompt_template_from_string(std::string_view s) {
  if (s == "raw") return PromptTemplate::Raw;
  if (s == "base") return PromptTemplate::Base;
  if (s == "selection" || s == "instruct") return PromptTemplate::Selection;
  throw Error(ErrorCode::InvalidConfig, "unknown prompt template '" + std::string(s) + "'");
}

inline std::string render_prompt(PromptTemplate p, std::string_view question) {
  switch (p) {
    case PromptTemplate::Raw:
      return std::string(question);
    case PromptTemplate::Base:
      return std::string(kBaseSystemPrompt) + "\nUser: " + std::string(question) +
             "\nAssistant:";
    case PromptTemplate::Selection:
      return std::string(kSelectionSystemPrompt) + "\nUser: " + std::string(question) +
             "\nAssistant:";
  }
  return std::string(question);
}

/// Fills the `{}` slots of a template left to right.
inline std::string fill_slots(std::string_view tmpl, std::initializer_list<std::string_view> args) {
  std::string out;
  auto it = args.begin();
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '}' && it != args.end()) {
      out += *it++;
      ++i;
    } else {
      out.push_back(tmpl[i]);
    }
  }
  return out;
}

inline std::string render_judge_prompt(std::string_view question, std::string_view gold,
                                       std::string_view pred) {
  return fill_slots(kJudgePrompt, {question, gold, pred});
}

}  // namespace searchrl
