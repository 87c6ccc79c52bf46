// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/prompt.hpp"

#include <fmt/format.h>

#include <cctype>
#include <fstream>
#include <nlohmann/json.hpp>
#include <unordered_set>

#include "csvqa/errors.hpp"

namespace csvqa {

namespace {

constexpr std::string_view kRoleWithKnowledge =
    "You are an advanced Vision-Language Model assistant designed to answer multiple-choice "
    "questions based on a given image. Your task is to select the most appropriate option from "
    "the provided answer choices. You are given an input image, a question related to the "
    "image, the image caption, multiple-choice answer options, and both explicit and implicit "
    "commonsense knowledge.";

constexpr std::string_view kRolePlain =
    "You are an advanced Vision-Language Model assistant designed to answer multiple-choice "
    "questions based on a given image. Your task is to select the most appropriate option from "
    "the provided answer choices. You are given an input image, a question related to the "
    "image, the image caption, and multiple-choice answer options.";

constexpr std::string_view kKnowledgeDescription =
    "Explicit commonsense knowledge consists of statements related to the input, categorized "
    "as image-related commonsense, question-related commonsense, and caption-related "
    "commonsense. Implicit commonsense knowledge includes the relevance level (e.g., highly "
    "relevant, relevant, less relevant) assigned to each explicit commonsense statement and "
    "the confidence of each candidate option, where higher values indicate a greater "
    "likelihood of being correct.";

constexpr std::string_view kObjectiveWithKnowledge =
    "Your objective is to integrate the explicit and implicit commonsense knowledge with the "
    "provided information to generate a step-by-step reasoning. Based on this rationale, you "
    "will select the most appropriate answer from the given options.";

constexpr std::string_view kObjectivePlain =
    "Your objective is to use the provided information to generate a step-by-step reasoning. "
    "Based on this rationale, you will select the most appropriate answer from the given "
    "options.";

constexpr std::array<std::string_view, 3> kSourceHeaders{
    "Image-Related Commonsense:", "Question-Related Commonsense:",
    "Caption-Related Commonsense:"};

constexpr std::string_view kClassificationInstructions =
    "Instructions:\n"
    "You are an expert in commonsense reasoning and knowledge representation. Your task is to "
    "classify each sample into one of three commonsense categories:\n"
    "\n"
    "1. Physical-Entity Commonsense (CS-PE): Knowledge about physical objects, their "
    "properties, uses, locations, and physical attributes. This includes understanding what "
    "things are made of, typical or atypical uses, and physical characteristics.\n"
    "\n"
    "2. Event-Centered Commonsense (CS-EC): Knowledge about events, including their causes, "
    "effects, prerequisites, sequences, and hindrances. This encompasses understanding how "
    "events are related in time and causality.\n"
    "\n"
    "3. Social-Interaction Commonsense (CS-SI): Knowledge about social behaviors, mental "
    "states, interactions, and interpersonal dynamics. This involves understanding intentions, "
    "emotional reactions, and attributes in social contexts.\n";

constexpr std::string_view kClassificationSteps =
    "Reasoning Steps:\n"
    "Please first examine the question and answer choices, along with the image caption, to "
    "identify the main focus of the sample. Then provide a step-by-step reasoning on how "
    "specific elements of the sample align with the potential commonsense category. Then "
    "assign the appropriate commonsense category (CS-PE, CS-EC, or CS-SI) based on the "
    "provided rationale.\n";

std::string as_statement(std::string sentence) {
  if (!sentence.empty()) {
    sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
    const char last = sentence.back();
    if (last != '.' && last != '!' && last != '?') sentence.push_back('.');
  }
  return sentence;
}

void check_options(const Sample& s) {
  if (s.options.empty()) throw ContractError("sample '" + s.id + "' has no options");
  if (s.options.size() > 26) throw ContractError("sample '" + s.id + "' has more than 26 options");
}

}  // namespace

std::vector<Sample> read_dataset(std::istream& in) {
  std::vector<Sample> out;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Sample s;
    try {
      const auto j = nlohmann::json::parse(line);
      s.id = j.at("id").get<std::string>();
      s.question = j.at("question").get<std::string>();
      s.caption = j.value("caption", std::string());
      s.image_ref = j.value("image", std::string());
      s.options = j.at("options").get<std::vector<std::string>>();
      if (j.contains("answer") && !j["answer"].is_null()) s.gold_index = j["answer"].get<int>();
      if (j.contains("subcategory") && !j["subcategory"].is_null()) {
        s.subcategory = j["subcategory"].get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
    if (s.options.empty()) throw ContractError("dataset sample '" + s.id + "' has no options");
    if (s.gold_index && (*s.gold_index < 0 || *s.gold_index >= static_cast<int>(s.options.size()))) {
      throw ContractError("dataset sample '" + s.id + "' has gold index out of range");
    }
    if (!ids.insert(s.id).second) throw ContractError("duplicate sample id '" + s.id + "'");
    out.push_back(std::move(s));
  }
  if (in.bad()) throw IoError("read failure on dataset");
  return out;
}

std::vector<Sample> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  return read_dataset(in);
}

bool ExplicitKnowledge::empty() const {
  for (const auto& v : by_source) {
    if (!v.empty()) return false;
  }
  return true;
}

std::string_view relevance_annotation(RelevanceLevel level) {
  switch (level) {
    case RelevanceLevel::High: return "(Highly Relevant)";
    case RelevanceLevel::Medium: return "(Relevant)";
    case RelevanceLevel::Low: return "(Less Relevant)";
  }
  return "(Relevant)";
}

char option_letter(std::size_t index) {
  if (index >= 26) throw ContractError("option index beyond 'Z'");
  return static_cast<char>('A' + index);
}

PromptBundle assemble_prompt(const Sample& s, const ExplicitKnowledge& explicit_cs,
                             const std::optional<ConfidenceVector>& confidence) {
  check_options(s);
  const bool knowledge = !explicit_cs.empty() || confidence.has_value();

  PromptBundle out;
  out.sample_id = s.id;
  out.image_ref = s.image_ref;
  out.confidence = confidence;
  out.system_preamble = std::string(knowledge ? kRoleWithKnowledge : kRolePlain);

  std::string b;
  b += "Background:\n";
  b += out.system_preamble;
  b += "\n\n";
  if (knowledge) {
    b += kKnowledgeDescription;
    b += "\n\n";
  }
  b += knowledge ? kObjectiveWithKnowledge : kObjectivePlain;
  b += "\n\n";

  b += "Input Information:\n";
  b += "Image: " + s.image_ref + "\n";
  b += "Question: " + s.question + "\n";
  b += "Caption: " + s.caption + "\n";
  b += "Options:\n";
  for (std::size_t i = 0; i < s.options.size(); ++i) {
    b += fmt::format("  {}. \"{}\"\n", option_letter(i), s.options[i]);
  }

  if (!explicit_cs.empty()) {
    b += "\nExplicit Commonsense Knowledge:\n";
    for (auto src : kAllSources) {
      const auto& lines = explicit_cs[src];
      if (lines.empty()) continue;
      b += kSourceHeaders[static_cast<std::size_t>(src)];
      b += "\n";
      for (const auto& line : lines) {
        b += "  - " + as_statement(line.sentence);
        if (line.level) {
          b += " ";
          b += relevance_annotation(*line.level);
        }
        b += "\n";
      }
    }
  }

  if (confidence) {
    const auto shown = std::min<std::size_t>(s.options.size(),
                                             static_cast<std::size_t>(confidence->valid_options));
    b += "\nImplicit Commonsense Knowledge (Confidence for Each Option):\n";
    for (std::size_t i = 0; i < shown && i < confidence->probs.size(); ++i) {
      b += fmt::format("  {}: {:.2f}\n", option_letter(i), confidence->probs[i]);
    }
  }

  b += "\nRationale:\nAnswer:\n";
  out.body = std::move(b);
  return out;
}

std::string assemble_classification_prompt(const Sample& s) {
  check_options(s);
  std::string choices;
  for (std::size_t i = 0; i < s.options.size(); ++i) {
    if (i) choices += ", ";
    choices += fmt::format("{}. \"{}\"", option_letter(i), s.options[i]);
  }
  std::string answer = "Unknown";
  if (s.gold_index) {
    const auto g = static_cast<std::size_t>(*s.gold_index);
    answer = fmt::format("{}. \"{}\"", option_letter(g), s.options.at(g));
  }
  std::string out(kClassificationInstructions);
  out += "\nSample:\n";
  out += "- Image: " + s.caption + "\n";
  out += "- Question: " + s.question + "\n";
  out += "- Choices: " + choices + "\n";
  out += "- Answer: " + answer + "\n";
  out += "\n";
  out += kClassificationSteps;
  out += "\nClassification:\n";
  return out;
}

}  // namespace csvqa
