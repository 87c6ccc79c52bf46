// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Dataset samples and commonsense-grounded prompt assembly.

#ifndef CSVQA_PROMPT_HPP
#define CSVQA_PROMPT_HPP

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "csvqa/graph_gcn.hpp"
#include "csvqa/retrieval.hpp"

namespace csvqa {

struct Sample {
  std::string id;
  std::string question;
  std::string caption;
  std::string image_ref;  // file path or embedding key
  std::vector<std::string> options;
  std::optional<int> gold_index;
  std::optional<std::string> subcategory;
};

/// Dataset NDJSON: {"id","question","caption","image","options","answer"?,"subcategory"?}.
std::vector<Sample> read_dataset(std::istream& in);
std::vector<Sample> read_dataset(const std::string& path);

struct KnowledgeLine {
  std::string sentence;
  std::optional<RelevanceLevel> level;  // unset: no relevance annotation
};

/// Flattened commonsense per input source (image, question, caption).
struct ExplicitKnowledge {
  std::array<std::vector<KnowledgeLine>, 3> by_source;

  std::vector<KnowledgeLine>& operator[](SourceKind s) {
    return by_source[static_cast<std::size_t>(s)];
  }
  const std::vector<KnowledgeLine>& operator[](SourceKind s) const {
    return by_source[static_cast<std::size_t>(s)];
  }
  bool empty() const;
};

struct PromptBundle {
  std::string sample_id;
  std::string system_preamble;
  std::string body;
  std::optional<ConfidenceVector> confidence;
  std::string image_ref;
};

/// "(Highly Relevant)" | "(Relevant)" | "(Less Relevant)"
std::string_view relevance_annotation(RelevanceLevel level);

/// Option letter for index 0..25.
char option_letter(std::size_t index);

/// Deterministic prompt text; empty knowledge blocks are left out entirely.
PromptBundle assemble_prompt(const Sample& s, const ExplicitKnowledge& explicit_cs,
                             const std::optional<ConfidenceVector>& confidence);

/// Commonsense category classification prompt ending with "Classification:".
std::string assemble_classification_prompt(const Sample& s);

}  // namespace csvqa

#endif  // CSVQA_PROMPT_HPP
