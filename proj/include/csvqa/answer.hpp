// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Multiple-choice answer extraction and accuracy reporting.

#ifndef CSVQA_ANSWER_HPP
#define CSVQA_ANSWER_HPP

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "csvqa/errors.hpp"
#include "csvqa/prompt.hpp"

namespace csvqa {

enum class Extraction { Letter, ExactText, FuzzyText };

std::string_view extraction_name(Extraction e);  // "letter" | "exact" | "fuzzy"
Extraction parse_extraction(std::string_view name);

struct ParsedAnswer {
  int option_index = 0;
  Extraction extraction = Extraction::Letter;
  std::string raw;
};

class UnparsedAnswer : public Error {
 public:
  using Error::Error;
};

inline constexpr double kFuzzyThreshold = 0.8;

/// Tries, in order: the last in-range letter marker ("Answer: B", "(b)",
/// "B."), the longest option text contained in the response, then the option
/// closest to the final line by LCS ratio (> 0.8). Throws UnparsedAnswer.
ParsedAnswer parse_answer(std::string_view raw, const std::vector<std::string>& options);
std::optional<ParsedAnswer> try_parse_answer(std::string_view raw,
                                             const std::vector<std::string>& options);

/// 2 * LCS(a, b) / (|a| + |b|) over normalized text.
double lcs_ratio(std::string_view a, std::string_view b);

struct Prediction {
  std::string sample_id;
  std::string raw;
  std::optional<ParsedAnswer> answer;
};

struct EvalReport {
  double overall_accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_subcategory;  // correct, total
  std::size_t unparsed_count = 0;
};

/// Unparsed predictions count as wrong. Throws ContractError for unknown ids
/// or samples without a gold index.
EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<Sample>& dataset);

}  // namespace csvqa

#endif  // CSVQA_ANSWER_HPP
