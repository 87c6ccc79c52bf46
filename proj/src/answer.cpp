// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/answer.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <unordered_map>
#include <unordered_set>

namespace csvqa {

namespace {

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Lowercase alphanumerics with single spaces in between.
std::string normalize(std::string_view s) {
  std::string out;
  bool gap = false;
  for (unsigned char c : s) {
    if (std::isalnum(c)) {
      if (gap && !out.empty()) out.push_back(' ');
      out.push_back(static_cast<char>(std::tolower(c)));
      gap = false;
    } else {
      gap = true;
    }
  }
  return out;
}

std::string final_line(std::string_view raw) {
  std::string_view rest = raw;
  while (!rest.empty()) {
    const auto nl = rest.find_last_of('\n');
    const auto line = nl == std::string_view::npos ? rest : rest.substr(nl + 1);
    if (!normalize(line).empty()) return std::string(line);
    if (nl == std::string_view::npos) break;
    rest = rest.substr(0, nl);
  }
  return {};
}

std::optional<int> letter_marker(std::string_view raw, std::size_t n_options) {
  static const std::regex kAnswer(R"(answer\s*:\s*\(?([a-z])(?![a-z0-9]))", std::regex::icase);
  static const std::regex kParen(R"(\(([a-z])\))", std::regex::icase);
  static const std::regex kDotted(R"((?:^|[^a-z0-9])([a-z])\.(?=\s|$))", std::regex::icase);
  const std::string text(raw);
  long best_pos = -1;
  int best = -1;
  for (const auto* re : {&kAnswer, &kParen, &kDotted}) {
    for (std::sregex_iterator it(text.begin(), text.end(), *re), end; it != end; ++it) {
      const int idx = std::tolower(static_cast<unsigned char>((*it)[1].str()[0])) - 'a';
      const long pos = static_cast<long>(it->position(1));
      if (idx < static_cast<int>(n_options) && pos > best_pos) {
        best_pos = pos;
        best = idx;
      }
    }
  }
  if (best < 0) return std::nullopt;
  return best;
}

}  // namespace

std::string_view extraction_name(Extraction e) {
  switch (e) {
    case Extraction::Letter: return "letter";
    case Extraction::ExactText: return "exact";
    case Extraction::FuzzyText: return "fuzzy";
  }
  return "letter";
}

Extraction parse_extraction(std::string_view name) {
  if (name == "letter") return Extraction::Letter;
  if (name == "exact") return Extraction::ExactText;
  if (name == "fuzzy") return Extraction::FuzzyText;
  throw ContractError("unknown extraction kind: " + std::string(name));
}

double lcs_ratio(std::string_view a_raw, std::string_view b_raw) {
  const auto a = normalize(a_raw);
  const auto b = normalize(b_raw);
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return 2.0 * static_cast<double>(prev[b.size()]) / static_cast<double>(a.size() + b.size());
}

std::optional<ParsedAnswer> try_parse_answer(std::string_view raw,
                                             const std::vector<std::string>& options) {
  if (options.empty()) throw ContractError("parse_answer: no options");
  if (auto idx = letter_marker(raw, options.size())) {
    return ParsedAnswer{*idx, Extraction::Letter, std::string(raw)};
  }

  const auto hay = to_lower(raw);
  int best = -1;
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < options.size(); ++i) {
    const auto needle = to_lower(options[i]);
    if (!needle.empty() && hay.find(needle) != std::string::npos && needle.size() > best_len) {
      best = static_cast<int>(i);
      best_len = needle.size();
    }
  }
  if (best >= 0) return ParsedAnswer{best, Extraction::ExactText, std::string(raw)};

  const auto last = final_line(raw);
  double best_ratio = kFuzzyThreshold;
  for (std::size_t i = 0; i < options.size(); ++i) {
    const double r = lcs_ratio(options[i], last);
    if (r > best_ratio) {
      best_ratio = r;
      best = static_cast<int>(i);
    }
  }
  if (best >= 0) return ParsedAnswer{best, Extraction::FuzzyText, std::string(raw)};
  return std::nullopt;
}

ParsedAnswer parse_answer(std::string_view raw, const std::vector<std::string>& options) {
  if (auto a = try_parse_answer(raw, options)) return *a;
  throw UnparsedAnswer("no option could be extracted from response");
}

EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<Sample>& dataset) {
  std::unordered_map<std::string, const Sample*> by_id;
  for (const auto& s : dataset) by_id.emplace(s.id, &s);
  EvalReport report;
  std::unordered_set<std::string> seen;
  for (const auto& p : preds) {
    auto it = by_id.find(p.sample_id);
    if (it == by_id.end()) throw ContractError("evaluate: unknown sample id '" + p.sample_id + "'");
    if (!seen.insert(p.sample_id).second) {
      throw ContractError("evaluate: duplicate prediction for '" + p.sample_id + "'");
    }
    const Sample& s = *it->second;
    if (!s.gold_index) throw ContractError("evaluate: sample '" + s.id + "' has no gold answer");
    const bool ok = p.answer && p.answer->option_index == *s.gold_index;
    if (!p.answer) ++report.unparsed_count;
    ++report.total;
    if (ok) ++report.correct;
    if (s.subcategory) {
      auto& [c, t] = report.per_subcategory[*s.subcategory];
      ++t;
      if (ok) ++c;
    }
  }
  report.overall_accuracy =
      report.total == 0 ? 0.0
                        : static_cast<double>(report.correct) / static_cast<double>(report.total);
  return report;
}

}  // namespace csvqa
