// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// NDJSON stage artifacts and small file utilities shared by the pipeline.

#ifndef CSVQA_ARTIFACTS_HPP
#define CSVQA_ARTIFACTS_HPP

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "csvqa/answer.hpp"
#include "csvqa/retrieval.hpp"

namespace csvqa {

struct RetrievedTriplet {
  std::int64_t id = 0;
  double score = 0.0;
  CsCategory category = CsCategory::PE;
  std::optional<RelevanceLevel> level;
  std::string sentence;
};

/// One line per (sample, source):
/// {"sample_id","source","triplets":[{"id","score","category","level"?,"sentence"}]}
struct RetrievalRecord {
  std::string sample_id;
  SourceKind source = SourceKind::Image;
  std::vector<RetrievedTriplet> triplets;
};

void write_retrieval_artifact(const std::vector<RetrievalRecord>& records, std::ostream& out);
std::vector<RetrievalRecord> read_retrieval_artifact(std::istream& in);

/// {"sample_id","confidence":[...]}
struct ConfidenceRecord {
  std::string sample_id;
  std::vector<double> confidence;
  int valid_options = 0;
};

void write_confidence_artifact(const std::vector<ConfidenceRecord>& records, std::ostream& out);
std::vector<ConfidenceRecord> read_confidence_artifact(std::istream& in);

/// {"id","system","body","image","confidence":[...]|null,"valid_options"}
void write_prompt_artifact(const std::vector<PromptBundle>& prompts, std::ostream& out);
std::vector<PromptBundle> read_prompt_artifact(std::istream& in);

/// {"id","raw","index":int|null,"extraction":str}; extraction is "none" when unparsed.
void write_predictions(const std::vector<Prediction>& preds, std::ostream& out);
std::vector<Prediction> read_predictions(std::istream& in);

std::string sha256_hex(std::string_view data);
std::string file_sha256(const std::string& path);

std::string read_file(const std::string& path);
/// Writes to a sibling temporary and renames over `path`.
void write_file_atomic(const std::string& path, std::string_view content);

}  // namespace csvqa

#endif  // CSVQA_ARTIFACTS_HPP
