// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end orchestration: declarative run config, content-addressed stage
// caching and run manifests.
//
// Stages and their artifacts inside the output directory:
//   build-index  index/kg.ndjson, index/embeddings.mgem, index/manifest.json
//   retrieve     sample_embeddings.mgem, retrieved.ndjson
//   filter       filtered.ndjson
//   score        confidence.ndjson
//   prompt       prompts.ndjson
//   infer        predictions.ndjson
//   eval         eval.json
// plus manifest.json after every invocation.

#ifndef CSVQA_PIPELINE_HPP
#define CSVQA_PIPELINE_HPP

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csvqa/artifacts.hpp"
#include "csvqa/embed_io.hpp"
#include "csvqa/graph_gcn.hpp"
#include "csvqa/kg_store.hpp"
#include "csvqa/lvlm_client.hpp"
#include "csvqa/prompt.hpp"
#include "csvqa/retrieval.hpp"

namespace csvqa {

enum class RelevanceScope { Dataset, Sample };

struct AblationSwitches {
  bool explicit_cs = true;
  bool relevance = true;
  bool confidence = true;
};

struct RunConfig {
  std::string dataset;
  std::string kg;
  std::string embedding_store;    // optional when a service is configured
  std::string embedding_service;  // base URL, optional
  SimilarityMetric metric = SimilarityMetric::Cosine;
  std::size_t big_k = kDefaultBigK;
  int k = kDefaultSmallK;
  double tau = kDefaultTau;
  TypeRatios ratios;  // defaults to equal thirds
  ScoreCombine combine = ScoreCombine::Max;
  RelevanceScope relevance_scope = RelevanceScope::Dataset;
  AblationSwitches ablation;
  Topology topology = Topology::InputHub;
  std::string checkpoint;  // empty: <output_dir>/gcn.ckpt
  std::string replay;      // LVLM replay fixture; takes precedence over `lvlm`
  LvlmEndpoint lvlm;
  std::size_t max_in_flight = 4;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  /// Relative paths in the file are resolved against its directory.
  static RunConfig from_file(const std::string& path);
  static RunConfig from_json(const std::string& text, const std::string& base_dir = ".");

  /// Throws ContractError on missing inputs or bad parameters.
  void validate() const;

  std::string checkpoint_path() const;

  /// Canonical JSON of every field that affects results.
  std::string semantic_json() const;
  /// SHA-256 of semantic_json().
  std::string hash() const;
};

struct StageReport {
  std::string name;
  std::string status;  // "ran" | "cached" | "skipped"
  double seconds = 0.0;
  std::vector<std::string> artifacts;
};

struct RunCounts {
  std::size_t samples = 0;
  std::size_t retrieved = 0;
  std::size_t filtered = 0;
  std::size_t unparsed = 0;
};

struct RunManifest {
  std::string config_hash;
  std::vector<StageReport> stages;
  RunCounts counts;
  std::optional<double> accuracy;
};

using LvlmFactory = std::function<std::unique_ptr<LvlmClient>(const RunConfig&)>;

/// Replay fixture when configured, HTTP client otherwise.
std::unique_ptr<LvlmClient> default_lvlm_factory(const RunConfig& cfg);

struct TrainOutcome {
  TrainResult result;
  std::string checkpoint_path;
  std::string history_path;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, LvlmFactory lvlm = default_lvlm_factory);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  StageReport build_index();
  StageReport retrieve();
  StageReport filter();
  StageReport score();
  StageReport prompt();
  StageReport infer();
  StageReport eval();

  /// Every stage in order; cached stages are reused.
  RunManifest run();
  TrainOutcome train_gcn();

  /// Merges this invocation's stage reports into manifest.json.
  RunManifest write_manifest();

  const RunConfig& config() const { return cfg_; }
  std::string path(const std::string& artifact) const;

 private:
  struct Lock;

  StageReport run_stage(const std::string& name, const std::vector<std::string>& inputs,
                        const std::string& config_subset, const std::vector<std::string>& outputs,
                        const std::function<void()>& body);
  std::vector<TrainingExample> training_examples();
  MultimodalGraph graph_for(const Sample& s, const EmbeddingStore& sample_embs,
                            const EmbeddingStore& index_embs, const KnowledgeStore& kg,
                            const std::vector<RetrievalRecord>& filtered) const;

  RunConfig cfg_;
  LvlmFactory lvlm_factory_;
  std::unique_ptr<Lock> lock_;
  std::vector<StageReport> reports_;
};

StageReport cmd_build_index(const RunConfig& cfg);
RunManifest cmd_run(const RunConfig& cfg, LvlmFactory lvlm = default_lvlm_factory);
TrainOutcome cmd_train_gcn(const RunConfig& cfg);

}  // namespace csvqa

#endif  // CSVQA_PIPELINE_HPP
