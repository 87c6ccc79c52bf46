// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end for the csvqa pipeline.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>
#include <optional>
#include <string>

#include "csvqa/errors.hpp"
#include "csvqa/pipeline.hpp"

namespace {

struct Overrides {
  std::optional<int> k;
  std::optional<std::size_t> big_k;
  std::optional<double> tau;
  std::optional<std::string> metric;
  std::optional<std::string> ratios;
  std::optional<std::string> combine;
  std::optional<std::string> scope;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> replay;
  std::optional<std::string> checkpoint;
  std::optional<std::size_t> max_in_flight;
  bool no_explicit = false;
  bool no_relevance = false;
  bool no_confidence = false;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--k", o.k, "Triplets kept per source after filtering");
  cmd->add_option("--big-k", o.big_k, "Candidates retrieved per source");
  cmd->add_option("--tau", o.tau, "Minimum similarity score");
  cmd->add_option("--metric", o.metric, "cosine | manhattan | euclidean");
  cmd->add_option("--ratios", o.ratios, "Preset name or pe,ec,si");
  cmd->add_option("--combine", o.combine, "max | mean");
  cmd->add_option("--relevance-scope", o.scope, "dataset | sample");
  cmd->add_option("--seed", o.seed);
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--replay", o.replay, "LVLM replay fixture");
  cmd->add_option("--checkpoint", o.checkpoint);
  cmd->add_option("--max-in-flight", o.max_in_flight);
  cmd->add_flag("--no-explicit", o.no_explicit, "Drop explicit knowledge from prompts");
  cmd->add_flag("--no-relevance", o.no_relevance, "Drop relevance annotations");
  cmd->add_flag("--no-confidence", o.no_confidence, "Skip GCN confidence scoring");
}

csvqa::RunConfig load(const std::string& path, const Overrides& o) {
  auto c = csvqa::RunConfig::from_file(path);
  if (o.k) c.k = *o.k;
  if (o.big_k) c.big_k = *o.big_k;
  if (o.tau) c.tau = *o.tau;
  if (o.metric) c.metric = csvqa::parse_metric(*o.metric);
  if (o.ratios) c.ratios = csvqa::parse_ratios(*o.ratios);
  if (o.combine) c.combine = csvqa::parse_combine(*o.combine);
  if (o.scope) {
    if (*o.scope == "dataset") {
      c.relevance_scope = csvqa::RelevanceScope::Dataset;
    } else if (*o.scope == "sample") {
      c.relevance_scope = csvqa::RelevanceScope::Sample;
    } else {
      throw csvqa::ContractError("--relevance-scope must be dataset or sample");
    }
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.replay) c.replay = *o.replay;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.max_in_flight) c.max_in_flight = *o.max_in_flight;
  if (o.no_explicit) c.ablation.explicit_cs = false;
  if (o.no_relevance) c.ablation.relevance = false;
  if (o.no_confidence) c.ablation.confidence = false;
  return c;
}

void print_stage(const csvqa::StageReport& r) {
  fmt::print("{:<12} {:<8} {:.3f}s\n", r.name, r.status, r.seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Commonsense-augmented visual question answering"};
  app.require_subcommand(1);
  std::string config = "csvqa.json";
  Overrides o;

  const char* names[] = {"build-index", "retrieve", "filter", "score", "prompt",
                         "infer",       "eval",     "run",    "train-gcn"};
  for (const char* n : names) {
    auto* cmd = app.add_subcommand(n);
    cmd->add_option("-c,--config", config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    add_overrides(cmd, o);
  }
  CLI11_PARSE(app, argc, argv);
  const std::string which = app.get_subcommands().front()->get_name();

  try {
    const auto cfg = load(config, o);
    if (which == "run") {
      const auto m = csvqa::cmd_run(cfg);
      for (const auto& s : m.stages) print_stage(s);
      if (m.accuracy) fmt::print("accuracy {:.4f} ({} unparsed)\n", *m.accuracy, m.counts.unparsed);
      return 0;
    }
    if (which == "train-gcn") {
      const auto t = csvqa::cmd_train_gcn(cfg);
      fmt::print("best epoch {} of {}{}; checkpoint {}\n", t.result.best_epoch,
                 t.result.history.size(), t.result.early_stopped ? " (early stop)" : "",
                 t.checkpoint_path);
      return 0;
    }
    csvqa::Pipeline p(cfg);
    csvqa::StageReport r;
    if (which == "build-index") r = p.build_index();
    if (which == "retrieve") r = p.retrieve();
    if (which == "filter") r = p.filter();
    if (which == "score") r = p.score();
    if (which == "prompt") r = p.prompt();
    if (which == "infer") r = p.infer();
    if (which == "eval") r = p.eval();
    p.write_manifest();
    print_stage(r);
    return 0;
  } catch (const csvqa::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const csvqa::TransportError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const csvqa::ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
