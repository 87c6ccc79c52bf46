// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/pipeline.hpp"

#include <errno.h>
#include <fcntl.h>
#include <fmt/format.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_map>

#include "csvqa/errors.hpp"

namespace csvqa {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 8> kStageOrder{
    "build-index", "retrieve", "filter", "score", "prompt", "infer", "eval", "train-gcn"};

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  // URLs and absolute paths pass through.
  if (p.find("://") != std::string::npos || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).lexically_normal().string();
}

std::string sample_key(const std::string& id, SourceKind s) {
  return id + "/" + std::string(source_name(s));
}

std::string topology_name(Topology t) {
  return t == Topology::InputHub ? "input-hub" : "fully-connected";
}

Topology parse_topology(const std::string& s) {
  if (s == "input-hub") return Topology::InputHub;
  if (s == "fully-connected") return Topology::FullyConnected;
  throw ContractError("unknown graph topology: " + s);
}

template <typename T>
T read_with(const std::string& path, T (*reader)(std::istream&)) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return reader(in);
}

template <typename Writer, typename Records>
std::string render(Writer writer, const Records& records) {
  std::ostringstream out;
  writer(records, out);
  return out.str();
}

/// Re-throws the active exception with stage and sample context, keeping its type.
[[noreturn]] void rethrow_with_context(const std::string& ctx) {
  try {
    throw;
  } catch (const ContractError& e) {
    throw ContractError(ctx + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(ctx + e.what());
  } catch (const TransportError& e) {
    throw TransportError(ctx + e.what());
  } catch (const FixtureError& e) {
    throw FixtureError(ctx + e.what());
  } catch (const IoError& e) {
    throw IoError(ctx + e.what());
  } catch (const EmptyStoreError& e) {
    throw EmptyStoreError(ctx + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw Error(ctx + e.what());
  }
}

std::size_t count_triplets(const std::vector<RetrievalRecord>& records) {
  std::size_t n = 0;
  for (const auto& r : records) n += r.triplets.size();
  return n;
}

EmbeddingClientConfig service_config(const RunConfig& cfg) {
  EmbeddingClientConfig c;
  c.endpoint = cfg.embedding_service;
  c.max_in_flight = cfg.max_in_flight;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  auto base = fs::path(path).parent_path().string();
  return from_json(ss.str(), base.empty() ? "." : base);
}

RunConfig RunConfig::from_json(const std::string& text, const std::string& base_dir) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    c.dataset = resolve(base_dir, j.value("dataset", std::string()));
    c.kg = resolve(base_dir, j.value("kg", std::string()));
    if (j.contains("embeddings")) {
      const auto& e = j["embeddings"];
      c.embedding_store = resolve(base_dir, e.value("store", std::string()));
      c.embedding_service = e.value("service", std::string());
    }
    c.metric = parse_metric(j.value("metric", std::string("cosine")));
    c.big_k = j.value("big_k", kDefaultBigK);
    c.k = j.value("k", kDefaultSmallK);
    c.tau = j.value("tau", kDefaultTau);
    if (j.contains("ratios")) {
      const auto& r = j["ratios"];
      if (r.is_string()) {
        c.ratios = parse_ratios(r.get<std::string>());
      } else {
        const auto v = r.get<std::vector<double>>();
        if (v.size() != 3) throw ContractError("ratios need exactly three values");
        c.ratios.p = {v[0], v[1], v[2]};
      }
    }
    c.combine = parse_combine(j.value("combine", std::string("max")));
    const auto scope = j.value("relevance_scope", std::string("dataset"));
    if (scope == "dataset") {
      c.relevance_scope = RelevanceScope::Dataset;
    } else if (scope == "sample") {
      c.relevance_scope = RelevanceScope::Sample;
    } else {
      throw ContractError("relevance_scope must be 'dataset' or 'sample'");
    }
    if (j.contains("ablation")) {
      const auto& a = j["ablation"];
      c.ablation.explicit_cs = a.value("explicit_cs", true);
      c.ablation.relevance = a.value("relevance", true);
      c.ablation.confidence = a.value("confidence", true);
    }
    c.topology = parse_topology(j.value("topology", std::string("input-hub")));
    c.checkpoint = resolve(base_dir, j.value("checkpoint", std::string()));
    if (j.contains("lvlm")) {
      const auto& l = j["lvlm"];
      c.replay = resolve(base_dir, l.value("replay", std::string()));
      c.lvlm.url = l.value("url", std::string());
      c.lvlm.model = l.value("model", std::string());
      c.lvlm.token_env = l.value("token_env", std::string());
      c.lvlm.timeout = std::chrono::milliseconds(l.value("timeout_ms", 60000));
      c.lvlm.max_attempts = l.value("max_attempts", 3);
      c.lvlm.max_tokens = l.value("max_tokens", 512);
    }
    c.max_in_flight = j.value("max_in_flight", std::size_t{4});
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
      c.train.patience = t.value("patience", c.train.patience);
      c.train.validation_fraction = t.value("validation_fraction", c.train.validation_fraction);
      c.train.hidden0 = t.value("hidden0", c.train.hidden0);
      c.train.hidden1 = t.value("hidden1", c.train.hidden1);
      c.train.dropout_rate = t.value("dropout", c.train.dropout_rate);
      c.train.num_options = t.value("num_options", c.train.num_options);
    }
    c.seed = j.value("seed", std::uint64_t{0});
    c.output_dir = resolve(base_dir, j.value("output_dir", std::string("out")));
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  return c;
}

void RunConfig::validate() const {
  auto need_file = [](const std::string& p, const char* what) {
    if (p.empty()) throw ContractError(std::string("config: ") + what + " path is not set");
    if (!fs::is_regular_file(p)) throw ContractError(std::string("config: ") + what + " not found: " + p);
  };
  need_file(dataset, "dataset");
  need_file(kg, "kg");
  if (embedding_store.empty() && embedding_service.empty()) {
    throw ContractError("config: set embeddings.store and/or embeddings.service");
  }
  if (!embedding_store.empty()) need_file(embedding_store, "embedding store");
  if (!replay.empty()) need_file(replay, "replay fixture");
  if (big_k < 1) throw ContractError("config: big_k must be at least 1");
  if (k < 1) throw ContractError("config: k must be at least 1");
  if (!std::isfinite(tau)) throw ContractError("config: tau must be finite");
  if (max_in_flight < 1) throw ContractError("config: max_in_flight must be at least 1");
  ratios.validate();
}

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? (fs::path(output_dir) / "gcn.ckpt").string() : checkpoint;
}

std::string RunConfig::semantic_json() const {
  ojson j;
  j["dataset"] = dataset;
  j["kg"] = kg;
  j["embeddings"] = {{"store", embedding_store}, {"service", embedding_service}};
  j["metric"] = metric_name(metric);
  j["big_k"] = big_k;
  j["k"] = k;
  j["tau"] = tau;
  j["ratios"] = ratios.p;
  j["combine"] = combine_name(combine);
  j["relevance_scope"] = relevance_scope == RelevanceScope::Dataset ? "dataset" : "sample";
  j["ablation"] = {{"explicit_cs", ablation.explicit_cs},
                   {"relevance", ablation.relevance},
                   {"confidence", ablation.confidence}};
  j["topology"] = topology_name(topology);
  j["checkpoint"] = checkpoint;
  j["lvlm"] = {{"replay", replay}, {"url", lvlm.url}, {"model", lvlm.model},
               {"max_tokens", lvlm.max_tokens}};
  j["train"] = {{"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"max_epochs", train.max_epochs},
                {"patience", train.patience},
                {"validation_fraction", train.validation_fraction},
                {"hidden0", train.hidden0},
                {"hidden1", train.hidden1},
                {"dropout", train.dropout_rate},
                {"num_options", train.num_options}};
  j["seed"] = seed;
  return j.dump();
}

std::string RunConfig::hash() const { return sha256_hex(semantic_json()); }

std::unique_ptr<LvlmClient> default_lvlm_factory(const RunConfig& cfg) {
  if (!cfg.replay.empty()) {
    return std::make_unique<ReplayLvlmClient>(ReplayLvlmClient::from_file(cfg.replay));
  }
  return std::make_unique<HttpLvlmClient>(cfg.lvlm);
}

// ---------------------------------------------------------------------------
// Pipeline

struct Pipeline::Lock {
  std::string path;
  int fd = -1;

  explicit Lock(std::string p) : path(std::move(p)) {
    fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw IoError("output directory is locked by another run (" + path +
                    "): " + std::strerror(errno));
    }
  }
  ~Lock() {
    if (fd >= 0) {
      ::close(fd);
      ::unlink(path.c_str());
    }
  }
};

Pipeline::Pipeline(RunConfig cfg, LvlmFactory lvlm)
    : cfg_(std::move(cfg)), lvlm_factory_(std::move(lvlm)) {
  cfg_.validate();
  std::error_code ec;
  fs::create_directories(fs::path(cfg_.output_dir) / "index", ec);
  fs::create_directories(fs::path(cfg_.output_dir) / ".cache", ec);
  if (ec) throw IoError("cannot create output directory " + cfg_.output_dir + ": " + ec.message());
  lock_ = std::make_unique<Lock>((fs::path(cfg_.output_dir) / ".lock").string());
}

Pipeline::~Pipeline() = default;

std::string Pipeline::path(const std::string& artifact) const {
  return (fs::path(cfg_.output_dir) / artifact).string();
}

StageReport Pipeline::run_stage(const std::string& name, const std::vector<std::string>& inputs,
                                const std::string& config_subset,
                                const std::vector<std::string>& outputs,
                                const std::function<void()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string material = name + "\n" + config_subset + "\n";
  for (const auto& in : inputs) {
    if (!fs::is_regular_file(in)) {
      throw ContractError("stage " + name + ": missing input " + in +
                          "; run the upstream stage first");
    }
    material += file_sha256(in) + "\n";
  }
  const auto key = sha256_hex(material);
  const auto key_path = path(".cache/" + name + ".key");

  StageReport report{name, "ran", 0.0, outputs};
  bool cached = fs::is_regular_file(key_path) && read_file(key_path) == key;
  for (const auto& o : outputs) cached = cached && fs::is_regular_file(path(o));
  if (cached) {
    report.status = "cached";
  } else {
    try {
      body();
    } catch (const Error&) {
      rethrow_with_context("stage " + name + ": ");
    }
    write_file_atomic(key_path, key);
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  reports_.push_back(report);
  return report;
}

StageReport Pipeline::build_index() {
  std::vector<std::string> inputs{cfg_.kg};
  if (!cfg_.embedding_store.empty()) inputs.push_back(cfg_.embedding_store);
  return run_stage(
      "build-index", inputs, cfg_.embedding_service,
      {"index/kg.ndjson", "index/embeddings.mgem", "index/manifest.json"}, [&] {
        const auto parsed = parse_knowledge_file(cfg_.kg);
        const auto& kg = parsed.store;
        std::optional<EmbeddingStore> source;
        if (!cfg_.embedding_store.empty()) source = load_embedding_store(cfg_.embedding_store);

        // Heads, tails and (when available) flattened sentences, in KG order.
        std::vector<std::string> wanted;
        std::vector<std::string> sentences;
        std::unordered_map<std::string, bool> seen;
        for (const auto& t : kg.triplets()) {
          for (const auto* key : {&t.head, &t.tail}) {
            if (seen.emplace(*key, true).second) wanted.push_back(*key);
          }
          auto sentence = flatten_triplet(t);
          if (seen.emplace(sentence, false).second) sentences.push_back(std::move(sentence));
        }
        std::vector<std::string> missing;
        for (const auto& k : wanted) {
          if (!source || !source->contains(k)) missing.push_back(k);
        }
        std::vector<std::string> missing_sentences;
        for (const auto& s : sentences) {
          if (!source || !source->contains(s)) missing_sentences.push_back(s);
        }

        std::unordered_map<std::string, EmbeddingVector> fetched;
        if (!missing.empty()) {
          if (cfg_.embedding_service.empty()) {
            std::string msg = "missing embeddings for " + std::to_string(missing.size()) +
                              " key(s) in store-only mode; first:";
            for (std::size_t i = 0; i < std::min<std::size_t>(10, missing.size()); ++i) {
              msg += " '" + missing[i] + "'";
            }
            throw ContractError(msg);
          }
          std::vector<EmbedItem> items;
          for (const auto& k : missing) items.push_back({EmbedItem::Kind::Text, k});
          for (const auto& s : missing_sentences) items.push_back({EmbedItem::Kind::Text, s});
          auto vecs = fetch_embeddings(service_config(cfg_), items);
          for (std::size_t i = 0; i < items.size(); ++i) {
            fetched.emplace(items[i].payload, std::move(vecs[i]));
          }
        } else if (!cfg_.embedding_service.empty() && !missing_sentences.empty()) {
          std::vector<EmbedItem> items;
          for (const auto& s : missing_sentences) items.push_back({EmbedItem::Kind::Text, s});
          auto vecs = fetch_embeddings(service_config(cfg_), items);
          for (std::size_t i = 0; i < items.size(); ++i) {
            fetched.emplace(items[i].payload, std::move(vecs[i]));
          }
        }

        auto lookup = [&](const std::string& k) -> const EmbeddingVector* {
          if (source) {
            if (const auto* v = source->find(k)) return v;
          }
          auto it = fetched.find(k);
          return it == fetched.end() ? nullptr : &it->second;
        };
        const EmbeddingVector* first = lookup(wanted.front());
        EmbeddingStore index(static_cast<std::uint32_t>(first->size()));
        for (const auto& k : wanted) index.insert(k, *lookup(k));
        std::size_t sentence_count = 0;
        for (const auto& s : sentences) {
          if (const auto* v = lookup(s); v && !index.contains(s)) {
            index.insert(s, *v);
            ++sentence_count;
          }
        }
        // Round-trip check that every triplet is indexable.
        (void)TripletIndex::build(kg, index);

        write_file_atomic(path("index/kg.ndjson"), render(write_store_ndjson, kg));
        std::ostringstream emb;
        write_embedding_store(index, emb);
        write_file_atomic(path("index/embeddings.mgem"), emb.str());

        ojson m;
        m["triplets"] = kg.size();
        m["embeddings"] = index.size();
        m["sentence_embeddings"] = sentence_count;
        m["dim"] = index.dim();
        m["parse"] = {{"lines", parsed.report.lines},
                      {"comments", parsed.report.comments},
                      {"accepted", parsed.report.accepted},
                      {"malformed", parsed.report.malformed},
                      {"unknown_relation", parsed.report.unknown_relation},
                      {"none_tail", parsed.report.none_tail}};
        write_file_atomic(path("index/manifest.json"), m.dump(2) + "\n");
      });
}

StageReport Pipeline::retrieve() {
  std::vector<std::string> inputs{cfg_.dataset, path("index/kg.ndjson"),
                                  path("index/embeddings.mgem")};
  if (!cfg_.embedding_store.empty()) inputs.push_back(cfg_.embedding_store);
  const auto subset = fmt::format("{}|{}|{}|{}", metric_name(cfg_.metric), cfg_.big_k,
                                  combine_name(cfg_.combine), cfg_.embedding_service);
  return run_stage("retrieve", inputs, subset, {"sample_embeddings.mgem", "retrieved.ndjson"}, [&] {
    const auto dataset = read_dataset(cfg_.dataset);
    const auto kg = read_with(path("index/kg.ndjson"), read_store_ndjson);
    const auto index_embs = load_embedding_store(path("index/embeddings.mgem"));
    const auto index = TripletIndex::build(kg, index_embs);
    std::optional<EmbeddingStore> source;
    if (!cfg_.embedding_store.empty()) {
      source = load_embedding_store(cfg_.embedding_store, index_embs.dim());
    }

    auto key_for = [](const Sample& s, SourceKind src) -> const std::string& {
      return src == SourceKind::Image ? s.image_ref
             : src == SourceKind::Question ? s.question
                                           : s.caption;
    };
    EmbeddingStore sample_embs(index_embs.dim());
    std::vector<EmbedItem> items;
    std::vector<std::string> item_keys;
    std::vector<std::string> missing;
    for (const auto& s : dataset) {
      for (auto src : kAllSources) {
        const auto& key = key_for(s, src);
        const EmbeddingVector* v = source ? source->find(key) : nullptr;
        if (v == nullptr) v = index_embs.find(key);
        if (v != nullptr) {
          sample_embs.insert(sample_key(s.id, src), *v);
          continue;
        }
        if (cfg_.embedding_service.empty()) {
          missing.push_back(sample_key(s.id, src) + " ('" + key + "')");
          continue;
        }
        std::error_code ec;
        if (src == SourceKind::Image && fs::is_regular_file(key, ec)) {
          items.push_back({EmbedItem::Kind::Image, base64_encode(read_file(key))});
        } else {
          items.push_back({EmbedItem::Kind::Text, key});
        }
        item_keys.push_back(sample_key(s.id, src));
      }
    }
    if (!missing.empty()) {
      std::string msg = "no embedding for " + std::to_string(missing.size()) + " sample input(s):";
      for (std::size_t i = 0; i < std::min<std::size_t>(10, missing.size()); ++i) {
        msg += " " + missing[i];
      }
      throw ContractError(msg);
    }
    if (!items.empty()) {
      auto vecs = fetch_embeddings(service_config(cfg_), items);
      for (std::size_t i = 0; i < items.size(); ++i) sample_embs.insert(item_keys[i], vecs[i]);
    }

    std::vector<RetrievalRecord> records;
    for (const auto& s : dataset) {
      for (auto src : kAllSources) {
        try {
          RetrievalRecord rec{s.id, src, {}};
          for (const auto& st : retrieve_top_k(sample_embs.at(sample_key(s.id, src)), index,
                                               cfg_.big_k, cfg_.metric, cfg_.combine, src)) {
            rec.triplets.push_back(
                {st.triplet_id, st.score, st.category, std::nullopt, flatten_triplet(*kg.find(st.triplet_id))});
          }
          records.push_back(std::move(rec));
        } catch (const Error&) {
          rethrow_with_context("sample " + s.id + ": ");
        }
      }
    }
    std::ostringstream emb;
    write_embedding_store(sample_embs, emb);
    write_file_atomic(path("sample_embeddings.mgem"), emb.str());
    write_file_atomic(path("retrieved.ndjson"), render(write_retrieval_artifact, records));
  });
}

StageReport Pipeline::filter() {
  const auto subset = fmt::format("{}|{}|{}|{}|{}|{}", cfg_.ratios.p[0], cfg_.ratios.p[1],
                                  cfg_.ratios.p[2], cfg_.k, cfg_.tau,
                                  cfg_.relevance_scope == RelevanceScope::Dataset ? "dataset"
                                                                                  : "sample");
  return run_stage("filter", {path("retrieved.ndjson")}, subset, {"filtered.ndjson"}, [&] {
    auto records = read_with(path("retrieved.ndjson"), read_retrieval_artifact);
    for (auto& rec : records) {
      std::unordered_map<std::int64_t, std::string> sentences;
      std::vector<ScoredTriplet> cands;
      for (auto& t : rec.triplets) {
        cands.push_back({t.id, rec.source, t.score, t.category});
        sentences.emplace(t.id, std::move(t.sentence));
      }
      std::vector<RetrievedTriplet> kept;
      for (const auto& st : filter_by_type(cands, cfg_.ratios, cfg_.k, cfg_.tau)) {
        kept.push_back({st.triplet_id, st.score, st.category, std::nullopt,
                        sentences.at(st.triplet_id)});
      }
      rec.triplets = std::move(kept);
    }
    // Pass 1: stats over the selected scores; pass 2: grade.
    std::array<std::vector<double>, 3> by_source;
    for (const auto& rec : records) {
      for (const auto& t : rec.triplets) by_source[static_cast<std::size_t>(rec.source)].push_back(t.score);
    }
    std::array<std::optional<SourceStats>, 3> dataset_stats;
    for (auto src : kAllSources) {
      const auto& scores = by_source[static_cast<std::size_t>(src)];
      if (!scores.empty()) dataset_stats[static_cast<std::size_t>(src)] = compute_source_stats(scores, src);
    }
    for (auto& rec : records) {
      if (rec.triplets.empty()) continue;
      SourceStats stats;
      if (cfg_.relevance_scope == RelevanceScope::Dataset) {
        stats = *dataset_stats[static_cast<std::size_t>(rec.source)];
      } else {
        std::vector<double> scores;
        for (const auto& t : rec.triplets) scores.push_back(t.score);
        stats = compute_source_stats(scores, rec.source);
      }
      for (auto& t : rec.triplets) t.level = assign_relevance(t.score, stats);
    }
    write_file_atomic(path("filtered.ndjson"), render(write_retrieval_artifact, records));
  });
}

MultimodalGraph Pipeline::graph_for(const Sample& s, const EmbeddingStore& sample_embs,
                                    const EmbeddingStore& index_embs, const KnowledgeStore& kg,
                                    const std::vector<RetrievalRecord>& filtered) const {
  // Union of the per-source selections, best score per triplet, top k overall.
  std::map<std::int64_t, ScoredTriplet> best;
  std::unordered_map<std::int64_t, std::string> sentences;
  for (const auto& rec : filtered) {
    if (rec.sample_id != s.id) continue;
    for (const auto& t : rec.triplets) {
      auto [it, inserted] = best.try_emplace(t.id, ScoredTriplet{t.id, rec.source, t.score, t.category});
      if (!inserted && t.score > it->second.score) it->second.score = t.score;
      sentences.emplace(t.id, t.sentence);
    }
  }
  std::vector<ScoredTriplet> ranked;
  for (const auto& [id, st] : best) ranked.push_back(st);
  std::sort(ranked.begin(), ranked.end(), ranks_before);
  if (ranked.size() > static_cast<std::size_t>(cfg_.k)) ranked.resize(static_cast<std::size_t>(cfg_.k));

  std::vector<CommonsenseNode> nodes;
  for (const auto& st : ranked) {
    const auto& sentence = sentences.at(st.triplet_id);
    EmbeddingVector v;
    if (const auto* sv = index_embs.find(sentence)) {
      v = *sv;
    } else {
      // No sentence embedding: fall back to the mean of the endpoint embeddings.
      const auto* t = kg.find(st.triplet_id);
      if (t == nullptr) throw ContractError("filtered triplet " + std::to_string(st.triplet_id) + " not in index");
      v = 0.5 * (index_embs.at(t->head) + index_embs.at(t->tail));
    }
    nodes.push_back({sentence, std::move(v)});
  }
  SampleEmbeddings se{sample_embs.at(sample_key(s.id, SourceKind::Image)),
                      sample_embs.at(sample_key(s.id, SourceKind::Question)),
                      sample_embs.at(sample_key(s.id, SourceKind::Caption))};
  return build_graph(se, nodes, cfg_.topology);
}

StageReport Pipeline::score() {
  if (!cfg_.ablation.confidence) {
    StageReport r{"score", "skipped", 0.0, {}};
    reports_.push_back(r);
    return r;
  }
  const auto ckpt = cfg_.checkpoint_path();
  if (!fs::is_regular_file(ckpt)) {
    throw ContractError("stage score: confidence is enabled but no checkpoint at " + ckpt +
                        " (run train-gcn first or disable ablation.confidence)");
  }
  const std::vector<std::string> inputs{cfg_.dataset, path("filtered.ndjson"),
                                        path("sample_embeddings.mgem"), path("index/kg.ndjson"),
                                        path("index/embeddings.mgem"), ckpt};
  const auto subset = fmt::format("{}|{}", topology_name(cfg_.topology), cfg_.k);
  return run_stage("score", inputs, subset, {"confidence.ndjson"}, [&] {
    const auto dataset = read_dataset(cfg_.dataset);
    const auto filtered = read_with(path("filtered.ndjson"), read_retrieval_artifact);
    const auto sample_embs = load_embedding_store(path("sample_embeddings.mgem"));
    const auto kg = read_with(path("index/kg.ndjson"), read_store_ndjson);
    const auto index_embs = load_embedding_store(path("index/embeddings.mgem"));
    const auto model = load_checkpoint_file(ckpt);
    std::vector<ConfidenceRecord> out;
    for (const auto& s : dataset) {
      try {
        const auto valid = static_cast<int>(s.options.size());
        if (valid > model.num_options()) {
          throw ContractError(fmt::format("{} options exceed the checkpoint head size {}", valid,
                                          model.num_options()));
        }
        const auto g = graph_for(s, sample_embs, index_embs, kg, filtered);
        const auto conf = score_sample(model, g, valid);
        out.push_back({s.id, conf.probs, valid});
      } catch (const Error&) {
        rethrow_with_context("sample " + s.id + ": ");
      }
    }
    write_file_atomic(path("confidence.ndjson"), render(write_confidence_artifact, out));
  });
}

StageReport Pipeline::prompt() {
  std::vector<std::string> inputs{cfg_.dataset, path("filtered.ndjson")};
  if (cfg_.ablation.confidence) inputs.push_back(path("confidence.ndjson"));
  const auto subset = fmt::format("{}|{}|{}", cfg_.ablation.explicit_cs, cfg_.ablation.relevance,
                                  cfg_.ablation.confidence);
  return run_stage("prompt", inputs, subset, {"prompts.ndjson"}, [&] {
    const auto dataset = read_dataset(cfg_.dataset);
    const auto filtered = read_with(path("filtered.ndjson"), read_retrieval_artifact);
    std::unordered_map<std::string, ConfidenceRecord> conf;
    if (cfg_.ablation.confidence) {
      for (auto& c : read_with(path("confidence.ndjson"), read_confidence_artifact)) {
        conf.emplace(c.sample_id, std::move(c));
      }
    }
    std::unordered_map<std::string, ExplicitKnowledge> knowledge;
    if (cfg_.ablation.explicit_cs) {
      for (const auto& rec : filtered) {
        auto& lines = knowledge[rec.sample_id][rec.source];
        for (const auto& t : rec.triplets) {
          lines.push_back({t.sentence, cfg_.ablation.relevance ? t.level : std::nullopt});
        }
      }
    }
    std::vector<PromptBundle> prompts;
    for (const auto& s : dataset) {
      std::optional<ConfidenceVector> cv;
      if (cfg_.ablation.confidence) {
        auto it = conf.find(s.id);
        if (it == conf.end()) throw ContractError("sample " + s.id + ": no confidence record");
        cv = ConfidenceVector{it->second.confidence, static_cast<int>(s.options.size())};
      }
      auto kit = knowledge.find(s.id);
      prompts.push_back(
          assemble_prompt(s, kit == knowledge.end() ? ExplicitKnowledge{} : kit->second, cv));
    }
    write_file_atomic(path("prompts.ndjson"), render(write_prompt_artifact, prompts));
  });
}

StageReport Pipeline::infer() {
  std::vector<std::string> inputs{cfg_.dataset, path("prompts.ndjson")};
  if (!cfg_.replay.empty()) inputs.push_back(cfg_.replay);
  const auto subset = fmt::format("{}|{}|{}|{}", cfg_.replay.empty() ? "http" : "replay",
                                  cfg_.lvlm.url, cfg_.lvlm.model, cfg_.lvlm.max_tokens);
  return run_stage("infer", inputs, subset, {"predictions.ndjson"}, [&] {
    const auto dataset = read_dataset(cfg_.dataset);
    std::unordered_map<std::string, const Sample*> by_id;
    for (const auto& s : dataset) by_id.emplace(s.id, &s);
    const auto prompts = read_with(path("prompts.ndjson"), read_prompt_artifact);
    auto client = lvlm_factory_(cfg_);

    std::vector<std::string> raw(prompts.size());
    for (std::size_t w = 0; w < prompts.size(); w += cfg_.max_in_flight) {
      const auto end = std::min(prompts.size(), w + cfg_.max_in_flight);
      std::vector<std::future<std::string>> wave;
      for (std::size_t i = w; i < end; ++i) {
        wave.push_back(std::async(std::launch::async,
                                  [&client, &prompts, i] { return query_lvlm(*client, prompts[i]); }));
      }
      for (std::size_t i = w; i < end; ++i) {
        try {
          raw[i] = wave[i - w].get();
        } catch (const Error&) {
          for (std::size_t j = i + 1; j < end; ++j) wave[j - w].wait();
          rethrow_with_context("sample " + prompts[i].sample_id + ": ");
        }
      }
    }
    std::vector<Prediction> preds;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      auto it = by_id.find(prompts[i].sample_id);
      if (it == by_id.end()) throw ContractError("prompt for unknown sample " + prompts[i].sample_id);
      preds.push_back({prompts[i].sample_id, raw[i], try_parse_answer(raw[i], it->second->options)});
    }
    write_file_atomic(path("predictions.ndjson"), render(write_predictions, preds));
  });
}

StageReport Pipeline::eval() {
  return run_stage("eval", {cfg_.dataset, path("predictions.ndjson")}, "", {"eval.json"}, [&] {
    const auto dataset = read_dataset(cfg_.dataset);
    const auto preds = read_with(path("predictions.ndjson"), read_predictions);
    const auto report = evaluate(preds, dataset);
    ojson j;
    j["accuracy"] = report.overall_accuracy;
    j["correct"] = report.correct;
    j["total"] = report.total;
    j["unparsed"] = report.unparsed_count;
    j["per_subcategory"] = ojson::object();
    for (const auto& [tag, ct] : report.per_subcategory) {
      j["per_subcategory"][tag] = {{"correct", ct.first}, {"total", ct.second}};
    }
    write_file_atomic(path("eval.json"), j.dump(2) + "\n");
  });
}

RunManifest Pipeline::run() {
  build_index();
  retrieve();
  filter();
  score();
  prompt();
  infer();
  eval();
  return write_manifest();
}

std::vector<TrainingExample> Pipeline::training_examples() {
  const auto dataset = read_dataset(cfg_.dataset);
  const auto filtered = read_with(path("filtered.ndjson"), read_retrieval_artifact);
  const auto sample_embs = load_embedding_store(path("sample_embeddings.mgem"));
  const auto kg = read_with(path("index/kg.ndjson"), read_store_ndjson);
  const auto index_embs = load_embedding_store(path("index/embeddings.mgem"));
  std::vector<TrainingExample> out;
  for (const auto& s : dataset) {
    if (!s.gold_index) throw ContractError("train-gcn: sample " + s.id + " has no gold answer");
    out.push_back({graph_for(s, sample_embs, index_embs, kg, filtered), *s.gold_index,
                   static_cast<int>(s.options.size())});
  }
  return out;
}

TrainOutcome Pipeline::train_gcn() {
  const auto t0 = std::chrono::steady_clock::now();
  if (read_dataset(cfg_.dataset).empty()) throw ContractError("train-gcn: empty dataset");
  build_index();
  retrieve();
  filter();
  TrainOutcome out;
  auto examples = training_examples();
  auto tc = cfg_.train;
  tc.seed = cfg_.seed;
  out.result = csvqa::train_gcn(examples, tc);
  out.checkpoint_path = cfg_.checkpoint_path();
  out.history_path = path("train_history.csv");
  write_file_atomic(out.checkpoint_path, save_checkpoint(out.result.model));
  std::string csv = "epoch,train_loss,train_accuracy,validation_accuracy\n";
  for (const auto& e : out.result.history) {
    csv += fmt::format("{},{},{},{}\n", e.epoch, e.train_loss, e.train_accuracy,
                       e.validation_accuracy);
  }
  write_file_atomic(out.history_path, csv);
  reports_.push_back({"train-gcn", "ran",
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                      {out.checkpoint_path, "train_history.csv"}});
  write_manifest();
  return out;
}

RunManifest Pipeline::write_manifest() {
  RunManifest m;
  m.config_hash = cfg_.hash();
  std::map<std::string, StageReport> merged;
  const auto mpath = path("manifest.json");
  if (fs::is_regular_file(mpath)) {
    try {
      const auto j = nlohmann::json::parse(read_file(mpath));
      for (const auto& s : j.at("stages")) {
        merged[s.at("name").get<std::string>()] = {
            s.at("name").get<std::string>(), s.at("status").get<std::string>(),
            s.at("seconds").get<double>(), s.at("artifacts").get<std::vector<std::string>>()};
      }
    } catch (const nlohmann::json::exception&) {
      merged.clear();  // unreadable manifest from an interrupted run
    }
  }
  for (const auto& r : reports_) merged[r.name] = r;
  for (auto name : kStageOrder) {
    if (auto it = merged.find(std::string(name)); it != merged.end()) m.stages.push_back(it->second);
  }

  m.counts.samples = read_dataset(cfg_.dataset).size();
  if (fs::is_regular_file(path("retrieved.ndjson"))) {
    m.counts.retrieved = count_triplets(read_with(path("retrieved.ndjson"), read_retrieval_artifact));
  }
  if (fs::is_regular_file(path("filtered.ndjson"))) {
    m.counts.filtered = count_triplets(read_with(path("filtered.ndjson"), read_retrieval_artifact));
  }
  if (fs::is_regular_file(path("eval.json"))) {
    const auto j = nlohmann::json::parse(read_file(path("eval.json")));
    m.counts.unparsed = j.at("unparsed").get<std::size_t>();
    m.accuracy = j.at("accuracy").get<double>();
  }

  ojson j;
  j["config_hash"] = m.config_hash;
  j["stages"] = ojson::array();
  for (const auto& s : m.stages) {
    j["stages"].push_back(
        {{"name", s.name}, {"status", s.status}, {"seconds", s.seconds}, {"artifacts", s.artifacts}});
  }
  j["counts"] = {{"samples", m.counts.samples},
                 {"retrieved", m.counts.retrieved},
                 {"filtered", m.counts.filtered},
                 {"unparsed", m.counts.unparsed}};
  j["accuracy"] = m.accuracy ? ojson(*m.accuracy) : ojson(nullptr);
  write_file_atomic(mpath, j.dump(2) + "\n");
  return m;
}

StageReport cmd_build_index(const RunConfig& cfg) {
  Pipeline p(cfg);
  auto r = p.build_index();
  p.write_manifest();
  return r;
}

RunManifest cmd_run(const RunConfig& cfg, LvlmFactory lvlm) {
  Pipeline p(cfg, std::move(lvlm));
  return p.run();
}

TrainOutcome cmd_train_gcn(const RunConfig& cfg) {
  Pipeline p(cfg);
  return p.train_gcn();
}

}  // namespace csvqa
