// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "csvqa/errors.hpp"

namespace csvqa {

std::string_view source_name(SourceKind s) {
  switch (s) {
    case SourceKind::Image: return "image";
    case SourceKind::Question: return "question";
    case SourceKind::Caption: return "caption";
  }
  return "image";
}

SourceKind parse_source(std::string_view name) {
  if (name == "image") return SourceKind::Image;
  if (name == "question") return SourceKind::Question;
  if (name == "caption") return SourceKind::Caption;
  throw ContractError("unknown source kind: " + std::string(name));
}

std::string_view combine_name(ScoreCombine c) { return c == ScoreCombine::Max ? "max" : "mean"; }

ScoreCombine parse_combine(std::string_view name) {
  if (name == "max") return ScoreCombine::Max;
  if (name == "mean") return ScoreCombine::Mean;
  throw ContractError("unknown score combination: " + std::string(name));
}

TripletIndex::TripletIndex(const KnowledgeStore& store, Eigen::MatrixXd heads,
                           Eigen::MatrixXd tails)
    : heads_(std::move(heads)), tails_(std::move(tails)) {
  const auto n = static_cast<Eigen::Index>(store.size());
  if (heads_.rows() != n || tails_.rows() != n || heads_.cols() != tails_.cols()) {
    throw ContractError("triplet index: embedding matrices do not match the store");
  }
  ids_.reserve(store.size());
  categories_.reserve(store.size());
  for (const auto& t : store.triplets()) {
    ids_.push_back(t.id);
    categories_.push_back(t.category());
  }
}

std::vector<std::string> missing_embedding_keys(const KnowledgeStore& store,
                                                const EmbeddingStore& embeddings,
                                                std::size_t limit) {
  std::vector<std::string> missing;
  std::unordered_set<std::string> seen;
  for (const auto& t : store.triplets()) {
    for (const auto* key : {&t.head, &t.tail}) {
      if (missing.size() >= limit) return missing;
      if (!embeddings.contains(*key) && seen.insert(*key).second) missing.push_back(*key);
    }
  }
  return missing;
}

TripletIndex TripletIndex::build(const KnowledgeStore& store, const EmbeddingStore& embeddings) {
  if (store.empty()) throw EmptyStoreError("cannot index an empty knowledge store");
  if (auto missing = missing_embedding_keys(store, embeddings); !missing.empty()) {
    std::ostringstream msg;
    msg << "missing embeddings for " << missing.size() << (missing.size() == 10 ? "+" : "")
        << " key(s):";
    for (const auto& k : missing) msg << " '" << k << "'";
    throw ContractError(msg.str());
  }
  const auto n = static_cast<Eigen::Index>(store.size());
  const auto d = static_cast<Eigen::Index>(embeddings.dim());
  Eigen::MatrixXd heads(n, d);
  Eigen::MatrixXd tails(n, d);
  Eigen::Index row = 0;
  for (const auto& t : store.triplets()) {
    heads.row(row) = embeddings.at(t.head).transpose();
    tails.row(row) = embeddings.at(t.tail).transpose();
    ++row;
  }
  return TripletIndex(store, std::move(heads), std::move(tails));
}

std::vector<ScoredTriplet> retrieve_top_k(const EmbeddingVector& f, const TripletIndex& index,
                                          std::size_t k, SimilarityMetric m, ScoreCombine combine,
                                          SourceKind source) {
  if (k == 0) throw ContractError("retrieve_top_k: K must be at least 1");
  if (index.size() == 0) throw EmptyStoreError("retrieve_top_k: empty index");
  if (f.size() != index.dim()) {
    throw ContractError("retrieve_top_k: query dim " + std::to_string(f.size()) +
                        " does not match index dim " + std::to_string(index.dim()));
  }
  std::vector<ScoredTriplet> all;
  all.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    all.push_back({index.id(i), source,
                   triplet_score(f, index.heads().row(r).transpose(),
                                 index.tails().row(r).transpose(), m, combine),
                   index.category(i)});
  }
  const auto take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                    ranks_before);
  all.resize(take);
  return all;
}

void TypeRatios::validate() const {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("type ratio outside [0, 1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ContractError("type ratios must sum to 1, got " + std::to_string(sum));
  }
}

TypeRatios parse_ratios(std::string_view text) {
  TypeRatios r;
  if (text == "scienceqa") {
    r.p = {0.7, 0.15, 0.15};
  } else if (text == "textvqa") {
    r.p = {0.2, 0.6, 0.2};
  } else if (text == "mmmu") {
    r.p = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  } else {
    std::string s(text);
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream in(s);
    for (auto& v : r.p) {
      if (!(in >> v)) throw ContractError("ratios must be a preset or 'pe,ec,si': " + s);
    }
    std::string rest;
    if (in >> rest) throw ContractError("ratios take exactly three values");
  }
  r.validate();
  return r;
}

Quotas allocate_quotas(const TypeRatios& ratios, int k, std::span<const ScoredTriplet> survivors) {
  if (k < 1) throw ContractError("allocate_quotas: k must be at least 1");
  ratios.validate();
  // Snap products to 1e-9 so that e.g. (1/3)*6 floors to 2 rather than 1.
  constexpr double kSnap = 1e-9;
  Quotas q{};
  std::array<long long, kCategoryCount> frac_key{};
  int assigned = 0;
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    const double exact = ratios.p[c] * k;
    q[c] = static_cast<int>(std::floor(exact + kSnap));
    frac_key[c] = std::max(0LL, std::llround((exact - q[c]) / kSnap));
    assigned += q[c];
  }
  std::array<double, kCategoryCount> best;
  best.fill(-std::numeric_limits<double>::infinity());
  for (const auto& s : survivors) {
    auto& b = best[static_cast<std::size_t>(s.category)];
    b = std::max(b, s.score);
  }
  std::array<std::size_t, kCategoryCount> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (frac_key[a] != frac_key[b]) return frac_key[a] > frac_key[b];
    if (best[a] != best[b]) return best[a] > best[b];
    return a < b;
  });
  for (int r = 0; r < k - assigned; ++r) ++q[order[static_cast<std::size_t>(r) % kCategoryCount]];
  return q;
}

std::vector<ScoredTriplet> filter_by_type(std::span<const ScoredTriplet> candidates,
                                          const TypeRatios& ratios, int k, double tau) {
  if (k < 1) throw ContractError("filter_by_type: k must be at least 1");
  std::vector<ScoredTriplet> survivors;
  for (const auto& c : candidates) {
    if (!std::isfinite(c.score)) throw ContractError("filter_by_type: non-finite score");
    if (c.score >= tau) survivors.push_back(c);
  }
  std::sort(survivors.begin(), survivors.end(), ranks_before);
  const auto quotas = allocate_quotas(ratios, k, survivors);

  std::vector<bool> taken(survivors.size(), false);
  std::array<int, kCategoryCount> used{};
  std::size_t selected = 0;
  for (std::size_t i = 0; i < survivors.size(); ++i) {
    const auto c = static_cast<std::size_t>(survivors[i].category);
    if (used[c] < quotas[c]) {
      ++used[c];
      taken[i] = true;
      ++selected;
    }
  }
  // Slots a starved type could not fill go to the best remaining survivors.
  for (std::size_t i = 0; i < survivors.size() && selected < static_cast<std::size_t>(k); ++i) {
    if (!taken[i]) {
      taken[i] = true;
      ++selected;
    }
  }
  std::vector<ScoredTriplet> out;
  out.reserve(selected);
  for (std::size_t i = 0; i < survivors.size(); ++i) {
    if (taken[i]) out.push_back(survivors[i]);
  }
  return out;
}

std::string_view relevance_name(RelevanceLevel l) {
  switch (l) {
    case RelevanceLevel::High: return "High";
    case RelevanceLevel::Medium: return "Medium";
    case RelevanceLevel::Low: return "Low";
  }
  return "Low";
}

RelevanceLevel parse_relevance(std::string_view name) {
  if (name == "High") return RelevanceLevel::High;
  if (name == "Medium") return RelevanceLevel::Medium;
  if (name == "Low") return RelevanceLevel::Low;
  throw ContractError("unknown relevance level: " + std::string(name));
}

SourceStats compute_source_stats(std::span<const double> scores, SourceKind source) {
  if (scores.empty()) throw ContractError("compute_source_stats: empty score set");
  const double n = static_cast<double>(scores.size());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double ss = 0.0;
  for (double s : scores) ss += (s - mean) * (s - mean);
  return {source, mean, std::sqrt(ss / n), scores.size()};
}

RelevanceLevel assign_relevance(double s, const SourceStats& stats) {
  const double half = stats.stddev / 2.0;
  if (s >= stats.mean + half) return RelevanceLevel::High;
  if (s >= stats.mean - half) return RelevanceLevel::Medium;
  return RelevanceLevel::Low;
}

}  // namespace csvqa
