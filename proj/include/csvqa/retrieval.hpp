// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Explicit commonsense retrieval: exhaustive top-K scoring of triplets against
// an input embedding, by-type quota filtering and relevance grading.

#ifndef CSVQA_RETRIEVAL_HPP
#define CSVQA_RETRIEVAL_HPP

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csvqa/embed_io.hpp"
#include "csvqa/kg_store.hpp"

namespace csvqa {

enum class SourceKind : std::uint8_t { Image = 0, Question = 1, Caption = 2 };

inline constexpr std::array<SourceKind, 3> kAllSources{SourceKind::Image, SourceKind::Question,
                                                       SourceKind::Caption};

std::string_view source_name(SourceKind s);  // "image" | "question" | "caption"
SourceKind parse_source(std::string_view name);

enum class ScoreCombine { Max, Mean };

std::string_view combine_name(ScoreCombine c);
ScoreCombine parse_combine(std::string_view name);

struct ScoredTriplet {
  std::int64_t triplet_id = 0;
  SourceKind source = SourceKind::Image;
  double score = 0.0;
  CsCategory category = CsCategory::PE;

  friend bool operator==(const ScoredTriplet&, const ScoredTriplet&) = default;
};

/// Canonical ranking: higher score first, ties by ascending triplet id.
inline bool ranks_before(const ScoredTriplet& a, const ScoredTriplet& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.triplet_id < b.triplet_id;
}

template <typename DerivedF, typename DerivedH, typename DerivedT>
double triplet_score(const Eigen::MatrixBase<DerivedF>& f, const Eigen::MatrixBase<DerivedH>& head,
                     const Eigen::MatrixBase<DerivedT>& tail, SimilarityMetric m,
                     ScoreCombine combine = ScoreCombine::Max) {
  const double sh = similarity(f, head, m);
  const double st = similarity(f, tail, m);
  return combine == ScoreCombine::Max ? std::max(sh, st) : 0.5 * (sh + st);
}

/// Head and tail embeddings for every triplet of a store, one row per triplet.
class TripletIndex {
 public:
  TripletIndex(const KnowledgeStore& store, Eigen::MatrixXd heads, Eigen::MatrixXd tails);

  /// Looks up head and tail text in `embeddings`; throws ContractError naming
  /// up to ten missing keys.
  static TripletIndex build(const KnowledgeStore& store, const EmbeddingStore& embeddings);

  std::size_t size() const { return ids_.size(); }
  Eigen::Index dim() const { return heads_.cols(); }
  std::int64_t id(std::size_t row) const { return ids_[row]; }
  CsCategory category(std::size_t row) const { return categories_[row]; }
  const Eigen::MatrixXd& heads() const { return heads_; }
  const Eigen::MatrixXd& tails() const { return tails_; }

 private:
  std::vector<std::int64_t> ids_;
  std::vector<CsCategory> categories_;
  Eigen::MatrixXd heads_;
  Eigen::MatrixXd tails_;
};

/// Keys referenced by the store but absent from `embeddings`, in first-seen
/// order, at most `limit`.
std::vector<std::string> missing_embedding_keys(const KnowledgeStore& store,
                                                const EmbeddingStore& embeddings,
                                                std::size_t limit = 10);

/// Exact exhaustive top-K; result sorted by ranks_before.
std::vector<ScoredTriplet> retrieve_top_k(const EmbeddingVector& f, const TripletIndex& index,
                                          std::size_t k, SimilarityMetric m,
                                          ScoreCombine combine = ScoreCombine::Max,
                                          SourceKind source = SourceKind::Image);

struct TypeRatios {
  std::array<double, kCategoryCount> p{1.0 / 3, 1.0 / 3, 1.0 / 3};  // PE, EC, SI

  /// Throws ContractError unless each entry is in [0, 1] and they sum to 1.
  void validate() const;
  double operator[](CsCategory c) const { return p[static_cast<std::size_t>(c)]; }
};

/// "scienceqa" | "textvqa" | "mmmu", or "pe,ec,si".
TypeRatios parse_ratios(std::string_view text);

using Quotas = std::array<int, kCategoryCount>;

/// floor(p_t * k) per type, remainder handed out by largest fractional part.
/// Ties go to the type owning the best-scoring survivor, then PE < EC < SI.
Quotas allocate_quotas(const TypeRatios& ratios, int k,
                       std::span<const ScoredTriplet> survivors = {});

inline constexpr double kDefaultTau = 0.1;
inline constexpr int kDefaultSmallK = 6;
inline constexpr std::size_t kDefaultBigK = 30;

/// Threshold, per-type quota selection, then spill of unfilled slots to the
/// best remaining survivors. Returns at most k triplets, ranked.
std::vector<ScoredTriplet> filter_by_type(std::span<const ScoredTriplet> candidates,
                                          const TypeRatios& ratios, int k = kDefaultSmallK,
                                          double tau = kDefaultTau);

enum class RelevanceLevel : std::uint8_t { Low = 0, Medium = 1, High = 2 };

std::string_view relevance_name(RelevanceLevel l);  // "High" | "Medium" | "Low"
RelevanceLevel parse_relevance(std::string_view name);

struct SourceStats {
  SourceKind source = SourceKind::Image;
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

SourceStats compute_source_stats(std::span<const double> scores,
                                 SourceKind source = SourceKind::Image);

/// High iff s >= mean + sd/2, Low iff s < mean - sd/2, Medium otherwise.
RelevanceLevel assign_relevance(double s, const SourceStats& stats);

}  // namespace csvqa

#endif  // CSVQA_RETRIEVAL_HPP
