// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Commonsense knowledge-graph ingestion and verbalization.
//
// Input files are ATOMIC2020-style TSV (`head \t relation \t tail`); the store
// is immutable once built and may be shared across threads.

#ifndef CSVQA_KG_STORE_HPP
#define CSVQA_KG_STORE_HPP

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace csvqa {

enum class RelationKind : std::uint8_t {
  // physical entity
  ObjectUse,
  AtLocation,
  MadeUpOf,
  HasProperty,
  CapableOf,
  Desires,
  NotDesires,
  // event centered
  IsAfter,
  HasSubEvent,
  IsBefore,
  HinderedBy,
  Causes,
  xReason,
  isFilledBy,
  // social interaction
  xNeed,
  xAttr,
  xEffect,
  xReact,
  xWant,
  xIntent,
  oEffect,
  oReact,
  oWant,
};

inline constexpr std::size_t kRelationCount = 23;

enum class CsCategory : std::uint8_t { PE = 0, EC = 1, SI = 2 };

inline constexpr std::size_t kCategoryCount = 3;

/// All relations in declaration order.
const std::array<RelationKind, kRelationCount>& all_relations();

std::string_view relation_name(RelationKind r);
std::optional<RelationKind> parse_relation(std::string_view name);

CsCategory relation_category(RelationKind r);

/// Natural-language phrase inserted between head and tail when flattening.
std::string_view relation_phrase(RelationKind r);

std::string_view category_name(CsCategory c);  // "PE" | "EC" | "SI"
std::optional<CsCategory> parse_category(std::string_view name);

struct KnowledgeTriplet {
  std::int64_t id = 0;
  std::string head;
  RelationKind relation = RelationKind::ObjectUse;
  std::string tail;

  CsCategory category() const { return relation_category(relation); }
  friend bool operator==(const KnowledgeTriplet&, const KnowledgeTriplet&) = default;
};

struct ParseReport {
  std::size_t lines = 0;
  std::size_t comments = 0;  // '#'-prefixed and blank lines
  std::size_t accepted = 0;
  std::size_t malformed = 0;
  std::size_t unknown_relation = 0;
  std::size_t none_tail = 0;
};

class KnowledgeStore {
 public:
  KnowledgeStore() = default;
  /// Triplet ids must be unique; heads and tails non-empty.
  explicit KnowledgeStore(std::vector<KnowledgeTriplet> triplets);

  std::span<const KnowledgeTriplet> triplets() const { return triplets_; }
  std::size_t size() const { return triplets_.size(); }
  bool empty() const { return triplets_.empty(); }

  /// Lookup by triplet id; nullptr when absent.
  const KnowledgeTriplet* find(std::int64_t id) const;

 private:
  std::vector<KnowledgeTriplet> triplets_;
  std::vector<std::size_t> order_by_id_;
};

struct ParseResult {
  KnowledgeStore store;
  ParseReport report;
};

/// Parses TSV triplets. Bad lines are counted in the report; throws
/// EmptyStoreError when nothing survives and IoError on stream failure.
ParseResult parse_knowledge_file(std::istream& in);
ParseResult parse_knowledge_file(const std::string& path);

/// Writes triplets back out as TSV, in store order.
void write_knowledge_tsv(const KnowledgeStore& store, std::ostream& out);

/// Newline-delimited JSON records with id, head, relation, tail, category.
void write_store_ndjson(const KnowledgeStore& store, std::ostream& out);
KnowledgeStore read_store_ndjson(std::istream& in);

/// Replaces PersonX/PersonY placeholders (possessives first) and the "___"
/// blank, collapsing runs of whitespace.
std::string substitute_placeholders(std::string_view text);

/// "<head> <phrase> <tail>" with placeholders substituted.
std::string flatten_triplet(const KnowledgeTriplet& t);

}  // namespace csvqa

#endif  // CSVQA_KG_STORE_HPP
