// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/kg_store.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>

#include "csvqa/errors.hpp"

namespace csvqa {

namespace {

struct RelationInfo {
  RelationKind kind;
  std::string_view name;
  CsCategory category;
  std::string_view phrase;
};

constexpr std::array<RelationInfo, kRelationCount> kRelations{{
    {RelationKind::ObjectUse, "ObjectUse", CsCategory::PE, "is used for"},
    {RelationKind::AtLocation, "AtLocation", CsCategory::PE, "is at"},
    {RelationKind::MadeUpOf, "MadeUpOf", CsCategory::PE, "is made up of"},
    {RelationKind::HasProperty, "HasProperty", CsCategory::PE, "can be"},
    {RelationKind::CapableOf, "CapableOf", CsCategory::PE, "is capable of"},
    {RelationKind::Desires, "Desires", CsCategory::PE, "desires"},
    {RelationKind::NotDesires, "NotDesires", CsCategory::PE, "does not desire"},
    {RelationKind::IsAfter, "IsAfter", CsCategory::EC, "occurs after"},
    {RelationKind::HasSubEvent, "HasSubEvent", CsCategory::EC, "has sub-event"},
    {RelationKind::IsBefore, "IsBefore", CsCategory::EC, "occurs before"},
    {RelationKind::HinderedBy, "HinderedBy", CsCategory::EC, "is hindered by"},
    {RelationKind::Causes, "Causes", CsCategory::EC, "causes"},
    {RelationKind::xReason, "xReason", CsCategory::EC, "is because someone"},
    {RelationKind::isFilledBy, "isFilledBy", CsCategory::EC, "is filled by"},
    {RelationKind::xNeed, "xNeed", CsCategory::SI, "then someone needs"},
    {RelationKind::xAttr, "xAttr", CsCategory::SI, "then someone has attributes"},
    {RelationKind::xEffect, "xEffect", CsCategory::SI, "then someone has the effect"},
    {RelationKind::xReact, "xReact", CsCategory::SI, "then someone reacts with"},
    {RelationKind::xWant, "xWant", CsCategory::SI, "then someone wants"},
    {RelationKind::xIntent, "xIntent", CsCategory::SI, "then someone intends"},
    {RelationKind::oEffect, "oEffect", CsCategory::SI, "then the effect on another is"},
    {RelationKind::oReact, "oReact", CsCategory::SI, "then another reacts with"},
    {RelationKind::oWant, "oWant", CsCategory::SI, "then another one wants"},
}};

const RelationInfo& info(RelationKind r) {
  return kRelations[static_cast<std::size_t>(r)];
}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v';
}

void validate(const KnowledgeTriplet& t) {
  if (trim(t.head).empty() || trim(t.tail).empty()) {
    throw ContractError("triplet " + std::to_string(t.id) + " has an empty head or tail");
  }
}

}  // namespace

const std::array<RelationKind, kRelationCount>& all_relations() {
  static const auto rels = [] {
    std::array<RelationKind, kRelationCount> out{};
    for (std::size_t i = 0; i < kRelationCount; ++i) out[i] = kRelations[i].kind;
    return out;
  }();
  return rels;
}

std::string_view relation_name(RelationKind r) { return info(r).name; }

std::optional<RelationKind> parse_relation(std::string_view name) {
  for (const auto& r : kRelations) {
    if (r.name == name) return r.kind;
  }
  return std::nullopt;
}

CsCategory relation_category(RelationKind r) { return info(r).category; }

std::string_view relation_phrase(RelationKind r) { return info(r).phrase; }

std::string_view category_name(CsCategory c) {
  switch (c) {
    case CsCategory::PE: return "PE";
    case CsCategory::EC: return "EC";
    case CsCategory::SI: return "SI";
  }
  return "PE";
}

std::optional<CsCategory> parse_category(std::string_view name) {
  if (name == "PE") return CsCategory::PE;
  if (name == "EC") return CsCategory::EC;
  if (name == "SI") return CsCategory::SI;
  return std::nullopt;
}

KnowledgeStore::KnowledgeStore(std::vector<KnowledgeTriplet> triplets)
    : triplets_(std::move(triplets)) {
  order_by_id_.resize(triplets_.size());
  for (std::size_t i = 0; i < triplets_.size(); ++i) {
    validate(triplets_[i]);
    order_by_id_[i] = i;
  }
  std::sort(order_by_id_.begin(), order_by_id_.end(),
            [&](std::size_t a, std::size_t b) { return triplets_[a].id < triplets_[b].id; });
  for (std::size_t i = 1; i < order_by_id_.size(); ++i) {
    if (triplets_[order_by_id_[i]].id == triplets_[order_by_id_[i - 1]].id) {
      throw ContractError("duplicate triplet id " +
                          std::to_string(triplets_[order_by_id_[i]].id));
    }
  }
}

const KnowledgeTriplet* KnowledgeStore::find(std::int64_t id) const {
  auto it = std::lower_bound(order_by_id_.begin(), order_by_id_.end(), id,
                             [&](std::size_t idx, std::int64_t v) { return triplets_[idx].id < v; });
  if (it == order_by_id_.end() || triplets_[*it].id != id) return nullptr;
  return &triplets_[*it];
}

ParseResult parse_knowledge_file(std::istream& in) {
  ParseReport report;
  std::vector<KnowledgeTriplet> out;
  std::string line;
  while (std::getline(in, line)) {
    ++report.lines;
    const auto view = trim(line);
    if (view.empty() || view.front() == '#') {
      ++report.comments;
      continue;
    }
    // Exactly three tab-separated fields.
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
      ++report.malformed;
      continue;
    }
    const auto head = trim(std::string_view(line).substr(0, t1));
    const auto rel = trim(std::string_view(line).substr(t1 + 1, t2 - t1 - 1));
    const auto tail = trim(std::string_view(line).substr(t2 + 1));
    if (head.empty() || tail.empty() || rel.empty()) {
      ++report.malformed;
      continue;
    }
    const auto kind = parse_relation(rel);
    if (!kind) {
      ++report.unknown_relation;
      continue;
    }
    if (tail == "none") {
      ++report.none_tail;
      continue;
    }
    out.push_back({static_cast<std::int64_t>(out.size()), std::string(head), *kind,
                   std::string(tail)});
  }
  if (in.bad()) throw IoError("read failure while parsing knowledge file");
  report.accepted = out.size();
  if (out.empty()) throw EmptyStoreError("knowledge file contains no valid triplets");
  return {KnowledgeStore(std::move(out)), report};
}

ParseResult parse_knowledge_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open knowledge file: " + path);
  return parse_knowledge_file(in);
}

void write_knowledge_tsv(const KnowledgeStore& store, std::ostream& out) {
  for (const auto& t : store.triplets()) {
    out << t.head << '\t' << relation_name(t.relation) << '\t' << t.tail << '\n';
  }
}

void write_store_ndjson(const KnowledgeStore& store, std::ostream& out) {
  for (const auto& t : store.triplets()) {
    nlohmann::ordered_json j;
    j["id"] = t.id;
    j["head"] = t.head;
    j["relation"] = relation_name(t.relation);
    j["tail"] = t.tail;
    j["category"] = category_name(t.category());
    out << j.dump() << '\n';
  }
}

KnowledgeStore read_store_ndjson(std::istream& in) {
  std::vector<KnowledgeTriplet> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto rel = parse_relation(j.at("relation").get<std::string>());
      if (!rel) throw ContractError("unknown relation");
      out.push_back({j.at("id").get<std::int64_t>(), j.at("head").get<std::string>(), *rel,
                     j.at("tail").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("store line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ContractError& e) {
      throw ContractError("store line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read failure while reading knowledge store");
  if (out.empty()) throw EmptyStoreError("knowledge store is empty");
  return KnowledgeStore(std::move(out));
}

std::string substitute_placeholders(std::string_view text) {
  // Longest token first so possessives are not split.
  static constexpr std::array<std::pair<std::string_view, std::string_view>, 5> kSubs{{
      {"PersonX's", "Someone's"},
      {"PersonY's", "Another one's"},
      {"PersonX", "Someone"},
      {"PersonY", "Another"},
      {"___", "something"},
  }};
  std::string out;
  out.reserve(text.size() + 16);
  bool pending_space = false;
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_space(text[i])) {
      pending_space = !out.empty();
      ++i;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    bool matched = false;
    for (const auto& [from, to] : kSubs) {
      if (text.compare(i, from.size(), from) == 0) {
        out.append(to);
        i += from.size();
        matched = true;
        break;
      }
    }
    if (!matched) out.push_back(text[i++]);
  }
  return out;
}

std::string flatten_triplet(const KnowledgeTriplet& t) {
  std::string s = substitute_placeholders(t.head);
  s.push_back(' ');
  s.append(relation_phrase(t.relation));
  s.push_back(' ');
  s.append(substitute_placeholders(t.tail));
  return s;
}

}  // namespace csvqa
