// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/artifacts.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <sstream>

#include "csvqa/errors.hpp"

namespace csvqa {

namespace {

using ojson = nlohmann::ordered_json;

template <typename Fn>
void for_each_json_line(std::istream& in, const char* what, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(std::string(what) + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError(std::string("read failure on ") + what);
}

}  // namespace

void write_retrieval_artifact(const std::vector<RetrievalRecord>& records, std::ostream& out) {
  for (const auto& r : records) {
    ojson j;
    j["sample_id"] = r.sample_id;
    j["source"] = source_name(r.source);
    j["triplets"] = ojson::array();
    for (const auto& t : r.triplets) {
      ojson tj;
      tj["id"] = t.id;
      tj["score"] = t.score;
      tj["category"] = category_name(t.category);
      if (t.level) tj["level"] = relevance_name(*t.level);
      tj["sentence"] = t.sentence;
      j["triplets"].push_back(std::move(tj));
    }
    out << j.dump() << '\n';
  }
}

std::vector<RetrievalRecord> read_retrieval_artifact(std::istream& in) {
  std::vector<RetrievalRecord> out;
  for_each_json_line(in, "retrieval artifact", [&](const nlohmann::json& j) {
    RetrievalRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.source = parse_source(j.at("source").get<std::string>());
    for (const auto& tj : j.at("triplets")) {
      RetrievedTriplet t;
      t.id = tj.at("id").get<std::int64_t>();
      t.score = tj.at("score").get<double>();
      const auto cat = parse_category(tj.at("category").get<std::string>());
      if (!cat) throw ContractError("retrieval artifact: unknown category");
      t.category = *cat;
      if (tj.contains("level") && !tj["level"].is_null()) {
        t.level = parse_relevance(tj["level"].get<std::string>());
      }
      t.sentence = tj.at("sentence").get<std::string>();
      r.triplets.push_back(std::move(t));
    }
    out.push_back(std::move(r));
  });
  return out;
}

void write_confidence_artifact(const std::vector<ConfidenceRecord>& records, std::ostream& out) {
  for (const auto& r : records) {
    ojson j;
    j["sample_id"] = r.sample_id;
    j["confidence"] = r.confidence;
    out << j.dump() << '\n';
  }
}

std::vector<ConfidenceRecord> read_confidence_artifact(std::istream& in) {
  std::vector<ConfidenceRecord> out;
  for_each_json_line(in, "confidence artifact", [&](const nlohmann::json& j) {
    ConfidenceRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.confidence = j.at("confidence").get<std::vector<double>>();
    // The artifact carries no option count; consumers narrow this per sample.
    r.valid_options = static_cast<int>(r.confidence.size());
    out.push_back(std::move(r));
  });
  return out;
}

void write_prompt_artifact(const std::vector<PromptBundle>& prompts, std::ostream& out) {
  for (const auto& p : prompts) {
    ojson j;
    j["id"] = p.sample_id;
    j["system"] = p.system_preamble;
    j["body"] = p.body;
    j["image"] = p.image_ref;
    if (p.confidence) {
      j["confidence"] = p.confidence->probs;
      j["valid_options"] = p.confidence->valid_options;
    } else {
      j["confidence"] = nullptr;
    }
    out << j.dump() << '\n';
  }
}

std::vector<PromptBundle> read_prompt_artifact(std::istream& in) {
  std::vector<PromptBundle> out;
  for_each_json_line(in, "prompt artifact", [&](const nlohmann::json& j) {
    PromptBundle p;
    p.sample_id = j.at("id").get<std::string>();
    p.system_preamble = j.at("system").get<std::string>();
    p.body = j.at("body").get<std::string>();
    p.image_ref = j.at("image").get<std::string>();
    if (j.contains("confidence") && !j["confidence"].is_null()) {
      p.confidence = ConfidenceVector{j["confidence"].get<std::vector<double>>(),
                                      j.at("valid_options").get<int>()};
    }
    out.push_back(std::move(p));
  });
  return out;
}

void write_predictions(const std::vector<Prediction>& preds, std::ostream& out) {
  for (const auto& p : preds) {
    ojson j;
    j["id"] = p.sample_id;
    j["raw"] = p.raw;
    if (p.answer) {
      j["index"] = p.answer->option_index;
      j["extraction"] = extraction_name(p.answer->extraction);
    } else {
      j["index"] = nullptr;
      j["extraction"] = "none";
    }
    out << j.dump() << '\n';
  }
}

std::vector<Prediction> read_predictions(std::istream& in) {
  std::vector<Prediction> out;
  for_each_json_line(in, "predictions", [&](const nlohmann::json& j) {
    Prediction p;
    p.sample_id = j.at("id").get<std::string>();
    p.raw = j.at("raw").get<std::string>();
    if (!j.at("index").is_null()) {
      p.answer = ParsedAnswer{j["index"].get<int>(),
                              parse_extraction(j.at("extraction").get<std::string>()), p.raw};
    }
    out.push_back(std::move(p));
  });
  return out;
}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const std::string& path) { return sha256_hex(read_file(path)); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path);
  return data;
}

void write_file_atomic(const std::string& path, std::string_view content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace csvqa
