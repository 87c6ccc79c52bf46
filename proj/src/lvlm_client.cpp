// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/lvlm_client.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "csvqa/embed_io.hpp"
#include "csvqa/errors.hpp"
#include "csvqa/http.hpp"

namespace csvqa {

namespace {

std::string mime_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/png";
}

}  // namespace

std::string build_chat_request(const LvlmEndpoint& endpoint, const PromptBundle& prompt) {
  nlohmann::ordered_json user_content = nlohmann::ordered_json::array();
  user_content.push_back({{"type", "text"}, {"text", prompt.body}});
  std::error_code ec;
  if (!prompt.image_ref.empty() && std::filesystem::is_regular_file(prompt.image_ref, ec)) {
    std::ifstream in(prompt.image_ref, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    user_content.push_back(
        {{"type", "image_url"},
         {"image_url",
          {{"url", "data:" + mime_for(prompt.image_ref) + ";base64," + base64_encode(bytes)}}}});
  }
  nlohmann::ordered_json req;
  req["model"] = endpoint.model;
  req["temperature"] = 0;
  req["max_tokens"] = endpoint.max_tokens;
  req["messages"] = nlohmann::ordered_json::array(
      {{{"role", "system"}, {"content", prompt.system_preamble}},
       {{"role", "user"}, {"content", user_content}}});
  return req.dump();
}

std::string parse_chat_response(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    std::string text;
    for (const auto& part : content) {
      if (part.value("type", "") == "text") text += part.at("text").get<std::string>();
    }
    return text;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed chat completion response: ") + e.what());
  }
}

HttpLvlmClient::HttpLvlmClient(LvlmEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  if (endpoint_.url.empty()) throw ContractError("LVLM endpoint URL is not configured");
}

std::string HttpLvlmClient::complete(const PromptBundle& prompt) {
  net::Headers headers;
  if (!endpoint_.token_env.empty()) {
    if (const char* token = std::getenv(endpoint_.token_env.c_str())) {
      headers.emplace_back("Authorization", std::string("Bearer ") + token);
    }
  }
  const auto res = net::post_json_with_retry(net::split_url(endpoint_.url),
                                             build_chat_request(endpoint_, prompt), headers,
                                             endpoint_.timeout,
                                             {endpoint_.max_attempts, endpoint_.initial_backoff});
  retries_ += static_cast<std::size_t>(res.retries);
  return parse_chat_response(res.response.body);
}

ReplayLvlmClient::ReplayLvlmClient(std::istream& fixture) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(fixture, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      responses_[j.at("id").get<std::string>()] = j.at("response").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FixtureError("replay fixture line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

ReplayLvlmClient ReplayLvlmClient::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open replay fixture: " + path);
  return ReplayLvlmClient(in);
}

std::string ReplayLvlmClient::complete(const PromptBundle& prompt) {
  auto it = responses_.find(prompt.sample_id);
  if (it == responses_.end()) {
    throw FixtureError("replay fixture has no response for sample '" + prompt.sample_id + "'");
  }
  return it->second;
}

}  // namespace csvqa
