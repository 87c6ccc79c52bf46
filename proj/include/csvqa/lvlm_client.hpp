// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Clients for the external vision-language model: a chat-completion HTTP
// client and an offline replay client keyed by sample id.

#ifndef CSVQA_LVLM_CLIENT_HPP
#define CSVQA_LVLM_CLIENT_HPP

#include <atomic>
#include <chrono>
#include <iosfwd>
#include <string>
#include <unordered_map>

#include "csvqa/prompt.hpp"

namespace csvqa {

class LvlmClient {
 public:
  virtual ~LvlmClient() = default;
  /// Raw response text for one prompt. Must be safe to call concurrently.
  virtual std::string complete(const PromptBundle& prompt) = 0;
};

struct LvlmEndpoint {
  std::string url;        // full chat-completions URL
  std::string model;
  std::string token_env;  // name of the environment variable holding the bearer token
  std::chrono::milliseconds timeout{60000};
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  int max_tokens = 512;
};

/// JSON request body: system preamble, user body, and the image as a data URL
/// when image_ref names a readable file.
std::string build_chat_request(const LvlmEndpoint& endpoint, const PromptBundle& prompt);

/// Extracts choices[0].message.content; throws ProtocolError.
std::string parse_chat_response(const std::string& body);

class HttpLvlmClient final : public LvlmClient {
 public:
  explicit HttpLvlmClient(LvlmEndpoint endpoint);
  std::string complete(const PromptBundle& prompt) override;
  std::size_t retries() const { return retries_.load(); }

 private:
  LvlmEndpoint endpoint_;
  std::atomic<std::size_t> retries_{0};
};

/// Replays canned responses from NDJSON {"id","response"} lines.
class ReplayLvlmClient final : public LvlmClient {
 public:
  explicit ReplayLvlmClient(std::istream& fixture);
  static ReplayLvlmClient from_file(const std::string& path);

  /// Throws FixtureError naming the sample id on a miss.
  std::string complete(const PromptBundle& prompt) override;
  std::size_t size() const { return responses_.size(); }

 private:
  std::unordered_map<std::string, std::string> responses_;
};

inline std::string query_lvlm(LvlmClient& client, const PromptBundle& prompt) {
  return client.complete(prompt);
}

}  // namespace csvqa

#endif  // CSVQA_LVLM_CLIENT_HPP
