// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal JSON-over-HTTP transport shared by the embedding and LVLM clients.

#ifndef CSVQA_HTTP_HPP
#define CSVQA_HTTP_HPP

#include <chrono>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace csvqa::net {

struct Response {
  int status = -1;  // -1 when no HTTP response was received
  std::string body;
  std::string error;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{200};
};

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;    // always starts with '/'
};

/// Splits "http://host:8080/v1/chat" into origin and path.
Url split_url(const std::string& url);

using Headers = std::vector<std::pair<std::string, std::string>>;

/// Single attempt POST with a JSON body.
Response post_json(const Url& url, const std::string& body, const Headers& headers,
                   std::chrono::milliseconds timeout);
Response get(const Url& url, std::chrono::milliseconds timeout);

struct RetryResult {
  Response response;
  int retries = 0;
};

/// POST with exponential backoff on transient failures (no response, 429,
/// 5xx). Throws TransportError when attempts run out or on other non-2xx.
RetryResult post_json_with_retry(const Url& url, const std::string& body, const Headers& headers,
                                 std::chrono::milliseconds timeout, const RetryPolicy& policy);

/// Number of HTTP requests issued by this process so far.
std::size_t request_count();

}  // namespace csvqa::net

#endif  // CSVQA_HTTP_HPP
