// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/http.hpp"

#include <httplib.h>

#include <atomic>
#include <iostream>
#include <thread>

#include "csvqa/errors.hpp"

namespace csvqa::net {

namespace {

std::atomic<std::size_t> g_requests{0};

bool transient(int status) { return status < 0 || status == 429 || status >= 500; }

httplib::Client make_client(const Url& url, std::chrono::milliseconds timeout) {
  httplib::Client cli(url.origin);
  const auto secs = timeout.count() / 1000;
  const auto usecs = (timeout.count() % 1000) * 1000;
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  return cli;
}

Response to_response(const httplib::Result& res) {
  Response out;
  if (!res) {
    out.error = httplib::to_string(res.error());
    return out;
  }
  out.status = res->status;
  out.body = res->body;
  return out;
}

}  // namespace

Url split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ContractError("URL lacks a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

Response post_json(const Url& url, const std::string& body, const Headers& headers,
                   std::chrono::milliseconds timeout) {
  auto cli = make_client(url, timeout);
  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  ++g_requests;
  return to_response(cli.Post(url.path, h, body, "application/json"));
}

Response get(const Url& url, std::chrono::milliseconds timeout) {
  auto cli = make_client(url, timeout);
  ++g_requests;
  return to_response(cli.Get(url.path));
}

RetryResult post_json_with_retry(const Url& url, const std::string& body, const Headers& headers,
                                 std::chrono::milliseconds timeout, const RetryPolicy& policy) {
  RetryResult out;
  auto backoff = policy.initial_backoff;
  const int attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1;; ++attempt) {
    out.response = post_json(url, body, headers, timeout);
    const int status = out.response.status;
    if (status >= 200 && status < 300) return out;
    const std::string what =
        status < 0 ? "no response (" + out.response.error + ")" : "HTTP " + std::to_string(status);
    if (!transient(status) || attempt >= attempts) {
      throw TransportError("POST " + url.origin + url.path + " failed after " +
                           std::to_string(attempt) + " attempt(s): " + what);
    }
    ++out.retries;
    std::cerr << "csvqa: " << what << " from " << url.origin << url.path << ", retry "
              << out.retries << "/" << attempts - 1 << "\n";
    std::this_thread::sleep_for(backoff);
    backoff *= 2;
  }
}

std::size_t request_count() { return g_requests.load(); }

}  // namespace csvqa::net
