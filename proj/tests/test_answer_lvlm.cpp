// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <sstream>

#include "csvqa/answer.hpp"
#include "csvqa/errors.hpp"
#include "csvqa/http.hpp"
#include "csvqa/lvlm_client.hpp"
#include "prompt_fixtures.hpp"
#include "support.hpp"

using namespace csvqa;

namespace {

const std::vector<std::string> kOceans{"the Atlantic Ocean", "the Indian Ocean", "the Pacific Ocean"};

int parsed(std::string_view raw, const std::vector<std::string>& opts = kOceans) {
  return parse_answer(raw, opts).option_index;
}

Sample sample(const std::string& id, int gold, std::optional<std::string> tag = std::nullopt) {
  Sample s;
  s.id = id;
  s.question = "q";
  s.options = {"a", "b", "c"};
  s.gold_index = gold;
  s.subcategory = std::move(tag);
  return s;
}

Prediction pred(const std::string& id, std::optional<int> idx) {
  Prediction p{id, "raw", std::nullopt};
  if (idx) p.answer = ParsedAnswer{*idx, Extraction::Letter, "raw"};
  return p;
}

PromptBundle bundle(const std::string& id) {
  PromptBundle p;
  p.sample_id = id;
  p.system_preamble = "sys";
  p.body = "body";
  return p;
}

}  // namespace

TEST_CASE("letter extraction") {
  CHECK(parse_answer("Answer: B", kOceans).extraction == Extraction::Letter);
  CHECK(parsed("Answer: B") == 1);
  CHECK(parsed("answer:c") == 2);
  CHECK(parsed("The answer is (c) the Pacific Ocean") == 2);
  CHECK(parsed("I first thought (a), but on reflection the answer is (b).") == 1);
  CHECK(parsed("A. the Atlantic Ocean") == 0);
  // Out-of-range letters are ignored.
  CHECK(parsed("Answer: E. Actually Answer: A") == 0);
  CHECK(parsed("Rationale: ... \nAnswer: (C)") == 2);
}

TEST_CASE("text extraction") {
  const auto exact = parse_answer("It must be the Indian Ocean, clearly", kOceans);
  CHECK(exact.option_index == 1);
  CHECK(exact.extraction == Extraction::ExactText);
  const std::vector<std::string> nested{"red", "red wine"};
  CHECK(parse_answer("I would pick red wine", nested).option_index == 1);
  const auto fuzzy = parse_answer("reasoning first\nthe Pacifc Ocaen", kOceans);
  CHECK(fuzzy.option_index == 2);
  CHECK(fuzzy.extraction == Extraction::FuzzyText);
  CHECK_THROWS_AS(parse_answer("I cannot tell", kOceans), UnparsedAnswer);
  CHECK_FALSE(try_parse_answer("I cannot tell", kOceans).has_value());
  CHECK(parse_extraction(extraction_name(Extraction::FuzzyText)) == Extraction::FuzzyText);
}

TEST_CASE("lcs ratio") {
  CHECK(lcs_ratio("abc", "abc") == 1.0);
  CHECK(lcs_ratio("abc", "xyz") == 0.0);
  CHECK(lcs_ratio("abcd", "abed") == doctest::Approx(0.75));
}

TEST_CASE("letters round-trip for every index below 26") {
  std::vector<std::string> opts;
  for (int i = 0; i < 26; ++i) opts.push_back("choice " + std::to_string(i));
  for (std::size_t i = 0; i < 26; ++i) {
    const std::string raw = std::string("Rationale: thinking.\nAnswer: ") + option_letter(i);
    CHECK(parse_answer(raw, opts).option_index == static_cast<int>(i));
    CHECK(parse_answer(std::string("(") + option_letter(i) + ")", opts).option_index ==
          static_cast<int>(i));
  }
}

TEST_CASE("evaluation") {
  const std::vector<Sample> d{sample("1", 0, "x"), sample("2", 1, "x"), sample("3", 2, "y"),
                              sample("4", 0, "y")};
  const auto r = evaluate({pred("1", 0), pred("2", 1), pred("3", 2), pred("4", 1)}, d);
  CHECK(r.overall_accuracy == 0.75);
  CHECK(r.correct == 3);
  CHECK(r.total == 4);
  CHECK(r.per_subcategory.at("x") == std::pair<std::size_t, std::size_t>{2, 2});
  CHECK(r.per_subcategory.at("y") == std::pair<std::size_t, std::size_t>{1, 2});

  const auto none = evaluate({pred("1", {}), pred("2", {}), pred("3", {}), pred("4", {})}, d);
  CHECK(none.overall_accuracy == 0.0);
  CHECK(none.unparsed_count == 4);

  CHECK_THROWS_AS(evaluate({pred("9", 0)}, d), ContractError);
  CHECK_THROWS_AS(evaluate({pred("1", 0), pred("1", 0)}, d), ContractError);
  auto no_gold = d;
  no_gold[0].gold_index.reset();
  CHECK_THROWS_AS(evaluate({pred("1", 0)}, no_gold), ContractError);
}

TEST_CASE("replay client") {
  std::istringstream fixture(R"({"id":"s1","response":"Answer: B"})"
                             "\n");
  ReplayLvlmClient client(fixture);
  const auto before = net::request_count();
  CHECK(query_lvlm(client, bundle("s1")) == "Answer: B");
  CHECK(net::request_count() == before);
  try {
    client.complete(bundle("s2"));
    FAIL("expected a fixture error");
  } catch (const FixtureError& e) {
    CHECK(std::string(e.what()).find("s2") != std::string::npos);
  }
}

TEST_CASE("chat request shape") {
  testing::ScratchDir dir("chat");
  const auto img = dir / "pic.png";
  testing::spit(img, "PNGDATA");
  LvlmEndpoint ep;
  ep.model = "vlm-test";
  auto p = bundle("s1");
  p.image_ref = img;
  const auto j = nlohmann::json::parse(build_chat_request(ep, p));
  CHECK(j.at("model") == "vlm-test");
  CHECK(j.at("messages").at(0).at("content") == "sys");
  const auto& user = j.at("messages").at(1).at("content");
  CHECK(user.at(0).at("text") == "body");
  CHECK(user.at(1).at("image_url").at("url") == "data:image/png;base64," + base64_encode("PNGDATA"));
  p.image_ref = "not/a/file.png";
  const auto j2 = nlohmann::json::parse(build_chat_request(ep, p));
  CHECK(j2.at("messages").at(1).at("content").size() == 1);

  CHECK(parse_chat_response(R"({"choices":[{"message":{"content":"Answer: A"}}]})") == "Answer: A");
  CHECK_THROWS_AS(parse_chat_response("{}"), ProtocolError);
}

TEST_CASE("http client retries and timeouts") {
  testing::StubServer stub;
  std::atomic<int> calls{0};
  std::atomic<int> too_many{0};
  std::string auth;
  stub.server().Post("/v1/chat", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    auth = req.get_header_value("Authorization");
    if (too_many > 0) {
      --too_many;
      res.status = 429;
      return;
    }
    res.set_content(R"({"choices":[{"message":{"content":"Answer: C"}}]})", "application/json");
  });
  stub.server().Post("/slow", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    res.set_content("{}", "application/json");
  });
  stub.start();

  LvlmEndpoint ep;
  ep.url = stub.url() + "/v1/chat";
  ep.model = "m";
  ep.initial_backoff = std::chrono::milliseconds(5);
  ep.token_env = "CSVQA_TEST_TOKEN";
  ::setenv("CSVQA_TEST_TOKEN", "secret-token", 1);

  SUBCASE("429 then 200") {
    too_many = 1;
    HttpLvlmClient client(ep);
    CHECK(client.complete(bundle("s1")) == "Answer: C");
    CHECK(client.retries() == 1);
    CHECK(calls == 2);
    CHECK(auth == "Bearer secret-token");
  }
  SUBCASE("timeout exhausts the configured attempts") {
    ep.url = stub.url() + "/slow";
    ep.timeout = std::chrono::milliseconds(100);
    ep.max_attempts = 3;
    HttpLvlmClient client(ep);
    CHECK_THROWS_AS(client.complete(bundle("s1")), TransportError);
    CHECK(calls == 3);
  }
  SUBCASE("non-transient status fails at once") {
    ep.url = stub.url() + "/missing";
    HttpLvlmClient client(ep);
    CHECK_THROWS_AS(client.complete(bundle("s1")), TransportError);
  }
  ::unsetenv("CSVQA_TEST_TOKEN");
}
