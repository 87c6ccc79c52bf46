// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <random>

#include "csvqa/errors.hpp"
#include "csvqa/graph_gcn.hpp"
#include "support.hpp"

using namespace csvqa;
using P = GcnParams<double>;

namespace {

EmbeddingVector axis(Eigen::Index dim, Eigen::Index i) { return EmbeddingVector::Unit(dim, i); }

/// Fixed graph for golden comparisons; values come from a closed form so no
/// library RNG distribution is involved.
MultimodalGraph fixture_graph() {
  const Eigen::Index d = 8;
  auto row = [&](int r) {
    EmbeddingVector v(d);
    for (Eigen::Index c = 0; c < d; ++c) v[c] = std::sin(0.7 * r + 1.3 * static_cast<double>(c)) + 0.1 * r;
    return v;
  };
  std::vector<CommonsenseNode> cs;
  for (int i = 0; i < 6; ++i) cs.push_back({"s" + std::to_string(i), row(3 + i)});
  return build_graph({row(0), row(1), row(2)}, cs);
}

}  // namespace

TEST_CASE("normalized adjacency examples") {
  Eigen::MatrixXd a(2, 2);
  a << 0, 1, 1, 0;
  const auto n = normalize_adjacency(a);
  CHECK((n.array() - 0.5).abs().maxCoeff() < 1e-15);
  for (Eigen::Index k : {1, 3, 9}) {
    CHECK(normalize_adjacency(Eigen::MatrixXd::Zero(k, k)).isApprox(Eigen::MatrixXd::Identity(k, k)));
  }
  Eigen::MatrixXd asym(2, 2);
  asym << 0, 1, 0.5, 0;
  CHECK_THROWS_AS(normalize_adjacency(asym), ContractError);
  Eigen::MatrixXd diag(2, 2);
  diag << 1, 0, 0, 0;
  CHECK_THROWS_AS(normalize_adjacency(diag), ContractError);
  CHECK_THROWS_AS(normalize_adjacency(Eigen::MatrixXd::Zero(2, 3)), ContractError);
  Eigen::MatrixXd neg(2, 2);
  neg << 0, -1, -1, 0;
  CHECK_THROWS_AS(normalize_adjacency(neg), ContractError);
}

TEST_CASE("normalized adjacency properties on random graphs") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    const auto n = static_cast<Eigen::Index>(2 + t % 15);
    const auto norm = normalize_adjacency(testing::random_adjacency(rng, n));
    CHECK((norm - norm.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(testing::spectral_radius(norm, rng) <= 1.0 + 1e-9);
    // Ã has eigenvalue 1 with eigenvector D^1/2 1, so the radius is exactly 1.
    CHECK(testing::spectral_radius(norm, rng) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("graph construction") {
  const Eigen::Index d = 4;
  SUBCASE("no commonsense nodes gives the input triangle") {
    const auto g = build_graph({axis(d, 0), EmbeddingVector::Ones(d), axis(d, 0) + axis(d, 1)}, {});
    CHECK(g.nodes() == 3);
    int nonzero_pairs = 0;
    for (Eigen::Index i = 0; i < 3; ++i) {
      for (Eigen::Index j = i + 1; j < 3; ++j) nonzero_pairs += g.adjacency(i, j) > 0;
    }
    CHECK(nonzero_pairs == 3);
  }
  SUBCASE("orthogonal embeddings leave A = 0 and Ã = I") {
    const auto g = build_graph({axis(d, 0), axis(d, 1), axis(d, 2)}, std::vector<CommonsenseNode>{{"x", axis(d, 3)}});
    CHECK(g.adjacency.isZero());
    CHECK(g.normalized.isApprox(Eigen::MatrixXd::Identity(4, 4)));
  }
  SUBCASE("negative cosine is clamped") {
    const auto g = build_graph({axis(d, 0), EmbeddingVector(-axis(d, 0)), axis(d, 1)}, {});
    CHECK(g.adjacency(0, 1) == 0.0);
  }
  SUBCASE("topologies") {
    std::vector<CommonsenseNode> cs{{"a", EmbeddingVector::Ones(d)}, {"b", EmbeddingVector::Ones(d)}};
    const SampleEmbeddings s{EmbeddingVector::Ones(d), EmbeddingVector::Ones(d), EmbeddingVector::Ones(d)};
    const auto hub = build_graph(s, cs, Topology::InputHub);
    const auto full = build_graph(s, cs, Topology::FullyConnected);
    CHECK(hub.adjacency(3, 4) == 0.0);
    CHECK(full.adjacency(3, 4) == doctest::Approx(1.0));
    CHECK(hub.adjacency(0, 4) == doctest::Approx(1.0));
    CHECK(hub.sentences == std::vector<std::string>{"a", "b"});
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(build_graph({axis(d, 0), axis(3, 0), axis(d, 1)}, {}), ContractError);
  }
}

TEST_CASE("forward shapes and softmax") {
  const auto g = fixture_graph();
  REQUIRE(g.nodes() == 9);
  const auto m = init_gcn({8, 256, 512, 5}, 1);
  const auto r = gcn_forward<double>(g.normalized, g.features, m, 5, Mode::Eval);
  CHECK(r.cache.h1.rows() == 9);
  CHECK(r.cache.h1.cols() == 256);
  CHECK(r.cache.h2.cols() == 512);
  CHECK(r.cache.pooled.size() == 512);
  CHECK(r.probs.size() == 5);
  CHECK(std::abs(r.probs.sum() - 1.0) < 1e-9);
  CHECK((r.probs.array() >= 0).all());

  const auto c = score_sample(m, g, 3);
  CHECK(c.probs[3] == 0.0);
  CHECK(c.probs[4] == 0.0);
  CHECK(std::abs(c.probs[0] + c.probs[1] + c.probs[2] - 1.0) < 1e-9);
  CHECK(score_sample(m, g, 3).probs == c.probs);

  CHECK_THROWS_AS(gcn_forward<double>(g.normalized, g.features, m, 6, Mode::Eval), ContractError);
  CHECK_THROWS_AS(gcn_forward<double>(g.normalized, g.features, m, 3, Mode::Train), ContractError);
}

TEST_CASE("zero features and biases give uniform probabilities") {
  std::mt19937_64 rng(1);
  const auto g =
      MultimodalGraph::from_adjacency(Eigen::MatrixXd::Zero(5, 8), testing::random_adjacency(rng, 5));
  const auto m = init_gcn({8, 16, 16, 4}, 2);
  const auto r = gcn_forward<double>(g.normalized, g.features, m, 4, Mode::Eval);
  for (int i = 0; i < 4; ++i) CHECK(r.probs[i] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(cross_entropy(r.cache, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(std::abs(cross_entropy(r.cache, 2) - 1.386294) < 1e-6);
}

TEST_CASE("saturated cross-entropy has zero logit gradient") {
  const auto g = fixture_graph();
  auto m = init_gcn({8, 16, 16, 3}, 3);
  m.params[P::WOut].setZero();
  m.params[P::BOut] << 0.0, -1e6, -1e6;
  const auto r = gcn_forward<double>(g.normalized, g.features, m, 3, Mode::Eval);
  CHECK(r.probs[0] == 1.0);
  const auto grad = gcn_backward(r.cache, m, 0);
  CHECK(grad[P::BOut].isZero(0.0));
  CHECK(grad[P::WOut].isZero(0.0));
  CHECK(cross_entropy(r.cache, 0) == 0.0);

  ForwardCache<double> empty;
  CHECK_THROWS_AS(gcn_backward(empty, m, 0), ContractError);
  CHECK_THROWS_AS(cross_entropy(empty, 0), ContractError);
}

TEST_CASE("gradients match central differences") {
  std::mt19937_64 rng(99);
  SUBCASE("small widths, every coordinate") {
    for (int t = 0; t < 10; ++t) {
      const auto r = testing::gradient_check(rng, 4, {5, 6, 7, 4});
      CHECK(r.max_rel_error < 1e-6);
      CHECK(r.coordinates > r.skipped);
    }
  }
  SUBCASE("default widths, sampled coordinates") {
    const auto r = testing::gradient_check(rng, 9, {8, 256, 512, 4}, 40);
    CHECK(r.max_rel_error < 1e-6);
    CHECK(r.coordinates > 100);
  }
}

TEST_CASE("dropout masks are reused by the backward pass") {
  const auto g = fixture_graph();
  const auto m = init_gcn({8, 12, 10, 3}, 5, 0.4);
  std::mt19937_64 a(17);
  std::mt19937_64 b(17);
  const auto r1 = gcn_forward<double>(g.normalized, g.features, m, 3, Mode::Train, &a);
  const auto r2 = gcn_forward<double>(g.normalized, g.features, m, 3, Mode::Train, &b);
  CHECK(r1.probs == r2.probs);
  CHECK(r1.cache.mask1.size() == 9 * 12);
  // Gradient of W_out rows for dropped-out hidden units in every node is zero.
  const auto grad = gcn_backward(r1.cache, m, 1);
  for (Eigen::Index c = 0; c < r1.cache.h2.cols(); ++c) {
    if (r1.cache.h2.col(c).isZero(0.0)) CHECK(grad[P::WOut].row(c).isZero(0.0));
  }
}

TEST_CASE("pooling is invariant to commonsense node order") {
  std::mt19937_64 rng(21);
  const auto m = init_gcn({8, 32, 32, 4}, 6);
  for (int t = 0; t < 10; ++t) {
    std::vector<CommonsenseNode> cs;
    for (int i = 0; i < 6; ++i) cs.push_back({"s", testing::random_vector(rng, 8)});
    const SampleEmbeddings s{testing::random_vector(rng, 8), testing::random_vector(rng, 8),
                             testing::random_vector(rng, 8)};
    const auto g = build_graph(s, cs);
    std::vector<CommonsenseNode> shuffled(cs.rbegin(), cs.rend());
    std::swap(shuffled[1], shuffled[4]);
    const auto h = build_graph(s, shuffled);
    const auto ra = gcn_forward<double>(g.normalized, g.features, m, 4, Mode::Eval);
    const auto rb = gcn_forward<double>(h.normalized, h.features, m, 4, Mode::Eval);
    CHECK((ra.cache.pooled - rb.cache.pooled).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((ra.probs - rb.probs).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("score matches the loop-level forward and the committed golden") {
  const auto g = fixture_graph();
  const auto m = init_gcn({8, 256, 512, 4}, 42);
  const auto c = score_sample(m, g, 4);
  const auto naive = testing::naive_forward(m, g, 4);
  if (std::getenv("CSVQA_UPDATE_GOLDENS") != nullptr) {
    testing::spit(testing::data_path("gcn_golden.json"), nlohmann::json{{"probs", naive}}.dump() + "\n");
  }
  const auto golden = nlohmann::json::parse(testing::slurp(testing::data_path("gcn_golden.json")));
  const auto expected = golden.at("probs").get<std::vector<double>>();
  REQUIRE(expected.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(c.probs[i] - naive[i]) < 1e-12);
    CHECK(std::abs(c.probs[i] - expected[i]) < 1e-9);
  }
}

TEST_CASE("early stopping arithmetic") {
  EarlyStopping es(2);
  const double seq[] = {0.5, 0.6, 0.6, 0.6};
  int stopped_at = 0;
  for (double v : seq) {
    es.update(v);
    if (es.should_stop()) {
      stopped_at = es.epochs_seen();
      break;
    }
  }
  CHECK(stopped_at == 4);
  CHECK(es.best_epoch() == 2);
  CHECK(es.best() == 0.6);
  CHECK_THROWS_AS(EarlyStopping(0), ContractError);
}

TEST_CASE("training contracts") {
  CHECK_THROWS_AS(train_gcn({}, TrainConfig{}), ContractError);
  auto data = testing::planted_task(4, 1);
  data[0].gold = 7;
  CHECK_THROWS_AS(train_gcn(data, TrainConfig{}), ContractError);
}

TEST_CASE("loss descends on a fixed batch without dropout") {
  const auto data = testing::planted_task(32, 4);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.dropout_rate = 0.0;
  cfg.hidden0 = 32;
  cfg.hidden1 = 32;
  cfg.batch_size = 64;
  cfg.validation_fraction = 0.0;
  cfg.max_epochs = 5;
  cfg.patience = 100;
  const auto r = train_gcn(data, cfg);
  REQUIRE(r.history.size() == 5);
  for (std::size_t i = 1; i < r.history.size(); ++i) {
    CHECK(r.history[i].train_loss < r.history[i - 1].train_loss);
  }
}

TEST_CASE("planted task: separable, learnable, deterministic") {
  const auto data = testing::planted_task(200, 2024);
  CHECK(testing::logistic_regression_accuracy(data, testing::kPlantedOptions) >= 0.95);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.seed = 7;
  const auto a = train_gcn(data, cfg);
  double best_train = 0.0;
  for (const auto& e : a.history) best_train = std::max(best_train, e.train_accuracy);
  CHECK(best_train >= 0.9);
  CHECK(a.history.size() <= 30);
  CHECK(a.train_size == 180);
  CHECK(a.validation_size == 20);
  const auto b = train_gcn(data, cfg);
  CHECK(save_checkpoint(a.model) == save_checkpoint(b.model));
}

TEST_CASE("checkpoint round trip and failures") {
  const auto m = init_gcn({8, 16, 12, 4}, 9, 0.25);
  const auto bytes = save_checkpoint(m);
  CHECK(bytes.substr(0, 4) == "MGCN");
  const auto back = load_checkpoint(bytes);
  CHECK(back.dropout_rate == 0.25);
  for (std::size_t b = 0; b < P::kCount; ++b) {
    CHECK((back.params.blocks[b].array() == m.params.blocks[b].cast<float>().cast<double>().array()).all());
  }
  CHECK(save_checkpoint(back) == bytes);
  CHECK_THROWS_AS(load_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(load_checkpoint(bytes.substr(0, 20)), FormatError);
  CHECK_THROWS_AS(load_checkpoint(bytes + "x"), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_AS(load_checkpoint(bad_version), FormatError);

  const auto g = build_graph({axis(6, 0), axis(6, 1), axis(6, 2)}, {});
  try {
    score_sample(back, g, 4);
    FAIL("expected a contract error");
  } catch (const ContractError& e) {
    const std::string what = e.what();
    CHECK(what.find('6') != std::string::npos);
    CHECK(what.find('8') != std::string::npos);
  }
}
