// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Shared test helpers: scratch directories, a stub HTTP server, random
// synthetic data and the planted GCN task.

#ifndef CSVQA_TESTS_SUPPORT_HPP
#define CSVQA_TESTS_SUPPORT_HPP

// Eigen must precede httplib: <resolv.h> defines a _res macro.
#include <Eigen/Dense>

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "csvqa/graph_gcn.hpp"
#include "csvqa/kg_store.hpp"
#include "csvqa/retrieval.hpp"

#ifndef CSVQA_TEST_DATA_DIR
#define CSVQA_TEST_DATA_DIR "tests/data"
#endif

namespace csvqa::testing {

inline std::string data_path(const std::string& name) {
  return std::string(CSVQA_TEST_DATA_DIR) + "/" + name;
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("csvqa-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// httplib server on an ephemeral loopback port, running on its own thread.
class StubServer {
 public:
  StubServer() = default;
  ~StubServer() { stop(); }

  httplib::Server& server() { return server_; }

  void start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, Eigen::Index dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] = n(rng);
  return v;
}

/// Random store of `n` triplets with distinct head/tail texts.
inline KnowledgeStore random_store(std::mt19937_64& rng, std::size_t n) {
  std::vector<KnowledgeTriplet> ts;
  ts.reserve(n);
  std::uniform_int_distribution<std::size_t> rel(0, kRelationCount - 1);
  for (std::size_t i = 0; i < n; ++i) {
    ts.push_back({static_cast<std::int64_t>(i), "h" + std::to_string(i),
                  all_relations()[rel(rng)], "t" + std::to_string(i)});
  }
  return KnowledgeStore(std::move(ts));
}

inline TripletIndex random_index(std::mt19937_64& rng, const KnowledgeStore& store,
                                 Eigen::Index dim) {
  Eigen::MatrixXd heads(static_cast<Eigen::Index>(store.size()), dim);
  Eigen::MatrixXd tails(static_cast<Eigen::Index>(store.size()), dim);
  for (Eigen::Index r = 0; r < heads.rows(); ++r) {
    heads.row(r) = random_vector(rng, dim).transpose();
    tails.row(r) = random_vector(rng, dim).transpose();
  }
  return TripletIndex(store, std::move(heads), std::move(tails));
}

/// Full sort over every triplet; independent of the partial-sort path.
inline std::vector<std::int64_t> naive_top_k(const Eigen::VectorXd& f, const TripletIndex& index,
                                             std::size_t k, SimilarityMetric m) {
  std::vector<std::pair<double, std::int64_t>> all;
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    double sh = 0.0;
    double st = 0.0;
    const Eigen::VectorXd h = index.heads().row(ri).transpose();
    const Eigen::VectorXd t = index.tails().row(ri).transpose();
    switch (m) {
      case SimilarityMetric::Cosine:
        sh = f.dot(h) / (f.norm() * h.norm());
        st = f.dot(t) / (f.norm() * t.norm());
        break;
      case SimilarityMetric::Manhattan:
        sh = -(f - h).cwiseAbs().sum();
        st = -(f - t).cwiseAbs().sum();
        break;
      case SimilarityMetric::Euclidean:
        sh = -std::sqrt((f - h).squaredNorm());
        st = -std::sqrt((f - t).squaredNorm());
        break;
    }
    all.emplace_back(std::max(sh, st), index.id(r));
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::int64_t> ids;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) ids.push_back(all[i].second);
  return ids;
}

/// Power iteration for the spectral radius of a symmetric matrix.
inline double spectral_radius(const Eigen::MatrixXd& m, std::mt19937_64& rng, int iters = 2000) {
  Eigen::VectorXd v = random_vector(rng, m.rows()).cwiseAbs() + Eigen::VectorXd::Constant(m.rows(), 0.1);
  v.normalize();
  double lambda = 0.0;
  for (int i = 0; i < iters; ++i) {
    Eigen::VectorXd w = m * v;
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    lambda = n;
    v = w / n;
  }
  return lambda;
}

/// Random symmetric nonnegative adjacency with zero diagonal and some zeros.
inline Eigen::MatrixXd random_adjacency(std::mt19937_64& rng, Eigen::Index n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double w = u(rng) < 0.3 ? 0.0 : u(rng);
      a(i, j) = w;
      a(j, i) = w;
    }
  }
  return a;
}

inline constexpr int kPlantedOptions = 4;
inline constexpr Eigen::Index kPlantedDim = 8;

/// Planted task: the gold option g is encoded by which commonsense node is
/// strongly wired to the input triangle. Node 3 + j carries the fixed
/// signature e_j; only node 3 + g gets heavy edges, the rest stay faint.
inline std::vector<TrainingExample> planted_task(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, kPlantedOptions - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<TrainingExample> out;
  const Eigen::Index n = 3 + kPlantedOptions;
  for (std::size_t s = 0; s < count; ++s) {
    const int gold = pick(rng);
    Eigen::MatrixXd x(n, kPlantedDim);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < kPlantedDim; ++c) x(r, c) = noise(rng);
    }
    for (Eigen::Index r = 0; r < 3; ++r) x(r, kPlantedDim - 1) += 1.0;
    for (int j = 0; j < kPlantedOptions; ++j) x(3 + j, j) += 1.0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < 3; ++i) {
      for (Eigen::Index j = i + 1; j < 3; ++j) a(i, j) = a(j, i) = 1.0;
      for (int j = 0; j < kPlantedOptions; ++j) {
        const double w = j == gold ? 0.8 + 0.2 * u(rng) : 0.05 * u(rng);
        a(i, 3 + j) = a(3 + j, i) = w;
      }
    }
    out.push_back({MultimodalGraph::from_adjacency(std::move(x), std::move(a)), gold,
                   kPlantedOptions});
  }
  return out;
}

/// Mean of the three input rows of Â X: one linear propagation step.
inline Eigen::VectorXd propagated_inputs(const MultimodalGraph& g) {
  return (g.normalized * g.features).topRows(3).colwise().mean().transpose();
}

/// Multinomial logistic regression by full-batch gradient descent; returns
/// training accuracy. Used only to confirm a synthetic task is separable.
inline double logistic_regression_accuracy(const std::vector<TrainingExample>& data,
                                           int classes, int steps = 2000, double lr = 0.5) {
  const auto d = propagated_inputs(data.front().graph).size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(data.size()), d + 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) << propagated_inputs(data[i].graph).transpose(), 1.0;
  }
  // Standardize feature columns so one step size fits all.
  for (Eigen::Index c = 0; c < d; ++c) {
    const double mu = x.col(c).mean();
    const double sd = std::sqrt((x.col(c).array() - mu).square().mean());
    x.col(c) = (x.col(c).array() - mu) / (sd > 0 ? sd : 1.0);
  }
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d + 1, classes);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), classes);
  for (std::size_t i = 0; i < data.size(); ++i) y(static_cast<Eigen::Index>(i), data[i].gold) = 1.0;
  for (int s = 0; s < steps; ++s) {
    Eigen::MatrixXd z = x * w;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      z.row(r).array() -= z.row(r).maxCoeff();
      z.row(r) = z.row(r).array().exp().matrix();
      z.row(r) /= z.row(r).sum();
    }
    w -= lr * x.transpose() * (z - y) / static_cast<double>(x.rows());
  }
  const Eigen::MatrixXd z = x * w;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Eigen::Index arg = 0;
    z.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    correct += static_cast<int>(arg) == data[i].gold;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Loop-level forward pass in Eval mode, written without Eigen products.
inline std::vector<double> naive_forward(const GcnModel& m, const MultimodalGraph& g, int valid) {
  using P = GcnParams<double>;
  const auto n = g.nodes();
  auto propagate = [&](const std::vector<std::vector<double>>& h, const Eigen::MatrixXd& w,
                       const Eigen::MatrixXd& b) {
    const auto in = w.rows();
    const auto out = w.cols();
    std::vector<std::vector<double>> ah(static_cast<std::size_t>(n), std::vector<double>(in, 0.0));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index c = 0; c < in; ++c) ah[i][c] += g.normalized(i, j) * h[j][c];
      }
    }
    std::vector<std::vector<double>> z(static_cast<std::size_t>(n), std::vector<double>(out, 0.0));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index o = 0; o < out; ++o) {
        double s = b(o, 0);
        for (Eigen::Index c = 0; c < in; ++c) s += ah[i][c] * w(c, o);
        z[i][o] = s > 0 ? s : 0.0;
      }
    }
    return z;
  };
  std::vector<std::vector<double>> h0(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < g.dim(); ++c) h0[i].push_back(g.features(i, c));
  }
  const auto h1 = propagate(h0, m.params[P::W0], m.params[P::B0]);
  const auto h2 = propagate(h1, m.params[P::W1], m.params[P::B1]);
  std::vector<double> pooled(h2[0].size(), 0.0);
  for (const auto& row : h2) {
    for (std::size_t c = 0; c < row.size(); ++c) pooled[c] += row[c] / static_cast<double>(n);
  }
  std::vector<double> logits(static_cast<std::size_t>(valid));
  for (int o = 0; o < valid; ++o) {
    double s = m.params[P::BOut](o, 0);
    for (std::size_t c = 0; c < pooled.size(); ++c) s += pooled[c] * m.params[P::WOut](c, o);
    logits[o] = s;
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0;
  for (auto& l : logits) total += (l = std::exp(l - top));
  std::vector<double> probs(static_cast<std::size_t>(m.num_options()), 0.0);
  for (int o = 0; o < valid; ++o) probs[o] = logits[o] / total;
  return probs;
}

/// Random model with non-trivial biases so the ReLUs see both signs.
inline GcnModel random_model(std::mt19937_64& rng, const GcnShape& shape) {
  auto m = init_gcn(shape, rng(), 0.0);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& blk : m.params.blocks) {
    for (Eigen::Index i = 0; i < blk.size(); ++i) blk.data()[i] += n(rng);
  }
  return m;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;
};

/// Central differences against gcn_backward on one random (graph, model)
/// instance. Coordinates whose perturbation flips any ReLU are skipped, since
/// the loss is not differentiable across the kink.
/// `sample` < 0 checks every coordinate; otherwise that many per block.
inline GradCheck gradient_check(std::mt19937_64& rng, Eigen::Index nodes, const GcnShape& shape,
                                int sample = -1, double step = 1e-5) {
  using P = GcnParams<double>;
  const int valid = static_cast<int>(shape.num_options);
  Eigen::MatrixXd x(nodes, shape.input_dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = random_vector(rng, 1)[0];
  const auto g = MultimodalGraph::from_adjacency(x, random_adjacency(rng, nodes));
  auto model = random_model(rng, shape);
  std::uniform_int_distribution<int> pick_gold(0, valid - 1);
  const int gold = pick_gold(rng);
  const auto base = gcn_forward<double>(g.normalized, g.features, model, valid, Mode::Eval);
  const auto grad = gcn_backward(base.cache, model, gold);
  const auto on1 = (base.cache.z1.array() > 0).eval();
  const auto on2 = (base.cache.z2.array() > 0).eval();
  // Loss at a perturbed model, or nullopt if the activation pattern changed.
  auto loss = [&](const GcnModel& mm) -> std::optional<double> {
    const auto r = gcn_forward<double>(g.normalized, g.features, mm, valid, Mode::Eval);
    if (((r.cache.z1.array() > 0) != on1).any() || ((r.cache.z2.array() > 0) != on2).any()) {
      return std::nullopt;
    }
    return cross_entropy(r.cache, gold);
  };
  GradCheck out;
  for (std::size_t b = 0; b < P::kCount; ++b) {
    auto& blk = model.params.blocks[b];
    std::vector<Eigen::Index> coords;
    if (sample < 0 || sample >= blk.size()) {
      for (Eigen::Index i = 0; i < blk.size(); ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<Eigen::Index> pick(0, blk.size() - 1);
      for (int s = 0; s < sample; ++s) coords.push_back(pick(rng));
    }
    for (auto i : coords) {
      const double orig = blk.data()[i];
      blk.data()[i] = orig + step;
      const auto up = loss(model);
      blk.data()[i] = orig - step;
      const auto down = loss(model);
      blk.data()[i] = orig;
      if (!up || !down) {
        ++out.skipped;
        continue;
      }
      const double numeric = (*up - *down) / (2 * step);
      const double analytic = grad.blocks[b].data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
      ++out.coordinates;
    }
  }
  return out;
}

}  // namespace csvqa::testing

#endif  // CSVQA_TESTS_SUPPORT_HPP
