// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Heterogeneous sample graph and the two-layer GCN confidence model.
//
// Propagation per layer is H' = relu(Â H W + b) with Â the symmetric
// normalization of A + I; node states after the second layer are averaged
// and mapped to option logits. The model and its passes are templated on the
// scalar so the same code runs the float checkpoint path and the double
// finite-difference checks.

#ifndef CSVQA_GRAPH_GCN_HPP
#define CSVQA_GRAPH_GCN_HPP

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csvqa/embed_io.hpp"
#include "csvqa/errors.hpp"

namespace csvqa {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr double kSymmetryTolerance = 1e-9;

/// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I.
template <typename Derived>
MatrixX<typename Derived::Scalar> normalize_adjacency(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  if (a.rows() != a.cols()) throw ContractError("adjacency must be square");
  if (!a.allFinite()) throw ContractError("adjacency has non-finite entries");
  const auto n = a.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a(i, i) != Scalar(0)) throw ContractError("adjacency diagonal must be zero");
    for (Eigen::Index j = 0; j < n; ++j) {
      if (a(i, j) < Scalar(0)) throw ContractError("adjacency entries must be nonnegative");
      if (std::abs(a(i, j) - a(j, i)) > Scalar(kSymmetryTolerance)) {
        throw ContractError("adjacency is not symmetric at (" + std::to_string(i) + ", " +
                            std::to_string(j) + ")");
      }
    }
  }
  const MatrixX<Scalar> with_loops = a + MatrixX<Scalar>::Identity(n, n);
  const VectorX<Scalar> inv_sqrt_deg = with_loops.rowwise().sum().array().rsqrt().matrix();
  MatrixX<Scalar> out = inv_sqrt_deg.asDiagonal() * with_loops * inv_sqrt_deg.asDiagonal();
  // Exact symmetry regardless of summation order.
  return (out + out.transpose()) / Scalar(2);
}

enum class Topology {
  InputHub,        // I-Q-C triangle, every commonsense node linked to all three inputs
  FullyConnected,  // every pair of nodes
};

struct SampleEmbeddings {
  EmbeddingVector image;
  EmbeddingVector question;
  EmbeddingVector caption;
};

struct CommonsenseNode {
  std::string sentence;
  EmbeddingVector embedding;
};

/// Rows 0..2 are image, question, caption; rows 3.. are commonsense sentences.
struct MultimodalGraph {
  Eigen::MatrixXd features;
  Eigen::MatrixXd adjacency;
  Eigen::MatrixXd normalized;
  std::vector<std::string> sentences;

  Eigen::Index nodes() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }

  /// Validates and normalizes an explicit adjacency.
  static MultimodalGraph from_adjacency(Eigen::MatrixXd features, Eigen::MatrixXd adjacency);
};

/// Edge weights are max(0, cosine) between endpoint embeddings.
MultimodalGraph build_graph(const SampleEmbeddings& sample, std::span<const CommonsenseNode> cs,
                            Topology topology = Topology::InputHub);

template <typename Scalar>
struct GcnParams {
  enum Block : std::size_t { W0 = 0, B0, W1, B1, WOut, BOut, kCount };
  static constexpr std::array<std::string_view, kCount> kNames{"w0", "b0", "w1",
                                                               "b1", "w_out", "b_out"};

  // Biases are stored as column matrices so every block shares one type.
  std::array<MatrixX<Scalar>, kCount> blocks;

  MatrixX<Scalar>& operator[](Block b) { return blocks[b]; }
  const MatrixX<Scalar>& operator[](Block b) const { return blocks[b]; }

  GcnParams zeros_like() const {
    GcnParams z;
    for (std::size_t i = 0; i < kCount; ++i) {
      z.blocks[i] = MatrixX<Scalar>::Zero(blocks[i].rows(), blocks[i].cols());
    }
    return z;
  }

  bool all_finite() const {
    for (const auto& b : blocks) {
      if (!b.allFinite()) return false;
    }
    return true;
  }
};

struct GcnShape {
  Eigen::Index input_dim = 0;
  Eigen::Index hidden0 = 256;
  Eigen::Index hidden1 = 512;
  Eigen::Index num_options = 0;
};

template <typename Scalar>
struct BasicGcnModel {
  GcnParams<Scalar> params;
  double dropout_rate = 0.4;

  using P = GcnParams<Scalar>;
  Eigen::Index input_dim() const { return params[P::W0].rows(); }
  Eigen::Index hidden0() const { return params[P::W0].cols(); }
  Eigen::Index hidden1() const { return params[P::W1].cols(); }
  Eigen::Index num_options() const { return params[P::WOut].cols(); }
  GcnShape shape() const { return {input_dim(), hidden0(), hidden1(), num_options()}; }

  template <typename Other>
  BasicGcnModel<Other> cast() const {
    BasicGcnModel<Other> out;
    out.dropout_rate = dropout_rate;
    for (std::size_t i = 0; i < P::kCount; ++i) {
      out.params.blocks[i] = params.blocks[i].template cast<Other>();
    }
    return out;
  }
};

using GcnModel = BasicGcnModel<double>;

/// Glorot-uniform weights, zero biases, reproducible from `seed`.
GcnModel init_gcn(const GcnShape& shape, std::uint64_t seed, double dropout_rate = 0.4);

/// Uniform double in [0, 1) from the top 53 bits; platform-independent.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

enum class Mode { Train, Eval };

struct ConfidenceVector {
  std::vector<double> probs;  // length M, zero past valid_options
  int valid_options = 0;
};

template <typename Scalar>
struct ForwardCache {
  bool valid = false;
  MatrixX<Scalar> norm_adj;
  MatrixX<Scalar> ah0;  // Â H0
  MatrixX<Scalar> z1;
  MatrixX<Scalar> mask1;  // scaled keep mask, empty in Eval
  MatrixX<Scalar> h1;
  MatrixX<Scalar> ah1;
  MatrixX<Scalar> z2;
  MatrixX<Scalar> mask2;
  MatrixX<Scalar> h2;
  VectorX<Scalar> pooled;
  VectorX<Scalar> probs;
  int valid_options = 0;
};

template <typename Scalar>
struct ForwardResult {
  VectorX<Scalar> probs;
  ForwardCache<Scalar> cache;
};

namespace detail {

template <typename Scalar>
MatrixX<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate,
                             std::mt19937_64& rng) {
  MatrixX<Scalar> mask(rows, cols);
  const Scalar scale = Scalar(1.0 / (1.0 - rate));
  // Column-major fill order keeps the stream consumption fixed.
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      mask(r, c) = unit_uniform(rng) < rate ? Scalar(0) : scale;
    }
  }
  return mask;
}

}  // namespace detail

/// Runs both GCN layers, mean pooling and the masked softmax head.
/// `rng` is only consumed in Train mode with a positive dropout rate.
template <typename Scalar>
ForwardResult<Scalar> gcn_forward(const MatrixX<Scalar>& norm_adj, const MatrixX<Scalar>& features,
                                  const BasicGcnModel<Scalar>& model, int valid_options, Mode mode,
                                  std::mt19937_64* rng = nullptr) {
  using P = GcnParams<Scalar>;
  const auto& p = model.params;
  if (features.cols() != model.input_dim()) {
    throw ContractError("gcn_forward: node feature dim " + std::to_string(features.cols()) +
                        " does not match model input dim " + std::to_string(model.input_dim()));
  }
  if (norm_adj.rows() != features.rows() || norm_adj.cols() != features.rows()) {
    throw ContractError("gcn_forward: adjacency shape does not match node count");
  }
  if (features.rows() < 1) throw ContractError("gcn_forward: graph has no nodes");
  if (valid_options < 1 || valid_options > model.num_options()) {
    throw ContractError("gcn_forward: valid_options " + std::to_string(valid_options) +
                        " outside [1, " + std::to_string(model.num_options()) + "]");
  }
  const bool drop = mode == Mode::Train && model.dropout_rate > 0.0;
  if (drop && rng == nullptr) throw ContractError("gcn_forward: Train mode needs an rng");

  ForwardResult<Scalar> out;
  auto& c = out.cache;
  const auto n = features.rows();
  c.norm_adj = norm_adj;
  c.valid_options = valid_options;

  c.ah0 = norm_adj * features;
  c.z1 = c.ah0 * p[P::W0];
  c.z1.rowwise() += p[P::B0].col(0).transpose();
  c.h1 = c.z1.cwiseMax(Scalar(0));
  if (drop) {
    c.mask1 = detail::dropout_mask<Scalar>(n, c.h1.cols(), model.dropout_rate, *rng);
    c.h1 = c.h1.cwiseProduct(c.mask1);
  }

  c.ah1 = norm_adj * c.h1;
  c.z2 = c.ah1 * p[P::W1];
  c.z2.rowwise() += p[P::B1].col(0).transpose();
  c.h2 = c.z2.cwiseMax(Scalar(0));
  if (drop) {
    c.mask2 = detail::dropout_mask<Scalar>(n, c.h2.cols(), model.dropout_rate, *rng);
    c.h2 = c.h2.cwiseProduct(c.mask2);
  }

  c.pooled = c.h2.colwise().mean().transpose();
  VectorX<Scalar> logits = p[P::WOut].transpose() * c.pooled + p[P::BOut].col(0);

  const auto m = model.num_options();
  c.probs = VectorX<Scalar>::Zero(m);
  const Scalar top = logits.head(valid_options).maxCoeff();
  Scalar total = 0;
  for (int i = 0; i < valid_options; ++i) {
    c.probs[i] = std::exp(logits[i] - top);
    total += c.probs[i];
  }
  c.probs.head(valid_options) /= total;
  c.valid = true;
  out.probs = c.probs;
  return out;
}

/// Cross-entropy -log p[gold] for a completed forward pass.
template <typename Scalar>
Scalar cross_entropy(const ForwardCache<Scalar>& cache, int gold) {
  if (!cache.valid) throw ContractError("cross_entropy: missing forward cache");
  if (gold < 0 || gold >= cache.valid_options) {
    throw ContractError("cross_entropy: gold index outside the valid options");
  }
  return -std::log(cache.probs[gold]);
}

/// Gradients of cross_entropy(cache, gold) w.r.t. every parameter block,
/// reusing the dropout masks recorded by the forward pass.
template <typename Scalar>
GcnParams<Scalar> gcn_backward(const ForwardCache<Scalar>& cache,
                               const BasicGcnModel<Scalar>& model, int gold) {
  using P = GcnParams<Scalar>;
  if (!cache.valid) throw ContractError("gcn_backward: missing forward cache");
  if (gold < 0 || gold >= cache.valid_options) {
    throw ContractError("gcn_backward: gold index outside the valid options");
  }
  const auto& p = model.params;
  GcnParams<Scalar> g;
  const auto n = static_cast<Scalar>(cache.h2.rows());

  VectorX<Scalar> dlogits = cache.probs;  // masked entries are already 0
  dlogits[gold] -= Scalar(1);
  g[P::WOut] = cache.pooled * dlogits.transpose();
  g[P::BOut] = dlogits;

  const VectorX<Scalar> dpooled = p[P::WOut] * dlogits;
  MatrixX<Scalar> dz2 = dpooled.transpose().replicate(cache.h2.rows(), 1) / n;
  if (cache.mask2.size() != 0) dz2 = dz2.cwiseProduct(cache.mask2);
  dz2 = (cache.z2.array() > Scalar(0)).select(dz2, Scalar(0));
  g[P::W1] = cache.ah1.transpose() * dz2;
  g[P::B1] = dz2.colwise().sum().transpose();

  // Â is symmetric, so Âᵀ = Â.
  MatrixX<Scalar> dz1 = cache.norm_adj * (dz2 * p[P::W1].transpose());
  if (cache.mask1.size() != 0) dz1 = dz1.cwiseProduct(cache.mask1);
  dz1 = (cache.z1.array() > Scalar(0)).select(dz1, Scalar(0));
  g[P::W0] = cache.ah0.transpose() * dz1;
  g[P::B0] = dz1.colwise().sum().transpose();
  return g;
}

/// Eval-mode confidence for one graph.
ConfidenceVector score_sample(const GcnModel& model, const MultimodalGraph& graph,
                              int valid_options);

struct TrainingExample {
  MultimodalGraph graph;
  int gold = 0;
  int valid_options = 0;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 1e-5;
  int max_epochs = 30;
  int patience = 5;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Eigen::Index hidden0 = 256;
  Eigen::Index hidden1 = 512;
  double dropout_rate = 0.4;
  int num_options = 0;  // 0: dataset maximum
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};

struct TrainResult {
  GcnModel model;  // best-validation checkpoint
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool early_stopped = false;
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
};

/// Tracks validation accuracy; stops after `patience` epochs without a strict
/// improvement. Epochs are 1-based.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);
  /// Returns true when this epoch is the new best.
  bool update(double validation_accuracy);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

/// Mini-batch Adam on mean cross-entropy. Deterministic for a given seed and
/// dataset order.
TrainResult train_gcn(std::span<const TrainingExample> dataset, const TrainConfig& cfg);

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// "MGCN", u16 version, u32 header length, JSON header, then f32 LE blocks
/// (row-major) in GcnParams order.
std::string save_checkpoint(const GcnModel& model);
GcnModel load_checkpoint(std::string_view bytes);

void save_checkpoint_file(const GcnModel& model, const std::string& path);
GcnModel load_checkpoint_file(const std::string& path);

}  // namespace csvqa

#endif  // CSVQA_GRAPH_GCN_HPP
