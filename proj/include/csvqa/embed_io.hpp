// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

// Embedding vectors, similarity metrics, the MGEM store format and the
// client for the remote `/embed` service.

#ifndef CSVQA_EMBED_IO_HPP
#define CSVQA_EMBED_IO_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "csvqa/errors.hpp"

namespace csvqa {

using EmbeddingVector = Eigen::VectorXd;

enum class SimilarityMetric { Cosine, Manhattan, Euclidean };

std::string_view metric_name(SimilarityMetric m);
SimilarityMetric parse_metric(std::string_view name);  // throws ContractError

/// Similarity where larger means closer for every metric: cosine in [-1, 1],
/// negated L1 distance, negated L2 distance.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar similarity(const Eigen::MatrixBase<DerivedA>& a,
                                     const Eigen::MatrixBase<DerivedB>& b,
                                     SimilarityMetric m) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size()) {
    throw ContractError("similarity: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
  }
  switch (m) {
    case SimilarityMetric::Cosine: {
      const Scalar na = a.norm();
      const Scalar nb = b.norm();
      if (na == Scalar(0) || nb == Scalar(0)) {
        throw ContractError("similarity: zero vector under cosine");
      }
      const Scalar c = a.dot(b) / (na * nb);
      return std::clamp(c, Scalar(-1), Scalar(1));
    }
    case SimilarityMetric::Manhattan:
      return -(a - b).template lpNorm<1>();
    case SimilarityMetric::Euclidean:
      return -(a - b).norm();
  }
  return Scalar(0);
}

/// Keyed fixed-dimension vectors, kept in insertion order.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::uint32_t dim);

  std::uint32_t dim() const { return dim_; }
  std::size_t size() const { return keys_.size(); }

  /// Adds a new key; rejects duplicates, wrong length and non-finite values.
  void insert(std::string key, EmbeddingVector v);
  /// Adds or replaces.
  void upsert(std::string key, EmbeddingVector v);

  bool contains(std::string_view key) const;
  const EmbeddingVector* find(std::string_view key) const;
  const EmbeddingVector& at(std::string_view key) const;  // throws ContractError

  const std::vector<std::string>& keys() const { return keys_; }
  const EmbeddingVector& vector_at(std::size_t i) const { return vectors_[i]; }

 private:
  void check(const std::string& key, const EmbeddingVector& v) const;

  std::uint32_t dim_;
  std::vector<std::string> keys_;
  std::vector<EmbeddingVector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::uint16_t kEmbeddingStoreVersion = 1;

/// Bit-exact layout: "MGEM", u16 version, u32 dim, u64 count, then per entry
/// u32 key length, key bytes, dim x f32. All integers little-endian.
void write_embedding_store(const EmbeddingStore& store, std::ostream& out);
EmbeddingStore read_embedding_store(std::istream& in,
                                    std::optional<std::uint32_t> expected_dim = std::nullopt);

void save_embedding_store(const EmbeddingStore& store, const std::string& path);
EmbeddingStore load_embedding_store(const std::string& path,
                                    std::optional<std::uint32_t> expected_dim = std::nullopt);

struct EmbedItem {
  enum class Kind { Text, Image };
  Kind kind = Kind::Text;
  std::string payload;  // UTF-8 text, or base64 image bytes
};

struct EmbeddingClientConfig {
  std::string endpoint;  // base URL, e.g. http://127.0.0.1:8000
  std::size_t batch_size = 64;
  std::size_t max_in_flight = 4;
  int max_attempts = 4;  // first try plus retries
  std::chrono::milliseconds initial_backoff{200};
  std::chrono::milliseconds timeout{30000};
};

struct ServiceHealth {
  std::uint32_t dim = 0;
  std::string model;
};

class EmbeddingClient {
 public:
  explicit EmbeddingClient(EmbeddingClientConfig cfg);

  /// One vector per item, in input order. Throws TransportError when a batch
  /// keeps failing and ProtocolError on inconsistent dimensions.
  std::vector<EmbeddingVector> fetch(const std::vector<EmbedItem>& items);
  ServiceHealth health();

  std::size_t calls() const { return calls_.load(); }
  std::size_t retries() const { return retries_.load(); }

 private:
  std::vector<EmbeddingVector> fetch_batch(const std::vector<EmbedItem>& items,
                                           std::size_t begin, std::size_t end);

  EmbeddingClientConfig cfg_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> retries_{0};
};

std::vector<EmbeddingVector> fetch_embeddings(const EmbeddingClientConfig& cfg,
                                              const std::vector<EmbedItem>& items);

std::string base64_encode(std::string_view bytes);

}  // namespace csvqa

#endif  // CSVQA_EMBED_IO_HPP
