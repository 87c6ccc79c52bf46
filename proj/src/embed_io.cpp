// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/embed_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <future>
#include <istream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "csvqa/http.hpp"

namespace csvqa {

namespace {

constexpr char kMagic[4] = {'M', 'G', 'E', 'M'};

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(pos_, std::string("truncated payload reading ") + what);
    }
  }

  std::string data_;
  std::uint64_t pos_ = 0;
};

}  // namespace

std::string_view metric_name(SimilarityMetric m) {
  switch (m) {
    case SimilarityMetric::Cosine: return "cosine";
    case SimilarityMetric::Manhattan: return "manhattan";
    case SimilarityMetric::Euclidean: return "euclidean";
  }
  return "cosine";
}

SimilarityMetric parse_metric(std::string_view name) {
  if (name == "cosine") return SimilarityMetric::Cosine;
  if (name == "manhattan") return SimilarityMetric::Manhattan;
  if (name == "euclidean") return SimilarityMetric::Euclidean;
  throw ContractError("unknown similarity metric: " + std::string(name));
}

EmbeddingStore::EmbeddingStore(std::uint32_t dim) : dim_(dim) {
  if (dim == 0) throw ContractError("embedding dimension must be positive");
}

void EmbeddingStore::check(const std::string& key, const EmbeddingVector& v) const {
  if (v.size() != static_cast<Eigen::Index>(dim_)) {
    throw ContractError("embedding for '" + key + "' has dim " + std::to_string(v.size()) +
                        ", store dim is " + std::to_string(dim_));
  }
  if (!v.allFinite()) throw ContractError("embedding for '" + key + "' is not finite");
}

void EmbeddingStore::insert(std::string key, EmbeddingVector v) {
  check(key, v);
  if (index_.count(key) != 0) throw ContractError("duplicate embedding key: " + key);
  index_.emplace(key, keys_.size());
  keys_.push_back(std::move(key));
  vectors_.push_back(std::move(v));
}

void EmbeddingStore::upsert(std::string key, EmbeddingVector v) {
  check(key, v);
  if (auto it = index_.find(key); it != index_.end()) {
    vectors_[it->second] = std::move(v);
    return;
  }
  insert(std::move(key), std::move(v));
}

bool EmbeddingStore::contains(std::string_view key) const {
  return index_.count(std::string(key)) != 0;
}

const EmbeddingVector* EmbeddingStore::find(std::string_view key) const {
  auto it = index_.find(std::string(key));
  return it == index_.end() ? nullptr : &vectors_[it->second];
}

const EmbeddingVector& EmbeddingStore::at(std::string_view key) const {
  if (const auto* v = find(key)) return *v;
  throw ContractError("missing embedding for key: " + std::string(key));
}

void write_embedding_store(const EmbeddingStore& store, std::ostream& out) {
  std::string buf(kMagic, sizeof(kMagic));
  put_le<std::uint16_t>(buf, kEmbeddingStoreVersion);
  put_le<std::uint32_t>(buf, store.dim());
  put_le<std::uint64_t>(buf, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& key = store.keys()[i];
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(key.size()));
    buf.append(key);
    const auto& v = store.vector_at(i);
    for (Eigen::Index d = 0; d < v.size(); ++d) {
      put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v[d])));
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed to write embedding store");
}

EmbeddingStore read_embedding_store(std::istream& in, std::optional<std::uint32_t> expected_dim) {
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on embedding store");
  ByteReader r(std::move(data));
  const auto magic = r.bytes(4, "magic");
  if (magic != std::string_view(kMagic, 4)) throw FormatError(0, "bad magic, expected MGEM");
  const auto version_at = r.offset();
  const auto version = r.le<std::uint16_t>("version");
  if (version != kEmbeddingStoreVersion) {
    throw FormatError(version_at, "unsupported version " + std::to_string(version));
  }
  const auto dim_at = r.offset();
  const auto dim = r.le<std::uint32_t>("dim");
  if (dim == 0) throw FormatError(dim_at, "dim must be positive");
  if (expected_dim && *expected_dim != dim) {
    throw FormatError(dim_at, "dim mismatch: file has " + std::to_string(dim) + ", expected " +
                                  std::to_string(*expected_dim));
  }
  const auto count = r.le<std::uint64_t>("count");
  EmbeddingStore store(dim);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto entry_at = r.offset();
    const auto klen = r.le<std::uint32_t>("key length");
    auto key = r.bytes(klen, "key");
    EmbeddingVector v(dim);
    for (std::uint32_t d = 0; d < dim; ++d) {
      v[d] = static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>("vector")));
    }
    if (store.contains(key)) throw FormatError(entry_at, "duplicate key '" + key + "'");
    if (!v.allFinite()) throw FormatError(entry_at, "non-finite vector for '" + key + "'");
    store.insert(std::move(key), std::move(v));
  }
  if (!r.at_end()) throw FormatError(r.offset(), "trailing bytes after last entry");
  return store;
}

void save_embedding_store(const EmbeddingStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_embedding_store(store, out);
}

EmbeddingStore load_embedding_store(const std::string& path,
                                    std::optional<std::uint32_t> expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding store: " + path);
  return read_embedding_store(in, expected_dim);
}

EmbeddingClient::EmbeddingClient(EmbeddingClientConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.batch_size == 0) throw ContractError("embedding batch size must be positive");
  if (cfg_.max_in_flight == 0) cfg_.max_in_flight = 1;
}

std::vector<EmbeddingVector> EmbeddingClient::fetch_batch(const std::vector<EmbedItem>& items,
                                                          std::size_t begin, std::size_t end) {
  nlohmann::json body;
  body["items"] = nlohmann::json::array();
  for (std::size_t i = begin; i < end; ++i) {
    body["items"].push_back(
        {{"kind", items[i].kind == EmbedItem::Kind::Text ? "text" : "image"},
         {"payload", items[i].payload}});
  }
  auto url = net::split_url(cfg_.endpoint);
  url.path = (url.path == "/" ? "" : url.path) + "/embed";
  ++calls_;
  const auto res = net::post_json_with_retry(url, body.dump(), {}, cfg_.timeout,
                                             {cfg_.max_attempts, cfg_.initial_backoff});
  calls_ += static_cast<std::size_t>(res.retries);
  retries_ += static_cast<std::size_t>(res.retries);

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(res.response.body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("embedding service returned invalid JSON: ") + e.what());
  }
  if (!j.contains("dim") || !j.contains("vectors") || !j["vectors"].is_array()) {
    throw ProtocolError("embedding response lacks dim/vectors");
  }
  const auto dim = j["dim"].get<long long>();
  if (dim <= 0) throw ProtocolError("embedding response declares non-positive dim");
  const auto& vecs = j["vectors"];
  if (vecs.size() != end - begin) {
    throw ProtocolError("embedding response has " + std::to_string(vecs.size()) +
                        " vectors for " + std::to_string(end - begin) + " items");
  }
  std::vector<EmbeddingVector> out;
  out.reserve(vecs.size());
  for (const auto& v : vecs) {
    if (!v.is_array() || static_cast<long long>(v.size()) != dim) {
      throw ProtocolError("embedding vector length disagrees with declared dim " +
                          std::to_string(dim));
    }
    EmbeddingVector e(dim);
    for (long long d = 0; d < dim; ++d) e[d] = v[static_cast<std::size_t>(d)].get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<EmbeddingVector> EmbeddingClient::fetch(const std::vector<EmbedItem>& items) {
  std::vector<std::pair<std::size_t, std::size_t>> batches;
  for (std::size_t b = 0; b < items.size(); b += cfg_.batch_size) {
    batches.emplace_back(b, std::min(items.size(), b + cfg_.batch_size));
  }
  std::vector<std::vector<EmbeddingVector>> results(batches.size());
  // Waves of at most max_in_flight concurrent requests; results land by index.
  for (std::size_t w = 0; w < batches.size(); w += cfg_.max_in_flight) {
    std::vector<std::future<std::vector<EmbeddingVector>>> wave;
    const auto wend = std::min(batches.size(), w + cfg_.max_in_flight);
    for (std::size_t b = w; b < wend; ++b) {
      wave.push_back(std::async(std::launch::async, [this, &items, &batches, b] {
        return fetch_batch(items, batches[b].first, batches[b].second);
      }));
    }
    for (std::size_t b = w; b < wend; ++b) results[b] = wave[b - w].get();
  }
  std::vector<EmbeddingVector> out;
  out.reserve(items.size());
  for (auto& r : results) {
    for (auto& v : r) {
      if (!out.empty() && v.size() != out.front().size()) {
        throw ProtocolError("embedding dim changed across batches");
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

ServiceHealth EmbeddingClient::health() {
  auto url = net::split_url(cfg_.endpoint);
  url.path = (url.path == "/" ? "" : url.path) + "/health";
  const auto res = net::get(url, cfg_.timeout);
  if (res.status < 200 || res.status >= 300) {
    throw TransportError("GET /health failed: " +
                         (res.status < 0 ? res.error : "HTTP " + std::to_string(res.status)));
  }
  try {
    const auto j = nlohmann::json::parse(res.body);
    return {j.at("dim").get<std::uint32_t>(), j.at("model").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed /health response: ") + e.what());
  }
}

std::vector<EmbeddingVector> fetch_embeddings(const EmbeddingClientConfig& cfg,
                                              const std::vector<EmbedItem>& items) {
  EmbeddingClient client(cfg);
  return client.fetch(items);
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace csvqa
