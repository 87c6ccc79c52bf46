// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#include "csvqa/graph_gcn.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

namespace csvqa {

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'G', 'C', 'N'};
using P = GcnParams<double>;

double edge_weight(const EmbeddingVector& a, const EmbeddingVector& b) {
  return std::max(0.0, similarity(a, b, SimilarityMetric::Cosine));
}

std::size_t argmax_valid(const VectorX<double>& probs, int valid_options) {
  std::size_t best = 0;
  for (int i = 1; i < valid_options; ++i) {
    if (probs[i] > probs[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  }
  return best;
}

void fisher_yates(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

struct Adam {
  P m;
  P v;
  long long step = 0;

  void apply(GcnModel& model, const P& grad, const TrainConfig& cfg) {
    if (step == 0) {
      m = model.params.zeros_like();
      v = model.params.zeros_like();
    }
    ++step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t b = 0; b < P::kCount; ++b) {
      m.blocks[b] = cfg.beta1 * m.blocks[b] + (1.0 - cfg.beta1) * grad.blocks[b];
      v.blocks[b] = cfg.beta2 * v.blocks[b] + (1.0 - cfg.beta2) * grad.blocks[b].cwiseProduct(grad.blocks[b]);
      model.params.blocks[b].array() -=
          cfg.learning_rate * (m.blocks[b].array() / c1) /
          ((v.blocks[b].array() / c2).sqrt() + cfg.epsilon);
    }
  }
};

double accuracy(const GcnModel& model, std::span<const TrainingExample> data,
                const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  std::size_t correct = 0;
  for (auto i : idx) {
    const auto& ex = data[i];
    const auto r = gcn_forward<double>(ex.graph.normalized, ex.graph.features, model,
                                       ex.valid_options, Mode::Eval);
    if (argmax_valid(r.probs, ex.valid_options) == static_cast<std::size_t>(ex.gold)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos, const char* what) {
  if (bytes.size() - pos < sizeof(T)) {
    throw FormatError(pos, std::string("truncated checkpoint reading ") + what);
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace

MultimodalGraph MultimodalGraph::from_adjacency(Eigen::MatrixXd features,
                                                Eigen::MatrixXd adjacency) {
  if (adjacency.rows() != features.rows()) {
    throw ContractError("graph: adjacency has " + std::to_string(adjacency.rows()) +
                        " nodes but features have " + std::to_string(features.rows()));
  }
  if (!features.allFinite()) throw ContractError("graph: non-finite node features");
  MultimodalGraph g;
  g.normalized = normalize_adjacency(adjacency);
  g.adjacency = std::move(adjacency);
  g.features = std::move(features);
  return g;
}

MultimodalGraph build_graph(const SampleEmbeddings& sample, std::span<const CommonsenseNode> cs,
                            Topology topology) {
  const auto d = sample.image.size();
  if (sample.question.size() != d || sample.caption.size() != d) {
    throw ContractError("build_graph: input embeddings disagree on dimension");
  }
  for (const auto& node : cs) {
    if (node.embedding.size() != d) {
      throw ContractError("build_graph: commonsense embedding dim " +
                          std::to_string(node.embedding.size()) + " != " + std::to_string(d));
    }
  }
  const auto n = static_cast<Eigen::Index>(3 + cs.size());
  Eigen::MatrixXd features(n, d);
  features.row(0) = sample.image.transpose();
  features.row(1) = sample.question.transpose();
  features.row(2) = sample.caption.transpose();
  std::vector<std::string> sentences;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    features.row(static_cast<Eigen::Index>(3 + i)) = cs[i].embedding.transpose();
    sentences.push_back(cs[i].sentence);
  }

  Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(n, n);
  auto link = [&](Eigen::Index i, Eigen::Index j) {
    const double w = edge_weight(features.row(i).transpose(), features.row(j).transpose());
    adj(i, j) = w;
    adj(j, i) = w;
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (topology == Topology::FullyConnected || i < 3) link(i, j);
    }
  }
  auto g = MultimodalGraph::from_adjacency(std::move(features), std::move(adj));
  g.sentences = std::move(sentences);
  return g;
}

GcnModel init_gcn(const GcnShape& shape, std::uint64_t seed, double dropout_rate) {
  if (shape.input_dim < 1 || shape.hidden0 < 1 || shape.hidden1 < 1 || shape.num_options < 1) {
    throw ContractError("init_gcn: all dimensions must be positive");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ContractError("init_gcn: dropout rate must be in [0, 1)");
  }
  std::mt19937_64 rng(seed);
  auto glorot = [&](Eigen::Index fan_in, Eigen::Index fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Eigen::MatrixXd w(fan_in, fan_out);
    for (Eigen::Index c = 0; c < fan_out; ++c) {
      for (Eigen::Index r = 0; r < fan_in; ++r) w(r, c) = a * (2.0 * unit_uniform(rng) - 1.0);
    }
    return w;
  };
  GcnModel m;
  m.dropout_rate = dropout_rate;
  m.params[P::W0] = glorot(shape.input_dim, shape.hidden0);
  m.params[P::B0] = Eigen::MatrixXd::Zero(shape.hidden0, 1);
  m.params[P::W1] = glorot(shape.hidden0, shape.hidden1);
  m.params[P::B1] = Eigen::MatrixXd::Zero(shape.hidden1, 1);
  m.params[P::WOut] = glorot(shape.hidden1, shape.num_options);
  m.params[P::BOut] = Eigen::MatrixXd::Zero(shape.num_options, 1);
  return m;
}

ConfidenceVector score_sample(const GcnModel& model, const MultimodalGraph& graph,
                              int valid_options) {
  if (graph.dim() != model.input_dim()) {
    throw ContractError("score_sample: graph feature dim " + std::to_string(graph.dim()) +
                        " does not match checkpoint input dim " +
                        std::to_string(model.input_dim()));
  }
  const auto r =
      gcn_forward<double>(graph.normalized, graph.features, model, valid_options, Mode::Eval);
  return {std::vector<double>(r.probs.data(), r.probs.data() + r.probs.size()), valid_options};
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) throw ContractError("early stopping patience must be positive");
}

bool EarlyStopping::update(double validation_accuracy) {
  ++epoch_;
  if (validation_accuracy > best_) {
    best_ = validation_accuracy;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

TrainResult train_gcn(std::span<const TrainingExample> dataset, const TrainConfig& cfg) {
  if (dataset.empty()) throw ContractError("train_gcn: empty dataset");
  if (cfg.batch_size == 0 || cfg.max_epochs < 1 || !(cfg.learning_rate > 0.0)) {
    throw ContractError("train_gcn: batch size, epochs and learning rate must be positive");
  }
  int options = cfg.num_options;
  const auto dim = dataset.front().graph.dim();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& ex = dataset[i];
    if (ex.graph.dim() != dim) throw ContractError("train_gcn: inconsistent feature dims");
    if (ex.valid_options < 1 || ex.gold < 0 || ex.gold >= ex.valid_options) {
      throw ContractError("train_gcn: example " + std::to_string(i) +
                          " has gold outside its valid options");
    }
    if (cfg.num_options == 0) options = std::max(options, ex.valid_options);
    if (ex.valid_options > options) {
      throw ContractError("train_gcn: example has more options than the model head");
    }
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  fisher_yates(order, rng);
  auto n_val = static_cast<std::size_t>(cfg.validation_fraction * static_cast<double>(order.size()));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train.empty()) std::swap(train, val);
  // Too small to hold out: validate on the training split.
  const auto& val_idx = val.empty() ? train : val;

  TrainResult result;
  result.train_size = train.size();
  result.validation_size = val.size();
  GcnModel model = init_gcn({dim, cfg.hidden0, cfg.hidden1, options}, rng(), cfg.dropout_rate);
  std::mt19937_64 dropout_rng(rng());
  result.model = model;
  Adam adam;
  EarlyStopping stopper(std::max(1, cfg.patience));

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    fisher_yates(train, rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const auto end = std::min(train.size(), b + cfg.batch_size);
      P grad = model.params.zeros_like();
      for (std::size_t i = b; i < end; ++i) {
        const auto& ex = dataset[train[i]];
        const auto r = gcn_forward<double>(ex.graph.normalized, ex.graph.features, model,
                                           ex.valid_options, Mode::Train, &dropout_rng);
        loss_sum += cross_entropy(r.cache, ex.gold);
        const auto g = gcn_backward(r.cache, model, ex.gold);
        for (std::size_t k = 0; k < P::kCount; ++k) grad.blocks[k] += g.blocks[k];
      }
      const double inv = 1.0 / static_cast<double>(end - b);
      for (auto& blk : grad.blocks) blk *= inv;
      adam.apply(model, grad, cfg);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_accuracy = accuracy(model, dataset, train);
    rec.validation_accuracy = accuracy(model, dataset, val_idx);
    result.history.push_back(rec);
    if (stopper.update(rec.validation_accuracy)) {
      result.model = model;
      result.best_epoch = epoch;
    }
    if (stopper.should_stop()) {
      result.early_stopped = epoch < cfg.max_epochs;
      break;
    }
  }
  if (!result.model.params.all_finite()) throw ContractError("train_gcn: parameters diverged");
  return result;
}

std::string save_checkpoint(const GcnModel& model) {
  nlohmann::ordered_json header;
  header["input_dim"] = model.input_dim();
  header["hidden0"] = model.hidden0();
  header["hidden1"] = model.hidden1();
  header["num_options"] = model.num_options();
  header["dropout"] = model.dropout_rate;
  header["layout"] = "row-major";
  header["blocks"] = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < P::kCount; ++b) {
    header["blocks"].push_back({{"name", std::string(P::kNames[b])},
                                {"rows", model.params.blocks[b].rows()},
                                {"cols", model.params.blocks[b].cols()}});
  }
  const auto text = header.dump();
  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint16_t>(buf, kCheckpointVersion);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(text.size()));
  buf.append(text);
  for (const auto& blk : model.params.blocks) {
    for (Eigen::Index r = 0; r < blk.rows(); ++r) {
      for (Eigen::Index c = 0; c < blk.cols(); ++c) {
        put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(static_cast<float>(blk(r, c))));
      }
    }
  }
  return buf;
}

GcnModel load_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError(0, "bad checkpoint magic, expected MGCN");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint16_t>(bytes, pos, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(4, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = get_le<std::uint32_t>(bytes, pos, "header length");
  if (bytes.size() - pos < hlen) throw FormatError(pos, "truncated checkpoint header");
  const auto header_at = pos;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header_at, std::string("unreadable checkpoint header: ") + e.what());
  }
  pos += hlen;

  GcnModel m;
  Eigen::Index expected[P::kCount][2];
  try {
    const auto d = header.at("input_dim").get<Eigen::Index>();
    const auto h0 = header.at("hidden0").get<Eigen::Index>();
    const auto h1 = header.at("hidden1").get<Eigen::Index>();
    const auto o = header.at("num_options").get<Eigen::Index>();
    m.dropout_rate = header.at("dropout").get<double>();
    const Eigen::Index shapes[P::kCount][2] = {{d, h0}, {h0, 1}, {h0, h1}, {h1, 1}, {h1, o}, {o, 1}};
    const auto& blocks = header.at("blocks");
    if (!blocks.is_array() || blocks.size() != P::kCount) {
      throw FormatError(header_at, "checkpoint header lists wrong number of blocks");
    }
    for (std::size_t b = 0; b < P::kCount; ++b) {
      expected[b][0] = shapes[b][0];
      expected[b][1] = shapes[b][1];
      if (shapes[b][0] < 1 || shapes[b][1] < 1 ||
          blocks[b].at("name").get<std::string>() != P::kNames[b] ||
          blocks[b].at("rows").get<Eigen::Index>() != shapes[b][0] ||
          blocks[b].at("cols").get<Eigen::Index>() != shapes[b][1]) {
        throw FormatError(header_at, "checkpoint block '" + std::string(P::kNames[b]) +
                                         "' has an inconsistent shape");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(header_at, std::string("incomplete checkpoint header: ") + e.what());
  }
  for (std::size_t b = 0; b < P::kCount; ++b) {
    Eigen::MatrixXd blk(expected[b][0], expected[b][1]);
    for (Eigen::Index r = 0; r < blk.rows(); ++r) {
      for (Eigen::Index c = 0; c < blk.cols(); ++c) {
        blk(r, c) = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos, "parameters")));
      }
    }
    m.params.blocks[b] = std::move(blk);
  }
  if (pos != bytes.size()) throw FormatError(pos, "trailing bytes after checkpoint parameters");
  if (!m.params.all_finite()) throw FormatError(header_at, "checkpoint has non-finite parameters");
  return m;
}

void save_checkpoint_file(const GcnModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  const auto bytes = save_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed to write checkpoint: " + path);
}

GcnModel load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace csvqa
