#include "robomal/models.hpp"

#include "robomal/random.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace robomal {

namespace {

struct BuiltModel {
  Graph graph;
  NodeId logits = 0;    // [rows]
  NodeId features = 0;  // [rows, feature_dim]
  // graph row r holds batch sample order[r]
  std::vector<std::size_t> order;
};

class ModelBuilder {
 public:
  ModelBuilder(const ModelConfig& config, const Parameters& params, Mode mode, std::uint64_t dropout_seed)
      : config_(config), params_(params), mode_(mode), dropout_seed_(dropout_seed) {}

  BuiltModel build(std::span<const TokenSequence> batch) {
    if (batch.empty()) throw std::invalid_argument("forward: empty batch");
    for (const auto& s : batch) check_sequence(s);
    BuiltModel m;
    m.order.resize(batch.size());
    std::iota(m.order.begin(), m.order.end(), 0);
    NodeId features = 0;
    switch (config_.kind) {
      case ModelKind::BiLSTM:
      case ModelKind::GRU:
        // longest first, so active rows at every step form a prefix
        std::stable_sort(m.order.begin(), m.order.end(),
                         [&](std::size_t a, std::size_t b) { return batch[a].true_length > batch[b].true_length; });
        features = config_.kind == ModelKind::BiLSTM ? bilstm(batch, m.order) : gru(batch, m.order);
        break;
      case ModelKind::CNN:
        features = cnn(batch);
        break;
      case ModelKind::ANN:
        features = ann(batch);
        break;
    }
    const NodeId out = g_.add(g_.matmul(features, weight("dense.W")), weight("dense.b"));
    m.logits = g_.reshape(out, Shape{batch.size()});
    m.features = features;
    g_.retain(m.logits);
    g_.retain(m.features);
    g_.release_intermediates(true);
    m.graph = std::move(g_);
    return m;
  }

 private:
  void check_sequence(const TokenSequence& s) const {
    if (s.true_length == 0 || s.true_length > s.tokens.size())
      throw std::invalid_argument("forward: true_length " + std::to_string(s.true_length) + " invalid for " +
                                  std::to_string(s.tokens.size()) + " tokens");
    const bool fixed = config_.kind == ModelKind::CNN || config_.kind == ModelKind::ANN;
    if (fixed && s.tokens.size() != config_.sequence_length)
      throw std::invalid_argument("forward: sequence of length " + std::to_string(s.tokens.size()) +
                                  " but model expects " + std::to_string(config_.sequence_length));
  }

  NodeId weight(const std::string& name) {
    if (auto it = nodes_.find(name); it != nodes_.end()) return it->second;
    auto it = params_.weights.find(name);
    if (it == params_.weights.end()) throw std::invalid_argument("parameters lack '" + name + "'");
    return nodes_[name] = g_.parameter(name, it->second);
  }

  NodeId buffer(const std::string& name) {
    auto it = params_.buffers.find(name);
    if (it == params_.buffers.end()) throw std::invalid_argument("parameters lack buffer '" + name + "'");
    return g_.parameter(name, it->second, false);
  }

  std::uint64_t next_dropout_seed() { return derive_seed(dropout_seed_, dropout_layer_++); }

  // Input projection for every vocabulary entry at once: rows of E * Wx + b.
  // Gathering from this table equals projecting each embedded token.
  NodeId projected_table(NodeId embedding, NodeId w, NodeId bias, std::size_t hidden) {
    const std::size_t rows = hidden + config_.embedding_dim;
    const NodeId wx = g_.slice(w, 0, hidden, rows);
    return g_.add(g_.matmul(embedding, wx), bias);
  }

  struct StepIds {
    std::size_t active;
    std::vector<std::int32_t> ids;
  };

  static StepIds step_ids(std::span<const TokenSequence> batch, const std::vector<std::size_t>& order, std::size_t t,
                          bool reverse) {
    StepIds s{0, {}};
    for (std::size_t r = 0; r < order.size(); ++r) {
      const TokenSequence& seq = batch[order[r]];
      if (seq.true_length <= t) break;
      s.ids.push_back(seq.tokens[reverse ? seq.true_length - 1 - t : t]);
      ++s.active;
    }
    return s;
  }

  // [r, 4h] x 2 -> [r, 8h] laid out gate by gate: i_a i_b f_a f_b o_a o_b g_a g_b.
  NodeId interleave_gates(NodeId a, NodeId b, std::size_t h) {
    std::vector<NodeId> parts;
    for (std::size_t k = 0; k < 4; ++k) {
      parts.push_back(g_.slice(a, 1, k * h, (k + 1) * h));
      parts.push_back(g_.slice(b, 1, k * h, (k + 1) * h));
    }
    return g_.concat(std::move(parts), 1);
  }

  /// Both LSTM directions advance together as one recurrence over a [rows, 2h]
  /// state (forward half, backward half). They share true lengths, so the
  /// active rows agree at every step; the backward half reads tokens from the
  /// end of each sequence. Rows follow `order`.
  NodeId bilstm(std::span<const TokenSequence> batch, const std::vector<std::size_t>& order) {
    const std::size_t h = config_.hidden_units / 2;
    const NodeId wf = weight("lstm_fwd.W");
    const NodeId wb = weight("lstm_bwd.W");
    const NodeId emb = weight("embedding");
    const NodeId zero_table = g_.constant(Tensor(Shape{config_.vocab, 4 * h}));
    const NodeId zero_rec = g_.constant(Tensor(Shape{h, 4 * h}));
    const NodeId table_f = interleave_gates(projected_table(emb, wf, weight("lstm_fwd.b"), h), zero_table, h);
    const NodeId table_b = interleave_gates(zero_table, projected_table(emb, wb, weight("lstm_bwd.b"), h), h);
    // block-diagonal recurrent weight: forward state feeds forward gates only
    const NodeId wh = g_.concat({interleave_gates(g_.slice(wf, 0, 0, h), zero_rec, h),
                                 interleave_gates(zero_rec, g_.slice(wb, 0, 0, h), h)},
                                0);
    const std::size_t steps = batch[order.front()].true_length;
    const std::size_t w = 2 * h;

    std::vector<NodeId> finished;
    NodeId hidden = 0, cell = 0;
    std::size_t rows = order.size();
    for (std::size_t t = 0; t < steps; ++t) {
      StepIds fwd = step_ids(batch, order, t, false);
      StepIds bwd = step_ids(batch, order, t, true);
      if (t > 0 && fwd.active < rows) {
        finished.push_back(g_.slice(hidden, 0, fwd.active, rows));
        hidden = g_.slice(hidden, 0, 0, fwd.active);
        cell = g_.slice(cell, 0, 0, fwd.active);
      }
      rows = fwd.active;
      NodeId z = g_.add(g_.embedding(table_f, std::move(fwd.ids), Shape{rows}),
                        g_.embedding(table_b, std::move(bwd.ids), Shape{rows}));
      if (t > 0) z = g_.add(z, g_.matmul(hidden, wh));
      const NodeId gates = g_.sigmoid(g_.slice(z, 1, 0, 3 * w));
      const NodeId in_gate = g_.slice(gates, 1, 0, w);
      const NodeId forget = g_.slice(gates, 1, w, 2 * w);
      const NodeId out_gate = g_.slice(gates, 1, 2 * w, 3 * w);
      const NodeId candidate = g_.tanh(g_.slice(z, 1, 3 * w, 4 * w));
      // h0 = c0 = 0, so the first step has no recurrent terms
      cell = t == 0 ? g_.mul(in_gate, candidate) : g_.add(g_.mul(forget, cell), g_.mul(in_gate, candidate));
      hidden = g_.mul(out_gate, g_.tanh(cell));
    }
    finished.push_back(hidden);
    if (finished.size() == 1) return hidden;
    std::reverse(finished.begin(), finished.end());
    return g_.concat(std::move(finished), 0);
  }

  NodeId gru(std::span<const TokenSequence> batch, const std::vector<std::size_t>& order) {
    const std::size_t h = config_.hidden_units;
    const NodeId w = weight("gru.W");
    const NodeId wh = g_.slice(w, 0, 0, h);
    const NodeId table = projected_table(weight("embedding"), w, weight("gru.b"), h);
    const NodeId b_hn = weight("gru.b_hn");
    const std::size_t steps = batch[order.front()].true_length;

    std::vector<NodeId> finished;
    NodeId hidden = g_.constant(Tensor(Shape{order.size(), h}));
    std::size_t rows = order.size();
    for (std::size_t t = 0; t < steps; ++t) {
      StepIds s = step_ids(batch, order, t, false);
      if (s.active < rows) {
        finished.push_back(g_.slice(hidden, 0, s.active, rows));
        hidden = g_.slice(hidden, 0, 0, s.active);
      }
      rows = s.active;
      const NodeId x = g_.embedding(table, std::move(s.ids), Shape{rows});
      const NodeId hz = g_.matmul(hidden, wh);
      const NodeId gates = g_.sigmoid(g_.add(g_.slice(x, 1, 0, 2 * h), g_.slice(hz, 1, 0, 2 * h)));
      const NodeId update = g_.slice(gates, 1, 0, h);
      const NodeId reset = g_.slice(gates, 1, h, 2 * h);
      const NodeId recurrent = g_.mul(reset, g_.add(g_.slice(hz, 1, 2 * h, 3 * h), b_hn));
      const NodeId candidate = g_.tanh(g_.add(g_.slice(x, 1, 2 * h, 3 * h), recurrent));
      // h' = (1 - u) * n + u * h
      hidden = g_.add(candidate, g_.mul(update, g_.sub(hidden, candidate)));
    }
    finished.push_back(hidden);
    NodeId final_state = hidden;
    if (finished.size() > 1) {
      std::reverse(finished.begin(), finished.end());
      final_state = g_.concat(std::move(finished), 0);
    }
    return g_.dropout(final_state, config_.dropout, mode_, next_dropout_seed());
  }

  NodeId cnn(std::span<const TokenSequence> batch) {
    const std::size_t len = config_.sequence_length;
    std::vector<std::int32_t> ids;
    ids.reserve(batch.size() * len);
    for (const auto& s : batch) ids.insert(ids.end(), s.tokens.begin(), s.tokens.end());
    NodeId x = g_.embedding(weight("embedding"), std::move(ids), Shape{batch.size(), len});
    for (std::size_t i = 1; i <= 3; ++i) {
      const std::string conv = "conv" + std::to_string(i);
      const std::string bn = "bn" + std::to_string(i);
      x = g_.conv1d(x, weight(conv + ".kernel"));
      x = g_.batch_norm(x, weight(bn + ".gamma"), weight(bn + ".beta"), buffer(bn + ".running_mean"),
                        buffer(bn + ".running_var"), mode_);
      x = g_.relu(x);
      x = g_.dropout(x, config_.dropout, mode_, next_dropout_seed());
    }
    x = g_.adaptive_max_pool(x, config_.cnn_pool_length);
    return g_.reshape(x, Shape{batch.size(), config_.feature_dim()});
  }

  NodeId ann(std::span<const TokenSequence> batch) {
    const std::size_t len = config_.sequence_length;
    Tensor scaled(Shape{batch.size(), len});
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t j = 0; j < len; ++j) scaled[b * len + j] = batch[b].tokens[j] / 256.0;
    NodeId x = g_.constant(std::move(scaled));
    x = g_.relu(g_.add(g_.matmul(x, weight("fc1.W")), weight("fc1.b")));
    return g_.relu(g_.add(g_.matmul(x, weight("fc2.W")), weight("fc2.b")));
  }

  const ModelConfig& config_;
  const Parameters& params_;
  Mode mode_;
  std::uint64_t dropout_seed_;
  std::uint64_t dropout_layer_ = 0;
  Graph g_;
  std::map<std::string, NodeId> nodes_;
};

BuiltModel build_model(const ModelConfig& config, const Parameters& params, std::span<const TokenSequence> batch,
                       Mode mode, std::uint64_t dropout_seed) {
  config.validate();
  return ModelBuilder(config, params, mode, dropout_seed).build(batch);
}

void check_labels(std::size_t logits, std::span<const int> labels) {
  if (logits != labels.size())
    throw std::invalid_argument("loss: " + std::to_string(logits) + " logits but " + std::to_string(labels.size()) +
                                " labels");
  for (int y : labels)
    if (y != 0 && y != 1) throw std::invalid_argument("loss: label " + std::to_string(y) + " is not 0 or 1");
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::BiLSTM: return "lstm";
    case ModelKind::GRU: return "gru";
    case ModelKind::CNN: return "cnn";
    case ModelKind::ANN: return "ann";
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "lstm" || lower == "bilstm" || lower == "robomal") return ModelKind::BiLSTM;
  if (lower == "gru") return ModelKind::GRU;
  if (lower == "cnn") return ModelKind::CNN;
  if (lower == "ann") return ModelKind::ANN;
  throw std::invalid_argument("unknown model kind '" + std::string(name) + "' (expected lstm, gru, cnn or ann)");
}

ModelConfig ModelConfig::defaults(ModelKind kind) {
  ModelConfig c;
  c.kind = kind;
  switch (kind) {
    case ModelKind::BiLSTM: c.dropout = 0.0; break;
    case ModelKind::GRU: c.dropout = 0.30; break;
    case ModelKind::CNN: c.dropout = 0.20; break;
    case ModelKind::ANN: c.dropout = 0.0; break;
  }
  return c;
}

ModelConfig ModelConfig::with_sequence_length(std::size_t length) const {
  ModelConfig c = *this;
  c.sequence_length = length;
  c.ann_dims[0] = length;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw std::invalid_argument(std::string("model config: ") + what + " must be positive");
  };
  positive(embedding_dim, "embedding_dim");
  positive(hidden_units, "hidden_units");
  positive(vocab, "vocab");
  positive(sequence_length, "sequence_length");
  positive(cnn_kernel, "cnn_kernel");
  positive(cnn_pool_length, "cnn_pool_length");
  for (auto c : cnn_channels) positive(c, "cnn_channels");
  for (auto d : ann_dims) positive(d, "ann_dims");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model config: dropout must lie in [0, 1)");
  if (kind == ModelKind::BiLSTM && hidden_units % 2 != 0)
    throw std::invalid_argument("model config: BiLSTM hidden_units must split evenly across two directions");
  if (kind == ModelKind::CNN && sequence_length < 3 * (cnn_kernel - 1) + 1)
    throw std::invalid_argument("model config: sequence too short for three convolutions");
  if (kind == ModelKind::ANN && ann_dims[0] != sequence_length)
    throw std::invalid_argument("model config: ANN input width must equal sequence_length");
}

std::size_t ModelConfig::feature_dim() const {
  switch (kind) {
    case ModelKind::BiLSTM:
    case ModelKind::GRU: return hidden_units;
    case ModelKind::CNN: return cnn_channels[2] * cnn_pool_length;
    case ModelKind::ANN: return ann_dims[2];
  }
  return 0;
}

Parameters init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters p;
  std::map<std::string, double> bounds;  // uniform(-bound, bound) fill per weight
  auto uniform = [&](const std::string& name, Shape shape, double bound) {
    p.weights[name] = Tensor(shape);
    bounds[name] = bound;
  };
  auto matrix = [&](const std::string& name, std::size_t fan_in, Shape shape) {
    uniform(name, shape, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };
  auto zeros = [&](const std::string& name, Shape shape) { p.weights[name] = Tensor(shape); };

  const std::size_t e = config.embedding_dim;
  switch (config.kind) {
    case ModelKind::BiLSTM: {
      const std::size_t h = config.hidden_units / 2;
      uniform("embedding", Shape{config.vocab, e}, 1.0);
      for (const char* dir : {"lstm_fwd", "lstm_bwd"}) {
        matrix(std::string(dir) + ".W", h + e, Shape{h + e, 4 * h});
        zeros(std::string(dir) + ".b", Shape{4 * h});
      }
      break;
    }
    case ModelKind::GRU: {
      const std::size_t h = config.hidden_units;
      uniform("embedding", Shape{config.vocab, e}, 1.0);
      matrix("gru.W", h + e, Shape{h + e, 3 * h});
      zeros("gru.b", Shape{3 * h});
      zeros("gru.b_hn", Shape{h});
      break;
    }
    case ModelKind::CNN: {
      uniform("embedding", Shape{config.vocab, e}, 1.0);
      std::size_t cin = e;
      for (std::size_t i = 0; i < 3; ++i) {
        const std::string n = std::to_string(i + 1);
        const std::size_t cout = config.cnn_channels[i];
        matrix("conv" + n + ".kernel", config.cnn_kernel * cin, Shape{config.cnn_kernel, cin, cout});
        p.weights["bn" + n + ".gamma"] = Tensor(Shape{cout}, 1.0);
        zeros("bn" + n + ".beta", Shape{cout});
        p.buffers["bn" + n + ".running_mean"] = Tensor(Shape{cout});
        p.buffers["bn" + n + ".running_var"] = Tensor(Shape{cout}, 1.0);
        cin = cout;
      }
      break;
    }
    case ModelKind::ANN: {
      matrix("fc1.W", config.ann_dims[0], Shape{config.ann_dims[0], config.ann_dims[1]});
      zeros("fc1.b", Shape{config.ann_dims[1]});
      matrix("fc2.W", config.ann_dims[1], Shape{config.ann_dims[1], config.ann_dims[2]});
      zeros("fc2.b", Shape{config.ann_dims[2]});
      break;
    }
  }
  matrix("dense.W", config.feature_dim(), Shape{config.feature_dim(), 1});
  zeros("dense.b", Shape{1});

  // Random fill; each tensor draws from its own stream so adding a tensor
  // never perturbs the others.
  std::uint64_t stream = 0;
  for (const auto& [name, bound] : bounds) {
    Tensor& t = p.weights.at(name);
    Rng rng(derive_seed(seed, stream++));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  }
  return p;
}

ForwardOutput forward(const ModelConfig& config, const Parameters& params, std::span<const TokenSequence> batch,
                      Mode mode, std::uint64_t dropout_seed) {
  BuiltModel m = build_model(config, params, batch, mode, dropout_seed);
  evaluate(m.graph, {}, m.logits);
  const Tensor& logits = m.graph.value(m.logits);
  const Tensor& features = m.graph.value(m.features);
  const std::size_t width = features.shape()[1];
  ForwardOutput out;
  out.logits.resize(batch.size());
  out.features = Tensor(Shape{batch.size(), width});
  for (std::size_t r = 0; r < m.order.size(); ++r) {
    out.logits[m.order[r]] = logits[r];
    std::copy_n(features.ptr() + r * width, width, out.features.ptr() + m.order[r] * width);
  }
  return out;
}

double loss(std::span<const double> logits, std::span<const int> labels) {
  check_labels(logits.size(), labels);
  if (logits.empty()) throw std::invalid_argument("loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return total / static_cast<double>(logits.size());
}

TrainingStep loss_and_gradients(const ModelConfig& config, const Parameters& params,
                                std::span<const TokenSequence> batch, std::span<const int> labels, Mode mode,
                                std::uint64_t dropout_seed) {
  check_labels(batch.size(), labels);
  BuiltModel m = build_model(config, params, batch, mode, dropout_seed);
  Tensor y(Shape{batch.size()});
  for (std::size_t r = 0; r < m.order.size(); ++r) y[r] = labels[m.order[r]];
  const NodeId objective = m.graph.bce_with_logits(m.logits, m.graph.constant(std::move(y)));
  TrainingStep step;
  step.loss = evaluate(m.graph, {}, objective).item();
  step.grads = gradients(m.graph, objective);
  step.buffer_updates = m.graph.running_stat_updates();
  // weights unused by this batch still get a (zero) gradient entry
  for (const auto& [name, w] : params.weights)
    if (!step.grads.contains(name)) step.grads.emplace(name, Tensor(w.shape()));
  return step;
}

}  // namespace robomal
