#include "robomal/trainer.hpp"

#include "robomal/adam.hpp"
#include "robomal/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

namespace robomal {

TrainConfig TrainConfig::defaults(ModelKind kind, bool paper_scale) {
  TrainConfig c;
  c.model = ModelConfig::defaults(kind);
  switch (kind) {
    case ModelKind::BiLSTM: c.batch_size = 36; break;
    case ModelKind::GRU: c.batch_size = 44; break;
    case ModelKind::CNN:
    case ModelKind::ANN:
      c.batch_size = 32;
      c.weight_decay = 0.003;
      break;
  }
  c.max_steps = paper_scale ? paper_steps(kind) : kDeskSteps;
  return c;
}

std::size_t TrainConfig::paper_steps(ModelKind kind) {
  return kind == ModelKind::BiLSTM || kind == ModelKind::GRU ? 100000 : 50000;
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be at least 1");
  if (max_steps == 0) throw std::invalid_argument("train config: max_steps must be at least 1");
  if (folds < 2) throw std::invalid_argument("train config: need at least 2 folds");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train config: lr must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be non-negative");
}

// ---------------------------------------------------------------------------

FoldSplit FoldPlan::split(std::size_t i) const {
  if (i >= folds.size()) throw std::out_of_range("fold " + std::to_string(i) + " of " + std::to_string(k()));
  FoldSplit s;
  s.test = folds[i];
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != i) s.train.insert(s.train.end(), folds[f].begin(), folds[f].end());
  return s;
}

FoldPlan make_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be at least 2");
  if (n < k)
    throw std::invalid_argument("make_folds: " + std::to_string(n) + " samples cannot fill " + std::to_string(k) +
                                " folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  FoldPlan plan;
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    plan.folds.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(start + len));
    start += len;
  }
  return plan;
}

// ---------------------------------------------------------------------------

Checkpoint train(const TrainConfig& config, const Dataset& data, std::span<const std::size_t> train_indices,
                 std::size_t fold_index, const StepCallback& on_step) {
  config.validate();
  if (data.sequences.size() != data.labels.size())
    throw std::invalid_argument("dataset has " + std::to_string(data.sequences.size()) + " sequences and " +
                                std::to_string(data.labels.size()) + " labels");
  if (train_indices.empty()) throw std::invalid_argument("train: empty training split");
  bool has[2] = {false, false};
  for (std::size_t i : train_indices) {
    if (i >= data.size()) throw std::out_of_range("train: index " + std::to_string(i) + " outside dataset");
    has[data.labels[i] == 1] = true;
  }
  if (!has[0] || !has[1]) throw std::invalid_argument("train: training split holds a single class");

  const std::uint64_t seed = config.seed + fold_index;
  Checkpoint ckpt;
  ckpt.model = config.model;
  ckpt.params = init_params(config.model, derive_seed(seed, 1));
  ckpt.seed = seed;
  ckpt.batch_size = config.batch_size;
  ckpt.lr = config.lr;
  ckpt.weight_decay = config.weight_decay;

  AdamState adam;
  adam.lr = config.lr;
  adam.weight_decay = config.weight_decay;

  Rng order_rng(derive_seed(seed, 2));
  const std::uint64_t dropout_stream = derive_seed(seed, 3);
  std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
  std::size_t cursor = order.size();  // forces a shuffle before the first batch

  std::vector<TokenSequence> batch;
  std::vector<int> labels;
  double window_sum = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = 0; step < config.max_steps; ++step) {
    batch.clear();
    labels.clear();
    while (batch.size() < config.batch_size) {
      if (cursor == order.size()) {
        order_rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      batch.push_back(data.sequences[i]);
      labels.push_back(data.labels[i]);
    }
    TrainingStep ts = loss_and_gradients(config.model, ckpt.params, batch, labels, Mode::Train,
                                         derive_seed(dropout_stream, step));
    adam_step(ckpt.params.weights, ts.grads, adam);
    for (auto& [name, value] : ts.buffer_updates) ckpt.params.buffers.at(name) = std::move(value);

    ckpt.final_loss = ts.loss;
    window_sum += ts.loss;
    if (++window_n == kLossCurveStride || step + 1 == config.max_steps) {
      ckpt.loss_curve.push_back(window_sum / static_cast<double>(window_n));
      window_sum = 0.0;
      window_n = 0;
    }
    if (on_step) on_step(step, ts.loss);
  }
  ckpt.steps = config.max_steps;
  ckpt.optimizer_t = adam.t;
  return ckpt;
}

double sigmoid(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

int decide(double probability) { return probability >= 0.5 ? 1 : 0; }

std::vector<Prediction> evaluate_fold(const Checkpoint& ckpt, const Dataset& data,
                                      std::span<const std::size_t> test_indices) {
  constexpr std::size_t kEvalBatch = 64;
  std::vector<Prediction> out;
  out.reserve(test_indices.size());
  std::vector<TokenSequence> batch;
  for (std::size_t start = 0; start < test_indices.size(); start += kEvalBatch) {
    const std::size_t end = std::min(test_indices.size(), start + kEvalBatch);
    batch.clear();
    for (std::size_t j = start; j < end; ++j) batch.push_back(data.sequences.at(test_indices[j]));
    const ForwardOutput fo = forward(ckpt.model, ckpt.params, batch, Mode::Eval);
    for (std::size_t j = start; j < end; ++j) {
      Prediction p;
      p.index = test_indices[j];
      p.probability = sigmoid(fo.logits[j - start]);
      p.predicted = decide(p.probability);
      p.truth = data.labels.at(p.index);
      out.push_back(p);
    }
  }
  return out;
}

std::vector<FoldResult> cross_validate(const TrainConfig& config, const Dataset& data, const FoldPlan& plan,
                                       std::size_t jobs, const FoldCallback& on_fold) {
  config.validate();
  if (plan.k() < 2) throw std::invalid_argument("cross_validate: plan has fewer than 2 folds");
  std::vector<FoldResult> results(plan.k());
  std::atomic<std::size_t> next{0};
  std::mutex lock;
  std::exception_ptr failure;

  auto worker = [&] {
    for (std::size_t f = next++; f < plan.k(); f = next++) {
      try {
        const FoldSplit split = plan.split(f);
        FoldResult r;
        r.checkpoint = train(config, data, split.train, f);
        r.predictions = evaluate_fold(r.checkpoint, data, split.test);
        std::lock_guard guard(lock);
        results[f] = std::move(r);
        if (on_fold) on_fold(f, results[f]);
      } catch (...) {
        std::lock_guard guard(lock);
        if (!failure) failure = std::current_exception();
        next = plan.k();
      }
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, plan.k());
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

// ---------------------------------------------------------------------------
// Checkpoint files

namespace {

constexpr char kMagic[4] = {'R', 'M', 'C', 'K'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    if (n > in_.size() - pos_)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le(const char* what) {
    auto b = raw(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(b[i]) << (8 * i);
    return static_cast<T>(u);
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

nlohmann::json config_json(const ModelConfig& m) {
  return {{"kind", std::string(to_string(m.kind))},
          {"embedding_dim", m.embedding_dim},
          {"hidden_units", m.hidden_units},
          {"dropout", m.dropout},
          {"cnn_channels", m.cnn_channels},
          {"cnn_kernel", m.cnn_kernel},
          {"cnn_pool_length", m.cnn_pool_length},
          {"ann_dims", m.ann_dims},
          {"vocab", m.vocab},
          {"sequence_length", m.sequence_length}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.kind = parse_model_kind(j.at("kind").get<std::string>());
  m.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  m.hidden_units = j.at("hidden_units").get<std::size_t>();
  m.dropout = j.at("dropout").get<double>();
  m.cnn_channels = j.at("cnn_channels").get<std::array<std::size_t, 3>>();
  m.cnn_kernel = j.at("cnn_kernel").get<std::size_t>();
  m.cnn_pool_length = j.at("cnn_pool_length").get<std::size_t>();
  m.ann_dims = j.at("ann_dims").get<std::array<std::size_t, 3>>();
  m.vocab = j.at("vocab").get<std::size_t>();
  m.sequence_length = j.at("sequence_length").get<std::size_t>();
  return m;
}

nlohmann::json names_of(const TensorMap& m) {
  auto names = nlohmann::json::array();
  for (const auto& [name, t] : m) names.push_back(name);
  return names;
}

void write_block(Writer& w, const std::string& name, const Tensor& t) {
  w.le(static_cast<std::uint32_t>(name.size()));
  w.raw(name.data(), name.size());
  w.le(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t a = 0; a < t.rank(); ++a) w.le(static_cast<std::uint64_t>(t.shape()[a]));
  for (double v : t.data()) w.f64(v);
}

void read_blocks(Reader& r, const nlohmann::json& names, TensorMap& into) {
  constexpr std::uint32_t kMaxRank = Shape::kMaxRank;
  for (const auto& expected : names) {
    const auto name_len = r.le<std::uint32_t>("block name length");
    auto name_bytes = r.raw(name_len, "block name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    if (name != expected.get<std::string>())
      throw CheckpointError("checkpoint block '" + name + "' found where '" + expected.get<std::string>() +
                            "' was expected");
    const auto rank = r.le<std::uint32_t>("block rank");
    if (rank > kMaxRank) throw CheckpointError("checkpoint block '" + name + "' has rank " + std::to_string(rank));
    std::vector<std::size_t> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = static_cast<std::size_t>(r.le<std::uint64_t>("block dims"));
      if (d != 0 && numel > r.remaining() / d)
        throw CheckpointError("checkpoint block '" + name + "' is larger than the file");
      numel *= d;
    }
    if (numel > r.remaining() / 8) throw CheckpointError("checkpoint truncated inside block '" + name + "'");
    Tensor t(Shape(dims.begin(), dims.end()));
    for (double& v : t.data()) v = r.f64("block values");
    into.emplace(name, std::move(t));
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const nlohmann::json header = {{"model", config_json(ckpt.model)},
                                 {"seed", ckpt.seed},
                                 {"batch_size", ckpt.batch_size},
                                 {"lr", ckpt.lr},
                                 {"weight_decay", ckpt.weight_decay},
                                 {"steps", ckpt.steps},
                                 {"optimizer_t", ckpt.optimizer_t},
                                 {"final_loss", ckpt.final_loss},
                                 {"loss_curve_stride", kLossCurveStride},
                                 {"loss_curve", ckpt.loss_curve},
                                 {"weights", names_of(ckpt.params.weights)},
                                 {"buffers", names_of(ckpt.params.buffers)}};
  const std::string text = header.dump();
  Writer w;
  w.raw(kMagic, 4);
  w.le(Checkpoint::kVersion);
  w.le(static_cast<std::uint64_t>(text.size()));
  w.raw(text.data(), text.size());
  for (const auto& [name, t] : ckpt.params.weights) write_block(w, name, t);
  for (const auto& [name, t] : ckpt.params.buffers) write_block(w, name, t);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>("version");
  if (version != Checkpoint::kVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  const auto header_len = r.le<std::uint64_t>("header length");
  if (header_len > r.remaining()) throw CheckpointError("checkpoint truncated inside its header");
  auto text = r.raw(static_cast<std::size_t>(header_len), "header");

  Checkpoint c;
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text.begin(), text.end());
    c.model = config_from_json(h.at("model"));
    c.seed = h.at("seed").get<std::uint64_t>();
    c.batch_size = h.at("batch_size").get<std::size_t>();
    c.lr = h.at("lr").get<double>();
    c.weight_decay = h.at("weight_decay").get<double>();
    c.steps = h.at("steps").get<std::size_t>();
    c.optimizer_t = h.at("optimizer_t").get<std::uint64_t>();
    c.final_loss = h.at("final_loss").get<double>();
    c.loss_curve = h.at("loss_curve").get<std::vector<double>>();
    if (!h.at("weights").is_array() || !h.at("buffers").is_array()) throw CheckpointError("block lists missing");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  try {
    read_blocks(r, h["weights"], c.params.weights);
    read_blocks(r, h["buffers"], c.params.buffers);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint block list: ") + e.what());
  }
  if (r.remaining() != 0)
    throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");

  // the blocks must describe exactly the model the header names
  Parameters expected;
  try {
    expected = init_params(c.model, 0);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint model config is invalid: ") + e.what());
  }
  auto same_layout = [](const TensorMap& a, const TensorMap& b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end(), [](const auto& x, const auto& y) {
      return x.first == y.first && x.second.shape() == y.second.shape();
    });
  };
  if (!same_layout(c.params.weights, expected.weights) || !same_layout(c.params.buffers, expected.buffers))
    throw CheckpointError("checkpoint parameters do not match its model config");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace robomal
