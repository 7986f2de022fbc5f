#include "robomal/graph.hpp"

#include "robomal/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace robomal {

namespace {

using RowMatrix = Tensor::RowMatrix;

void add_into(Tensor& dst, const Tensor& src) { dst.array() += src.array(); }

Eigen::Map<const Eigen::RowVectorXd> row_vector(const Tensor& t) {
  return Eigen::Map<const Eigen::RowVectorXd>(t.ptr(), static_cast<Eigen::Index>(t.size()));
}

// Row t is x[t .. t+k) flattened: the k*cin inputs seen by output position t.
// Rows overlap, so this is an im2col matrix without the copy.
Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>> windows(const double* x, std::size_t out_len, std::size_t k,
                                                            std::size_t cin) {
  return {x, static_cast<Eigen::Index>(out_len), static_cast<Eigen::Index>(k * cin),
          Eigen::OuterStride<>(static_cast<Eigen::Index>(cin))};
}

// 1 / (1 + e^-x); saturates to exactly 0 or 1 instead of producing NaN.
template <typename In, typename Out>
void sigmoid_into(const In& x, Out&& y) {
  y = ((-x).exp() + 1.0).inverse();
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Embedding: return "embedding";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::MaxPool: return "max_pool";
    case OpKind::AdaptiveMaxPool: return "adaptive_max_pool";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Dropout: return "dropout";
    case OpKind::BceWithLogits: return "bce_with_logits";
    case OpKind::Sum: return "sum";
    case OpKind::Reshape: return "reshape";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(OpKind kind, std::vector<NodeId> inputs, Attr attr) {
  for (NodeId in : inputs) {
    if (in >= nodes_.size())
      throw GraphError(std::string(op_name(kind)) + ": input node " + std::to_string(in) + " does not exist");
  }
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.attr = std::move(attr);
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return nodes_.size() - 1;
}

NodeId Graph::input(std::string name) {
  NodeId id = push(OpKind::Input, {});
  nodes_[id].name = std::move(name);
  return id;
}

NodeId Graph::parameter(std::string name, Tensor value, bool trainable) {
  NodeId id = push(OpKind::Parameter, {});
  nodes_[id].name = std::move(name);
  nodes_[id].trainable = trainable;
  nodes_[id].value = std::move(value);
  return id;
}

NodeId Graph::constant(Tensor value) {
  NodeId id = push(OpKind::Constant, {});
  nodes_[id].value = std::move(value);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) { return push(OpKind::MatMul, {a, b}); }
NodeId Graph::add(NodeId a, NodeId b) { return push(OpKind::Add, {a, b}); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(OpKind::Sub, {a, b}); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(OpKind::Mul, {a, b}); }
NodeId Graph::sigmoid(NodeId x) { return push(OpKind::Sigmoid, {x}); }
NodeId Graph::tanh(NodeId x) { return push(OpKind::Tanh, {x}); }
NodeId Graph::relu(NodeId x) { return push(OpKind::Relu, {x}); }

NodeId Graph::concat(std::vector<NodeId> parts, std::size_t axis) {
  if (parts.empty()) throw GraphError("concat: no inputs");
  return push(OpKind::Concat, std::move(parts), ConcatAttr{axis});
}

NodeId Graph::slice(NodeId x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (begin >= end) throw GraphError("slice: empty range");
  return push(OpKind::Slice, {x}, SliceAttr{axis, begin, end});
}

NodeId Graph::embedding(NodeId table, std::vector<std::int32_t> ids, Shape index_shape) {
  if (index_shape.numel() != ids.size()) throw GraphError("embedding: ids do not fill index shape");
  if (index_shape.rank() >= Shape::kMaxRank) throw GraphError("embedding: index rank too large");
  return push(OpKind::Embedding, {table}, EmbeddingAttr{std::move(ids), index_shape});
}

NodeId Graph::conv1d(NodeId x, NodeId kernel) { return push(OpKind::Conv1d, {x, kernel}); }

NodeId Graph::max_pool(NodeId x, std::size_t window) {
  if (window == 0) throw GraphError("max_pool: window must be positive");
  return push(OpKind::MaxPool, {x}, PoolAttr{window});
}

NodeId Graph::adaptive_max_pool(NodeId x, std::size_t output_length) {
  if (output_length == 0) throw GraphError("adaptive_max_pool: output length must be positive");
  return push(OpKind::AdaptiveMaxPool, {x}, PoolAttr{output_length});
}

NodeId Graph::batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var, Mode mode,
                         double momentum, double eps) {
  return push(OpKind::BatchNorm, {x, gamma, beta, running_mean, running_var}, BatchNormAttr{mode, momentum, eps});
}

NodeId Graph::dropout(NodeId x, double p, Mode mode, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw GraphError("dropout: p must lie in [0, 1)");
  return push(OpKind::Dropout, {x}, DropoutAttr{p, mode, seed});
}

NodeId Graph::bce_with_logits(NodeId logits, NodeId labels) { return push(OpKind::BceWithLogits, {logits, labels}); }
NodeId Graph::sum(NodeId x) { return push(OpKind::Sum, {x}); }
NodeId Graph::reshape(NodeId x, Shape shape) { return push(OpKind::Reshape, {x}, ReshapeAttr{shape}); }

const Tensor& Graph::value(NodeId id) const {
  if (!evaluated_) throw GraphError("graph has not been evaluated");
  if (nodes_.at(id).released) fail(id, "value was released after evaluation");
  return nodes_[id].value;
}

void Graph::retain(NodeId id) { nodes_.at(id).retained = true; }

void Graph::fail(NodeId id, const std::string& what) const {
  const Node& n = nodes_[id];
  std::string label = "node " + std::to_string(id) + " (" + std::string(op_name(n.kind));
  if (!n.name.empty()) label += " '" + n.name + "'";
  throw GraphError(label + "): " + what);
}

TensorMap Graph::running_stat_updates() const {
  if (!evaluated_) throw GraphError("graph has not been evaluated");
  TensorMap out;
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::BatchNorm) continue;
    const auto& attr = std::get<BatchNormAttr>(n.attr);
    if (attr.mode != Mode::Train) continue;
    const Node& rm = nodes_[n.inputs[3]];
    const Node& rv = nodes_[n.inputs[4]];
    const std::size_t channels = rm.value.size();
    const double count = static_cast<double>(n.shape.numel() / channels);
    Tensor mean = rm.value;
    Tensor var = rv.value;
    for (std::size_t c = 0; c < channels; ++c) {
      const double batch_mean = n.stats[c];
      const double biased = n.stats[2 * channels + c];
      const double unbiased = count > 1 ? biased * count / (count - 1.0) : biased;
      mean[c] = (1.0 - attr.momentum) * mean[c] + attr.momentum * batch_mean;
      var[c] = (1.0 - attr.momentum) * var[c] + attr.momentum * unbiased;
    }
    out[rm.name] = std::move(mean);
    out[rv.name] = std::move(var);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

void Graph::forward_node(NodeId id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
      return;

    case OpKind::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        fail(id, "cannot multiply " + a.shape().str() + " by " + b.shape().str());
      const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
      n.value = Tensor::uninitialized(Shape{m, p});
      n.value.as_matrix(m, p).noalias() = a.as_matrix(m, k) * b.as_matrix(k, p);
      return;
    }

    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape() == b.shape()) {
        n.value = Tensor::uninitialized(a.shape());
        if (n.kind == OpKind::Add) n.value.array() = a.array() + b.array();
        else if (n.kind == OpKind::Sub) n.value.array() = a.array() - b.array();
        else n.value.array() = a.array() * b.array();
        return;
      }
      // row broadcast: b covers the trailing dims of a
      bool trailing = n.kind == OpKind::Add && b.rank() < a.rank() && b.size() > 0 && a.size() % b.size() == 0;
      for (std::size_t i = 0; trailing && i < b.rank(); ++i)
        trailing = b.shape()[i] == a.shape()[a.rank() - b.rank() + i];
      if (!trailing) fail(id, "shape mismatch " + a.shape().str() + " vs " + b.shape().str());
      const std::size_t cols = b.size(), rows = a.size() / cols;
      n.value = Tensor::uninitialized(a.shape());
      n.value.as_matrix(rows, cols) = a.as_matrix(rows, cols).rowwise() + row_vector(b);
      return;
    }

    case OpKind::Sigmoid: {
      n.value = Tensor::uninitialized(in(0).shape());
      sigmoid_into(in(0).array(), n.value.array());
      return;
    }

    case OpKind::Tanh: {
      // tanh(x) = 2 sigmoid(2x) - 1, keeps the vectorized exp path
      n.value = Tensor::uninitialized(in(0).shape());
      n.value.array() = 2.0 * ((-2.0 * in(0).array()).exp() + 1.0).inverse() - 1.0;
      return;
    }

    case OpKind::Relu: {
      n.value = Tensor::uninitialized(in(0).shape());
      n.value.array() = in(0).array().max(0.0);
      return;
    }

    case OpKind::Concat: {
      const auto axis = std::get<ConcatAttr>(n.attr).axis;
      const Shape& first = in(0).shape();
      if (axis >= first.rank()) fail(id, "axis out of range for " + first.str());
      std::size_t total = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Shape& s = in(i).shape();
        if (s.rank() != first.rank()) fail(id, "rank mismatch " + first.str() + " vs " + s.str());
        for (std::size_t d = 0; d < s.rank(); ++d)
          if (d != axis && s[d] != first[d]) fail(id, "shape mismatch " + first.str() + " vs " + s.str());
        total += s[axis];
      }
      const Shape out_shape = first.with(axis, total);
      const std::size_t outer = first.span_size(0, axis), inner = first.span_size(axis + 1, first.rank());
      n.value = Tensor::uninitialized(out_shape);
      double* dst = n.value.ptr();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const Tensor& t = in(i);
          const std::size_t block = t.shape()[axis] * inner;
          std::copy_n(t.ptr() + o * block, block, dst);
          dst += block;
        }
      }
      return;
    }

    case OpKind::Slice: {
      const auto& attr = std::get<SliceAttr>(n.attr);
      const Tensor& x = in(0);
      if (attr.axis >= x.rank() || attr.end > x.shape()[attr.axis])
        fail(id, "range [" + std::to_string(attr.begin) + "," + std::to_string(attr.end) + ") on axis " +
                     std::to_string(attr.axis) + " exceeds " + x.shape().str());
      const std::size_t outer = x.shape().span_size(0, attr.axis);
      const std::size_t inner = x.shape().span_size(attr.axis + 1, x.rank());
      const std::size_t src_block = x.shape()[attr.axis] * inner;
      const std::size_t len = (attr.end - attr.begin) * inner;
      n.value = Tensor::uninitialized(x.shape().with(attr.axis, attr.end - attr.begin));
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.ptr() + o * src_block + attr.begin * inner, len, n.value.ptr() + o * len);
      return;
    }

    case OpKind::Embedding: {
      const auto& attr = std::get<EmbeddingAttr>(n.attr);
      const Tensor& table = in(0);
      if (table.rank() != 2) fail(id, "table must be rank 2, got " + table.shape().str());
      const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
      Shape out_shape = attr.index_shape;
      std::vector<std::size_t> dims;
      for (std::size_t i = 0; i < out_shape.rank(); ++i) dims.push_back(out_shape[i]);
      dims.push_back(dim);
      n.value = Tensor::uninitialized(Shape(dims.begin(), dims.end()));
      for (std::size_t r = 0; r < attr.ids.size(); ++r) {
        const auto tok = attr.ids[r];
        if (tok < 0 || static_cast<std::size_t>(tok) >= vocab)
          fail(id, "token id " + std::to_string(tok) + " outside vocabulary of " + std::to_string(vocab));
        std::copy_n(table.ptr() + static_cast<std::size_t>(tok) * dim, dim, n.value.ptr() + r * dim);
      }
      return;
    }

    case OpKind::Conv1d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      if (x.rank() != 3 || w.rank() != 3 || x.shape()[2] != w.shape()[1])
        fail(id, "expected x [B,L,Cin] and kernel [K,Cin,Cout], got " + x.shape().str() + " and " + w.shape().str());
      const std::size_t batch = x.shape()[0], len = x.shape()[1], cin = x.shape()[2];
      const std::size_t k = w.shape()[0], cout = w.shape()[2];
      if (len < k) fail(id, "sequence length " + std::to_string(len) + " shorter than kernel " + std::to_string(k));
      const std::size_t out_len = len - k + 1;
      n.value = Tensor::uninitialized(Shape{batch, out_len, cout});
      const auto wm = w.as_matrix(k * cin, cout);
      for (std::size_t b = 0; b < batch; ++b) {
        auto out = Tensor::MatrixMap(n.value.ptr() + b * out_len * cout, out_len, cout);
        out.noalias() = windows(x.ptr() + b * len * cin, out_len, k, cin) * wm;
      }
      return;
    }

    case OpKind::MaxPool:
    case OpKind::AdaptiveMaxPool: {
      const Tensor& x = in(0);
      if (x.rank() != 3) fail(id, "expected [B,L,C], got " + x.shape().str());
      const std::size_t batch = x.shape()[0], len = x.shape()[1], ch = x.shape()[2];
      const std::size_t param = std::get<PoolAttr>(n.attr).size;
      const bool adaptive = n.kind == OpKind::AdaptiveMaxPool;
      const std::size_t out_len = adaptive ? param : len / param;
      if (out_len == 0 || len == 0) fail(id, "window " + std::to_string(param) + " exceeds length " + std::to_string(len));
      n.value = Tensor(Shape{batch, out_len, ch});
      n.argmax.assign(n.value.size(), 0);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < out_len; ++i) {
          const std::size_t start = adaptive ? (i * len) / out_len : i * param;
          const std::size_t stop = adaptive ? ((i + 1) * len + out_len - 1) / out_len : start + param;
          for (std::size_t c = 0; c < ch; ++c) {
            std::size_t best = (b * len + start) * ch + c;
            for (std::size_t t = start + 1; t < stop; ++t) {
              const std::size_t off = (b * len + t) * ch + c;
              if (x[off] > x[best]) best = off;
            }
            const std::size_t o = (b * out_len + i) * ch + c;
            n.value[o] = x[best];
            n.argmax[o] = best;
          }
        }
      }
      return;
    }

    case OpKind::BatchNorm: {
      const auto& attr = std::get<BatchNormAttr>(n.attr);
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      const Tensor& rmean = in(3);
      const Tensor& rvar = in(4);
      if (x.rank() < 2) fail(id, "expected rank >= 2 input, got " + x.shape().str());
      const std::size_t ch = x.shape().back();
      for (const Tensor* t : {&gamma, &beta, &rmean, &rvar})
        if (t->size() != ch) fail(id, "per-channel tensor of shape " + t->shape().str() + " for " + x.shape().str());
      const std::size_t rows = x.size() / ch;
      std::vector<double> mean(ch, 0.0), var(ch, 0.0);
      const double* xp = x.ptr();
      if (attr.mode == Mode::Train) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ch; ++c) mean[c] += xp[r * ch + c];
        for (double& m : mean) m /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ch; ++c) {
            const double d = xp[r * ch + c] - mean[c];
            var[c] += d * d;
          }
        for (double& v : var) v /= static_cast<double>(rows);
      } else {
        std::copy_n(rmean.ptr(), ch, mean.begin());
        std::copy_n(rvar.ptr(), ch, var.begin());
      }
      std::vector<double> inv_std(ch);
      for (std::size_t c = 0; c < ch; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + attr.eps);
      n.cache = Tensor::uninitialized(x.shape());
      n.value = Tensor::uninitialized(x.shape());
      double* xhat = n.cache.ptr();
      double* y = n.value.ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ch; ++c) {
          const std::size_t i = r * ch + c;
          xhat[i] = (xp[i] - mean[c]) * inv_std[c];
          y[i] = xhat[i] * gamma[c] + beta[c];
        }
      n.stats.assign(3 * ch, 0.0);
      for (std::size_t c = 0; c < ch; ++c) {
        n.stats[c] = mean[c];
        n.stats[ch + c] = inv_std[c];
        n.stats[2 * ch + c] = var[c];
      }
      return;
    }

    case OpKind::Dropout: {
      const auto& attr = std::get<DropoutAttr>(n.attr);
      const Tensor& x = in(0);
      n.value = x;
      if (attr.mode == Mode::Eval || attr.p == 0.0) {
        n.cache = Tensor(x.shape(), 1.0);
        return;
      }
      const double keep = 1.0 - attr.p;
      // counter-based draws: element i's fate depends only on (seed, i)
      n.cache = Tensor::uninitialized(x.shape());
      const double scale = 1.0 / keep;
      double* mask = n.cache.ptr();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = static_cast<double>(derive_seed(attr.seed, i) >> 11) * 0x1.0p-53;
        mask[i] = u < keep ? scale : 0.0;
      }
      n.value.array() *= n.cache.array();
      return;
    }

    case OpKind::BceWithLogits: {
      const Tensor& z = in(0);
      const Tensor& y = in(1);
      if (z.size() != y.size()) fail(id, "logits " + z.shape().str() + " vs labels " + y.shape().str());
      if (z.size() == 0) fail(id, "empty batch");
      double total = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (y[i] != 0.0 && y[i] != 1.0) fail(id, "label " + std::to_string(y[i]) + " is not 0 or 1");
        total += std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
      }
      n.value = Tensor::scalar(total / static_cast<double>(z.size()));
      return;
    }

    case OpKind::Sum:
      n.value = Tensor::scalar(in(0).array().sum());
      return;

    case OpKind::Reshape: {
      const auto& shape = std::get<ReshapeAttr>(n.attr).shape;
      if (shape.numel() != in(0).size()) fail(id, "cannot reshape " + in(0).shape().str() + " to " + shape.str());
      n.value = in(0);
      n.value.reshape(shape);
      return;
    }
  }
}

Tensor evaluate(Graph& graph, const TensorMap& inputs, NodeId output) {
  if (output >= graph.nodes_.size()) throw GraphError("output node " + std::to_string(output) + " does not exist");
  graph.evaluated_ = false;
  auto& nodes = graph.nodes_;
  // pending[x]: forward consumers of x still to run; keep[x]: never released
  std::vector<std::uint32_t> pending;
  std::vector<char> keep;
  if (graph.release_) {
    pending.assign(nodes.size(), 0);
    keep.assign(nodes.size(), 0);
    keep[output] = 1;
    for (NodeId id = 0; id < nodes.size(); ++id) {
      const auto& n = nodes[id];
      switch (n.kind) {
        case OpKind::Input:
        case OpKind::Parameter:
        case OpKind::Constant:
        case OpKind::Sigmoid:
        case OpKind::Tanh:
          keep[id] = 1;
          break;
        case OpKind::MatMul:
        case OpKind::Mul:
        case OpKind::Relu:
        case OpKind::Conv1d:
        case OpKind::BatchNorm:
        case OpKind::BceWithLogits:
          for (NodeId in : n.inputs) keep[in] = 1;
          break;
        default:
          break;
      }
      if (n.retained) keep[id] = 1;
      for (NodeId in : n.inputs) ++pending[in];
    }
  }
  for (NodeId id = 0; id < nodes.size(); ++id) {
    auto& n = nodes[id];
    n.released = false;
    if (n.kind == OpKind::Input) {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) graph.fail(id, "input is not bound");
      n.value = it->second;
    } else {
      graph.forward_node(id);
    }
    n.shape = n.value.shape();
    if (!graph.release_) continue;
    for (NodeId in : n.inputs) {
      if (--pending[in] == 0 && !keep[in]) {
        nodes[in].value = Tensor();
        nodes[in].released = true;
      }
    }
  }
  graph.evaluated_ = true;
  return graph.nodes_[output].value;
}

Tensor evaluate(Graph& graph, const TensorMap& inputs) {
  if (graph.size() == 0) throw GraphError("empty graph");
  return evaluate(graph, inputs, graph.size() - 1);
}

// ---------------------------------------------------------------------------
// Backward

void Graph::backward_node(NodeId id, const Tensor& g, std::vector<Tensor>& grads, std::vector<char>& has_grad,
                          const std::vector<char>& needs_grad) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
  auto shape_in = [&](std::size_t i) -> const Shape& { return nodes_[n.inputs[i]].shape; };
  // Returns the gradient slot of input i, or nullptr when it does not need one.
  auto slot = [&](std::size_t i) -> Tensor* {
    const NodeId src = n.inputs[i];
    if (!needs_grad[src]) return nullptr;
    if (!has_grad[src]) {
      grads[src] = Tensor(nodes_[src].shape);
      has_grad[src] = 1;
    }
    return &grads[src];
  };
  // Like slot, but a first contribution gets an unfilled buffer (fresh = true)
  // that the caller assigns instead of accumulating into.
  auto target = [&](std::size_t i) -> std::pair<Tensor*, bool> {
    const NodeId src = n.inputs[i];
    if (!needs_grad[src]) return {nullptr, false};
    if (has_grad[src]) return {&grads[src], false};
    grads[src] = Tensor::uninitialized(nodes_[src].shape);
    has_grad[src] = 1;
    return {&grads[src], true};
  };
  // Adds an elementwise expression over input i's elements to its gradient.
  auto accumulate = [&](std::size_t i, auto&& expr) {
    auto [d, fresh] = target(i);
    if (!d) return;
    if (fresh) d->array() = expr;
    else d->array() += expr;
  };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant:
      return;

    case OpKind::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
      auto gm = g.as_matrix(m, p);
      if (auto [da, fresh] = target(0); da) {
        if (fresh) da->as_matrix(m, k).noalias() = gm * b.as_matrix(k, p).transpose();
        else da->as_matrix(m, k).noalias() += gm * b.as_matrix(k, p).transpose();
      }
      if (auto [db, fresh] = target(1); db) {
        if (fresh) db->as_matrix(k, p).noalias() = a.as_matrix(m, k).transpose() * gm;
        else db->as_matrix(k, p).noalias() += a.as_matrix(m, k).transpose() * gm;
      }
      return;
    }

    case OpKind::Add:
    case OpKind::Sub: {
      const double sign = n.kind == OpKind::Add ? 1.0 : -1.0;
      accumulate(0, g.array());
      if (shape_in(1).numel() == g.size()) {
        accumulate(1, sign * g.array());
      } else if (Tensor* db = slot(1)) {
        const std::size_t cols = db->size(), rows = g.size() / cols;
        db->as_matrix(1, cols) += g.as_matrix(rows, cols).colwise().sum();
      }
      return;
    }

    case OpKind::Mul: {
      accumulate(0, g.array() * in(1).array());
      accumulate(1, g.array() * in(0).array());
      return;
    }

    case OpKind::Sigmoid: {
      const auto y = n.value.array();
      accumulate(0, g.array() * y * (1.0 - y));
      return;
    }

    case OpKind::Tanh: {
      const auto y = n.value.array();
      accumulate(0, g.array() * (1.0 - y.square()));
      return;
    }

    case OpKind::Relu: {
      accumulate(0, (in(0).array() > 0.0).select(g.array(), 0.0));
      return;
    }

    case OpKind::Concat: {
      const auto axis = std::get<ConcatAttr>(n.attr).axis;
      const Shape& shape = n.shape;
      const std::size_t outer = shape.span_size(0, axis), inner = shape.span_size(axis + 1, shape.rank());
      const std::size_t out_block = shape[axis] * inner;
      std::size_t offset = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const std::size_t block = shape_in(i)[axis] * inner;
        if (Tensor* dx = slot(i)) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.ptr() + o * out_block + offset;
            double* dst = dx->ptr() + o * block;
            for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
          }
        }
        offset += block;
      }
      return;
    }

    case OpKind::Slice: {
      const auto& attr = std::get<SliceAttr>(n.attr);
      Tensor* dx = slot(0);
      if (!dx) return;
      const Shape& xs = shape_in(0);
      const std::size_t outer = xs.span_size(0, attr.axis), inner = xs.span_size(attr.axis + 1, xs.rank());
      const std::size_t src_block = xs[attr.axis] * inner;
      const std::size_t len = (attr.end - attr.begin) * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        double* dst = dx->ptr() + o * src_block + attr.begin * inner;
        const double* src = g.ptr() + o * len;
        for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
      }
      return;
    }

    case OpKind::Embedding: {
      const auto& attr = std::get<EmbeddingAttr>(n.attr);
      Tensor* dt = slot(0);
      if (!dt) return;
      const std::size_t dim = shape_in(0)[1];
      for (std::size_t r = 0; r < attr.ids.size(); ++r) {
        double* dst = dt->ptr() + static_cast<std::size_t>(attr.ids[r]) * dim;
        const double* src = g.ptr() + r * dim;
        for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
      }
      return;
    }

    case OpKind::Conv1d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t batch = x.shape()[0], len = x.shape()[1], cin = x.shape()[2];
      const std::size_t k = w.shape()[0], cout = w.shape()[2];
      const std::size_t out_len = len - k + 1;
      Tensor* dx = slot(0);
      Tensor* dw = slot(1);
      const std::size_t span = k * cin;
      RowMatrix dcol;
      for (std::size_t b = 0; b < batch; ++b) {
        auto go = Tensor::ConstMatrixMap(g.ptr() + b * out_len * cout, out_len, cout);
        if (dw) dw->as_matrix(span, cout).noalias() += windows(x.ptr() + b * len * cin, out_len, k, cin).transpose() * go;
        if (dx) {
          // gradient per window, then fold overlapping windows back onto x
          dcol.noalias() = go * w.as_matrix(span, cout).transpose();
          double* base = dx->ptr() + b * len * cin;
          for (std::size_t t = 0; t < out_len; ++t)
            Eigen::Map<Eigen::ArrayXd>(base + t * cin, static_cast<Eigen::Index>(span)) += dcol.row(static_cast<Eigen::Index>(t)).array().transpose();
        }
      }
      return;
    }

    case OpKind::MaxPool:
    case OpKind::AdaptiveMaxPool: {
      Tensor* dx = slot(0);
      if (!dx) return;
      for (std::size_t o = 0; o < g.size(); ++o) (*dx)[n.argmax[o]] += g[o];
      return;
    }

    case OpKind::BatchNorm: {
      const auto& attr = std::get<BatchNormAttr>(n.attr);
      const std::size_t ch = n.shape.back();
      const std::size_t rows = n.shape.numel() / ch;
      const double* gp = g.ptr();
      const double* xhat = n.cache.ptr();
      const Tensor& gamma = in(1);
      std::vector<double> sum_g(ch, 0.0), sum_gx(ch, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ch; ++c) {
          sum_g[c] += gp[r * ch + c];
          sum_gx[c] += gp[r * ch + c] * xhat[r * ch + c];
        }
      if (Tensor* dgamma = slot(1))
        for (std::size_t c = 0; c < ch; ++c) (*dgamma)[c] += sum_gx[c];
      if (Tensor* dbeta = slot(2))
        for (std::size_t c = 0; c < ch; ++c) (*dbeta)[c] += sum_g[c];
      Tensor* dx = slot(0);
      if (!dx) return;
      double* dxp = dx->ptr();
      std::vector<double> scale(ch);
      for (std::size_t c = 0; c < ch; ++c) scale[c] = gamma[c] * n.stats[ch + c];
      if (attr.mode == Mode::Eval) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ch; ++c) dxp[r * ch + c] += gp[r * ch + c] * scale[c];
        return;
      }
      // dx = gamma * inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
      const double count = static_cast<double>(rows);
      for (double& v : scale) v /= count;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ch; ++c) {
          const std::size_t i = r * ch + c;
          dxp[i] += scale[c] * (count * gp[i] - sum_g[c] - xhat[i] * sum_gx[c]);
        }
      return;
    }

    case OpKind::Dropout: {
      accumulate(0, g.array() * n.cache.array());
      return;
    }

    case OpKind::BceWithLogits: {
      const Tensor& z = in(0);
      const Tensor& y = in(1);
      const double scale = g.item() / static_cast<double>(z.size());
      if (Tensor* dz = slot(0)) {
        Tensor s(z.shape());
        sigmoid_into(z.array(), s.array());
        dz->array() += scale * (s.array() - y.array());
      }
      // labels are treated as data; no gradient flows to them
      return;
    }

    case OpKind::Sum: {
      if (Tensor* dx = slot(0)) dx->array() += g.item();
      return;
    }

    case OpKind::Reshape: {
      accumulate(0, g.array());
      return;
    }
  }
}

TensorMap gradients(Graph& graph, NodeId output) {
  if (!graph.evaluated_) throw GraphError("gradients requested before evaluate");
  if (output >= graph.nodes_.size()) throw GraphError("output node " + std::to_string(output) + " does not exist");
  if (graph.nodes_[output].released) graph.fail(output, "value was released after evaluation");
  const Tensor& out = graph.nodes_[output].value;
  if (out.size() != 1) graph.fail(output, "gradient output must be scalar, got " + out.shape().str());

  const std::size_t count = graph.nodes_.size();
  std::vector<char> needs_grad(count, 0);
  for (NodeId id = 0; id < count; ++id) {
    const auto& n = graph.nodes_[id];
    if (n.kind == OpKind::Parameter) {
      needs_grad[id] = n.trainable;
      continue;
    }
    if (n.kind == OpKind::BceWithLogits) {
      needs_grad[id] = needs_grad[n.inputs[0]];
      continue;
    }
    for (NodeId in : n.inputs) needs_grad[id] |= needs_grad[in];
  }

  std::vector<Tensor> grads(count);
  std::vector<char> has_grad(count, 0);
  grads[output] = Tensor(out.shape(), 1.0);
  has_grad[output] = 1;
  for (NodeId id = output + 1; id-- > 0;) {
    if (!has_grad[id] || !needs_grad[id]) continue;
    graph.backward_node(id, grads[id], grads, has_grad, needs_grad);
    if (graph.nodes_[id].kind != OpKind::Parameter) grads[id] = Tensor();  // release intermediate
  }

  TensorMap result;
  for (NodeId id = 0; id < count; ++id) {
    const auto& n = graph.nodes_[id];
    if (n.kind != OpKind::Parameter || !n.trainable) continue;
    Tensor g = has_grad[id] ? std::move(grads[id]) : Tensor(n.shape);
    auto [it, inserted] = result.emplace(n.name, g);
    if (!inserted) {
      if (!(it->second.shape() == g.shape())) throw GraphError("parameter '" + n.name + "' bound with two shapes");
      add_into(it->second, g);
    }
  }
  return result;
}

}  // namespace robomal
