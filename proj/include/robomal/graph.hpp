#ifndef ROBOMAL_GRAPH_HPP
#define ROBOMAL_GRAPH_HPP

#include "robomal/tensor.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace robomal {

using NodeId = std::size_t;
using TensorMap = std::map<std::string, Tensor>;

/// The closed set of operations a Graph can hold.
enum class OpKind {
  Input,
  Parameter,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Sigmoid,
  Tanh,
  Relu,
  Concat,
  Slice,
  Embedding,
  Conv1d,
  MaxPool,
  AdaptiveMaxPool,
  BatchNorm,
  Dropout,
  BceWithLogits,
  Sum,
  Reshape,
};

std::string_view op_name(OpKind kind);

enum class Mode { Train, Eval };

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A recorded computation over tensors, evaluated forward and differentiated
/// in reverse. Node ids are assigned in insertion order, so every node's
/// inputs precede it.
///
/// Layout conventions: matmul works on rank-2 tensors; sequence ops
/// (conv1d, pooling) take [batch, length, channels]; batch norm normalizes
/// the last axis over all leading positions.
class Graph {
 public:
  NodeId input(std::string name);
  NodeId parameter(std::string name, Tensor value, bool trainable = true);
  NodeId constant(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  /// Elementwise add; `b` may also match the trailing dims of `a` (row broadcast).
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId sigmoid(NodeId x);
  NodeId tanh(NodeId x);
  NodeId relu(NodeId x);
  NodeId concat(std::vector<NodeId> parts, std::size_t axis);
  NodeId slice(NodeId x, std::size_t axis, std::size_t begin, std::size_t end);
  /// Gathers rows of `table` ([vocab, dim]); output shape is index_shape + [dim].
  NodeId embedding(NodeId table, std::vector<std::int32_t> ids, Shape index_shape);
  /// Valid, stride-1 convolution. x: [B, L, Cin], kernel: [K, Cin, Cout].
  NodeId conv1d(NodeId x, NodeId kernel);
  /// Non-overlapping max pool along the length axis; trailing remainder dropped.
  NodeId max_pool(NodeId x, std::size_t window);
  /// Max pool along the length axis to exactly `output_length` bins.
  NodeId adaptive_max_pool(NodeId x, std::size_t output_length);
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var, Mode mode,
                    double momentum = 0.1, double eps = 1e-5);
  /// Inverted dropout: kept units are scaled by 1/(1-p) in train mode; identity in eval mode.
  NodeId dropout(NodeId x, double p, Mode mode, std::uint64_t seed);
  /// Mean binary cross entropy of logits against 0/1 labels (same element count).
  NodeId bce_with_logits(NodeId logits, NodeId labels);
  NodeId sum(NodeId x);
  NodeId reshape(NodeId x, Shape shape);

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& inputs_of(NodeId id) const { return nodes_.at(id).inputs; }
  /// Value computed by the last evaluate. Throws for a released intermediate.
  const Tensor& value(NodeId id) const;
  /// Keeps a node's value readable after evaluate when intermediates are released.
  void retain(NodeId id);
  /// When on, evaluate frees each intermediate once its forward consumers
  /// have run, unless gradients() will read it. Shapes are always kept.
  void release_intermediates(bool on) { release_ = on; }
  bool evaluated() const { return evaluated_; }

  /// New running mean/variance for every train-mode batch-norm node, keyed by
  /// the running-stat parameter names. Valid after evaluate.
  TensorMap running_stat_updates() const;

  friend Tensor evaluate(Graph& graph, const TensorMap& inputs, NodeId output);
  friend TensorMap gradients(Graph& graph, NodeId output);

 private:
  struct SliceAttr {
    std::size_t axis, begin, end;
  };
  struct ConcatAttr {
    std::size_t axis;
  };
  struct EmbeddingAttr {
    std::vector<std::int32_t> ids;
    Shape index_shape;
  };
  struct PoolAttr {
    std::size_t size;
  };
  struct BatchNormAttr {
    Mode mode;
    double momentum, eps;
  };
  struct DropoutAttr {
    double p;
    Mode mode;
    std::uint64_t seed;
  };
  struct ReshapeAttr {
    Shape shape;
  };
  using Attr = std::variant<std::monostate, SliceAttr, ConcatAttr, EmbeddingAttr, PoolAttr, BatchNormAttr, DropoutAttr,
                            ReshapeAttr>;

  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Attr attr;
    std::string name;
    bool trainable = false;
    Tensor value;
    Shape shape;  // of value, kept after the value is released
    bool retained = false;
    bool released = false;
    Tensor cache;                       // dropout mask, batch-norm xhat
    std::vector<double> stats;          // batch-norm mean, inv_std, biased var per channel
    std::vector<std::size_t> argmax;    // pooling winners (flat input offsets)
  };

  NodeId push(OpKind kind, std::vector<NodeId> inputs, Attr attr = {});
  void forward_node(NodeId id);
  void backward_node(NodeId id, const Tensor& grad, std::vector<Tensor>& grads, std::vector<char>& has_grad,
                     const std::vector<char>& needs_grad);
  [[noreturn]] void fail(NodeId id, const std::string& what) const;

  std::vector<Node> nodes_;
  bool evaluated_ = false;
  bool release_ = false;
};

/// Runs every node in order with the named inputs bound; returns the value of `output`.
Tensor evaluate(Graph& graph, const TensorMap& inputs, NodeId output);
/// Same, returning the last node's value.
Tensor evaluate(Graph& graph, const TensorMap& inputs = {});

/// Reverse-mode gradients of a scalar node with respect to every trainable
/// parameter, keyed by parameter name.
TensorMap gradients(Graph& graph, NodeId output);

}  // namespace robomal

#endif  // ROBOMAL_GRAPH_HPP
