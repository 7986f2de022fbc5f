#ifndef ROBOMAL_MODELS_HPP
#define ROBOMAL_MODELS_HPP

#include "robomal/featurize.hpp"
#include "robomal/graph.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace robomal {

enum class ModelKind { BiLSTM, GRU, CNN, ANN };

std::string_view to_string(ModelKind kind);
/// Accepts lstm/bilstm/robomal, gru, cnn, ann (case-insensitive).
ModelKind parse_model_kind(std::string_view name);

/// Architecture description. defaults() gives the published sizes per kind.
struct ModelConfig {
  ModelKind kind = ModelKind::BiLSTM;
  std::size_t embedding_dim = 16;
  std::size_t hidden_units = 16;  // split evenly across directions for BiLSTM
  double dropout = 0.0;
  std::array<std::size_t, 3> cnn_channels{8, 16, 16};
  std::size_t cnn_kernel = 7;
  std::size_t cnn_pool_length = 30;
  std::array<std::size_t, 3> ann_dims{2000, 200, 200};
  std::size_t vocab = kVocabSize;
  std::size_t sequence_length = kSequenceCap;

  static ModelConfig defaults(ModelKind kind);
  /// Same architecture over shorter sequences (ANN input width follows).
  ModelConfig with_sequence_length(std::size_t length) const;
  void validate() const;
  /// Width of the pooled representation fed to the output layer.
  std::size_t feature_dim() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Trainable weights plus non-trainable state (batch-norm running statistics).
struct Parameters {
  TensorMap weights;
  TensorMap buffers;

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

Parameters init_params(const ModelConfig& config, std::uint64_t seed);

struct ForwardOutput {
  std::vector<double> logits;  // one per sample, in batch order
  Tensor features;             // [batch, feature_dim], in batch order
};

ForwardOutput forward(const ModelConfig& config, const Parameters& params, std::span<const TokenSequence> batch,
                      Mode mode, std::uint64_t dropout_seed = 0);

/// Mean binary cross entropy with logits: max(z,0) - z*y + log(1 + e^-|z|).
double loss(std::span<const double> logits, std::span<const int> labels);

struct TrainingStep {
  double loss = 0.0;
  TensorMap grads;           // keyed like Parameters::weights
  TensorMap buffer_updates;  // new running statistics (train mode only)
};

/// Forward pass, batch loss and reverse-mode gradients for one mini-batch.
TrainingStep loss_and_gradients(const ModelConfig& config, const Parameters& params,
                                std::span<const TokenSequence> batch, std::span<const int> labels, Mode mode,
                                std::uint64_t dropout_seed);

}  // namespace robomal

#endif  // ROBOMAL_MODELS_HPP
