#ifndef ROBOMAL_TRAINER_HPP
#define ROBOMAL_TRAINER_HPP

#include "robomal/models.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace robomal {

inline constexpr std::size_t kDeskSteps = 5000;
inline constexpr std::size_t kLossCurveStride = 10;

struct TrainConfig {
  ModelConfig model;
  std::size_t batch_size = 36;
  std::size_t max_steps = kDeskSteps;
  double lr = 0.001;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t folds = 10;

  /// Published batch size, decay and step budget for `kind`; desk-scale
  /// step count unless `paper_scale`.
  static TrainConfig defaults(ModelKind kind, bool paper_scale = false);
  static std::size_t paper_steps(ModelKind kind);
  void validate() const;
};

struct Dataset {
  std::vector<TokenSequence> sequences;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;

  std::size_t k() const { return folds.size(); }
  /// Test indices are fold i; training indices are every other fold, in order.
  FoldSplit split(std::size_t i) const;
  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

/// Seeded shuffle of 0..n-1 cut into k contiguous folds whose sizes differ by
/// at most one. Throws when n < k or k < 2.
FoldPlan make_folds(std::size_t n, std::size_t k, std::uint64_t seed);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model;
  Parameters params;
  std::uint64_t seed = 0;  // effective training seed
  std::size_t batch_size = 0;
  double lr = 0.0;
  double weight_decay = 0.0;
  std::size_t steps = 0;           // gradient updates performed
  std::uint64_t optimizer_t = 0;   // Adam step counter after training
  double final_loss = 0.0;         // loss of the last mini-batch
  std::vector<double> loss_curve;  // mean loss of each kLossCurveStride-step window

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// Trains a fresh model on data[train_indices] for config.max_steps Adam
/// updates. Mini-batches are consecutive slices of a seeded permutation that
/// is redrawn whenever it runs out. Every random stream derives from
/// config.seed + fold_index.
Checkpoint train(const TrainConfig& config, const Dataset& data, std::span<const std::size_t> train_indices,
                 std::size_t fold_index = 0, const StepCallback& on_step = {});

struct Prediction {
  std::size_t index = 0;  // position in the dataset
  double probability = 0.0;
  int predicted = 0;
  int truth = 0;
};

/// Decision rule: malware when sigmoid(logit) >= 0.5.
int decide(double probability);
double sigmoid(double logit);

std::vector<Prediction> evaluate_fold(const Checkpoint& ckpt, const Dataset& data,
                                      std::span<const std::size_t> test_indices);

struct FoldResult {
  Checkpoint checkpoint;
  std::vector<Prediction> predictions;
};

using FoldCallback = std::function<void(std::size_t fold, const FoldResult& result)>;

/// Trains and evaluates every fold of `plan`, up to `jobs` folds at a time.
/// Fold i trains with seed config.seed + i, so results do not depend on `jobs`.
/// `on_fold` is called under a lock as folds finish.
std::vector<FoldResult> cross_validate(const TrainConfig& config, const Dataset& data, const FoldPlan& plan,
                                       std::size_t jobs = 1, const FoldCallback& on_fold = {});

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace robomal

#endif  // ROBOMAL_TRAINER_HPP
