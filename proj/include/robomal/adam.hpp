#ifndef ROBOMAL_ADAM_HPP
#define ROBOMAL_ADAM_HPP

#include "robomal/graph.hpp"

#include <cstdint>

namespace robomal {

/// Moment estimates and hyperparameters for Adam with decoupled weight decay.
struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t t = 0;
  TensorMap m;
  TensorMap v;
};

/// One optimizer step. `grads` must name exactly the tensors in `params`, with
/// matching shapes. Moments are created lazily as zeros on first use.
///
/// With weight decay, each parameter first shrinks by lr * weight_decay * param,
/// then receives the bias-corrected Adam delta.
void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state);

}  // namespace robomal

#endif  // ROBOMAL_ADAM_HPP
