#include "robomal/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace robomal {

void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " parameters but " +
                                std::to_string(grads.size()) + " gradients");
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + name + "'");
    if (!(it->second.shape() == p.shape()))
      throw std::invalid_argument("adam_step: gradient for '" + name + "' has shape " + it->second.shape().str() +
                                  ", parameter has " + p.shape().str());
  }

  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);

  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, p.shape());
    auto [vit, v_new] = state.v.try_emplace(name, p.shape());
    auto m = mit->second.array();
    auto v = vit->second.array();
    auto w = p.array();
    const auto ga = g.array();

    if (state.weight_decay > 0.0) w -= state.lr * state.weight_decay * w;
    m = state.beta1 * m + (1.0 - state.beta1) * ga;
    v = state.beta2 * v + (1.0 - state.beta2) * ga.square();
    w -= state.lr * (m / correction1) / ((v / correction2).sqrt() + state.eps);
  }
}

}  // namespace robomal
