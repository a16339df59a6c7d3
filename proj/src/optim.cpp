#include "shuffle_former/optim.hpp"

#include <cmath>
#include <string>

namespace shuffle_former {

template <typename T>
void optimizer_step(std::span<Tensor<T>> params, std::span<const std::vector<T>> grads,
                    OptimizerState<T>& state, const OptimizerConfig& config) {
  if (params.size() != grads.size()) {
    throw CallError(std::to_string(params.size()) + " parameters but " +
                    std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && grads[i].size() != static_cast<std::size_t>(params[i].numel())) {
      throw CallError("gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                      " values for parameter of shape " + shape_str(params[i].shape()));
    }
  }
  if (state.first.empty()) {
    state.first.resize(params.size());
    state.second.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first[i].assign(static_cast<std::size_t>(params[i].numel()), T(0));
      if (config.rule == UpdateRule::adamw) {
        state.second[i].assign(static_cast<std::size_t>(params[i].numel()), T(0));
      }
    }
  } else if (state.first.size() != params.size()) {
    throw CallError("optimizer state was built for a different parameter list");
  }
  ++state.step;

  const T lr = static_cast<T>(config.lr);
  const T wd = static_cast<T>(config.weight_decay);
  if (config.rule == UpdateRule::sgd_momentum) {
    const T mu = static_cast<T>(config.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].mutable_data();
      auto& v = state.first[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T g = (grads[i].empty() ? T(0) : grads[i][j]) + wd * p[j];
        v[j] = mu * v[j] + g;
        p[j] -= lr * v[j];
      }
    }
    return;
  }

  const double b1 = config.beta1, b2 = config.beta2;
  const auto t = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(b1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(b2, t));
  const T eps = static_cast<T>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T g = grads[i].empty() ? T(0) : grads[i][j];
      p[j] -= lr * wd * p[j];
      m[j] = static_cast<T>(b1) * m[j] + static_cast<T>(1.0 - b1) * g;
      v[j] = static_cast<T>(b2) * v[j] + static_cast<T>(1.0 - b2) * g * g;
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

template void optimizer_step(std::span<Tensor<float>>, std::span<const std::vector<float>>,
                             OptimizerState<float>&, const OptimizerConfig&);
template void optimizer_step(std::span<Tensor<double>>, std::span<const std::vector<double>>,
                             OptimizerState<double>&, const OptimizerConfig&);

}  // namespace shuffle_former
