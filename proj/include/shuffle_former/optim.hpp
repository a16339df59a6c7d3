#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "shuffle_former/tensor.hpp"

namespace shuffle_former {

enum class UpdateRule { sgd_momentum, adamw };

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::adamw;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;
  double eps = 1e-8;
  // Coupled (added to the gradient) for sgd, decoupled for adamw.
  double weight_decay = 0.0;
};

template <typename T>
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> first;   // momentum buffer / Adam m
  std::vector<std::vector<T>> second;  // Adam v
};

// One update of every parameter in place.
//
//   sgd-momentum: v <- mu v + (g + wd p);  p <- p - lr v
//   adamw:        p <- p - lr wd p;  m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//                 p <- p - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
//
// An empty gradient is treated as zero.
template <typename T>
void optimizer_step(std::span<Tensor<T>> params, std::span<const std::vector<T>> grads,
                    OptimizerState<T>& state, const OptimizerConfig& config);

}  // namespace shuffle_former
