#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "shuffle_former/model.hpp"
#include "shuffle_former/optim.hpp"

namespace shuffle_former {

// Images stored as one (N, C, H, W) float block.
struct ToyDataset {
  std::int64_t samples = 0;
  std::int64_t channels = 3;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  Tensor<float> batch() const;
};

// Each class gets a random prototype image; a sample is its prototype plus
// Gaussian noise of std `noise`. Labels cycle 0..classes-1.
ToyDataset make_synthetic_dataset(std::int64_t samples, std::int64_t classes, std::int64_t height,
                                  std::int64_t width, std::uint64_t seed, double noise = 1.0);

// C=32, depths {2,2}, M=2 on 32x32 inputs (8x8 then 4x4 token grids), 8 classes.
ModelConfig toy_model_config();

struct TrainOptions {
  std::int64_t steps = 500;
  OptimizerConfig optimizer{UpdateRule::adamw, 1e-3, 0.9, 0.9, 0.999, 1e-8, 0.05};
  // Stop once the step's train accuracy reaches this; negative runs every step.
  double target_accuracy = -1.0;
};

struct TrainRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // train-mode forward of this step, before the update
};

struct TrainResult {
  std::vector<TrainRecord> history;
  double train_accuracy = 0.0;  // last recorded step
  double eval_accuracy = 0.0;   // eval-mode pass after training
  bool diverged = false;
  std::int64_t diverged_step = -1;
};

double accuracy(const Tensor<float>& logits, const std::vector<int>& labels);

// Full-batch training. A non-finite loss stops the run and records the step.
TrainResult train_toy(ShuffleTransformer<float>& model, const ToyDataset& data, const TrainOptions& options,
                      const std::function<void(const TrainRecord&)>& on_step = {});

}  // namespace shuffle_former
