#include "shuffle_former/train.hpp"

#include <cmath>

namespace shuffle_former {

Tensor<float> ToyDataset::batch() const {
  return Tensor<float>::from_data({samples, channels, height, width}, images);
}

ToyDataset make_synthetic_dataset(std::int64_t samples, std::int64_t classes, std::int64_t height,
                                  std::int64_t width, std::uint64_t seed, double noise) {
  if (samples <= 0 || classes <= 0) throw ConfigError("dataset needs positive samples and classes");
  ToyDataset d;
  d.samples = samples;
  d.height = height;
  d.width = width;
  d.classes = classes;
  const std::int64_t per = d.channels * height * width;
  shape_numel({samples, d.channels, height, width});

  Rng rng(seed);
  std::vector<float> protos(static_cast<std::size_t>(classes * per));
  for (auto& v : protos) v = static_cast<float>(rng.normal());
  d.images.resize(static_cast<std::size_t>(samples * per));
  for (std::int64_t i = 0; i < samples; ++i) {
    const int label = static_cast<int>(i % classes);
    d.labels.push_back(label);
    for (std::int64_t k = 0; k < per; ++k) {
      d.images[static_cast<std::size_t>(i * per + k)] =
          protos[static_cast<std::size_t>(label * per + k)] + static_cast<float>(noise * rng.normal());
    }
  }
  return d;
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.name = "toy";
  c.embed_dim = 32;
  c.depths = {2, 2};
  c.window = 2;
  c.num_classes = 8;
  c.img_size = 32;
  c.even_rule = EvenKernelRule::same_asymmetric;
  return c;
}

double accuracy(const Tensor<float>& logits, const std::vector<int>& labels) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  const auto& v = logits.values();
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < k; ++j) {
      if (v[static_cast<std::size_t>(i * k + j)] > v[static_cast<std::size_t>(i * k + best)]) best = j;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

TrainResult train_toy(ShuffleTransformer<float>& model, const ToyDataset& data, const TrainOptions& options,
                      const std::function<void(const TrainRecord&)>& on_step) {
  const auto images = data.batch();
  model.set_requires_grad(true);
  auto params = model.parameters();
  OptimizerState<float> state;
  TrainResult result;

  for (std::int64_t step = 0; step < options.steps; ++step) {
    for (auto& p : params) p.zero_grad();
    TrainRecord rec;
    rec.step = step;
    {
      const auto logits = model.forward(images, NormMode::train);
      const auto loss = cross_entropy(logits, data.labels);
      rec.loss = loss.item();
      if (!std::isfinite(rec.loss)) {
        result.diverged = true;
        result.diverged_step = step;
        break;
      }
      rec.accuracy = accuracy(logits, data.labels);
      backward(loss);
    }
    result.history.push_back(rec);
    if (on_step) on_step(rec);
    if (options.target_accuracy >= 0 && rec.accuracy >= options.target_accuracy) break;

    std::vector<std::vector<float>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
      const auto g = p.grad();
      grads.emplace_back(g.begin(), g.end());
    }
    optimizer_step<float>(params, grads, state, options.optimizer);
  }

  if (!result.history.empty()) result.train_accuracy = result.history.back().accuracy;
  if (!result.diverged) {
    const auto logits = model.forward(images, NormMode::eval);
    result.eval_accuracy = accuracy(logits, data.labels);
  }
  return result;
}

}  // namespace shuffle_former
