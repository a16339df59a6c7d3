#include <cmath>

#include "doctest.h"
#include "shuffle_former/train.hpp"

using namespace shuffle_former;

namespace {

ModelConfig small_toy() {
  auto c = toy_model_config();
  c.embed_dim = 16;
  c.head_dim = 8;
  c.img_size = 16;
  return c;
}

std::vector<std::vector<float>> snapshot(const ShuffleTransformer<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.push_back(p.values());
  return out;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("synthetic dataset") {
  const auto a = make_synthetic_dataset(32, 8, 16, 16, 5);
  const auto b = make_synthetic_dataset(32, 8, 16, 16, 5);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.batch().shape() == Shape{32, 3, 16, 16});
  for (int k = 0; k < 8; ++k) CHECK(std::count(a.labels.begin(), a.labels.end(), k) == 4);
  CHECK(make_synthetic_dataset(32, 8, 16, 16, 6).images != a.images);
  CHECK_THROWS_AS(make_synthetic_dataset(0, 8, 16, 16, 5), ConfigError);
}

TEST_CASE("toy config is valid for its resolution") {
  const auto c = toy_model_config();
  CHECK_NOTHROW(c.validate());
  CHECK_NOTHROW(c.check_resolution(c.img_size, c.img_size));
  CHECK(c.embed_dim == 32);
  CHECK(c.depths == std::vector<std::int64_t>{2, 2});
}

TEST_CASE("accuracy helper") {
  auto logits = Tensor<float>::from_data({3, 2}, {1, 0, 0, 1, 2, 3});
  CHECK(accuracy(logits, {0, 1, 0}) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  ShuffleTransformer<float> model(small_toy(), 3);
  const auto before = snapshot(model);
  const auto data = make_synthetic_dataset(8, 8, 16, 16, 1);
  TrainOptions opts;
  opts.steps = 3;
  opts.optimizer.lr = 0.0;
  const auto r = train_toy(model, data, opts);
  CHECK(r.history.size() == 3);
  CHECK(snapshot(model) == before);
}

TEST_CASE("same seed gives identical loss curves, and loss falls") {
  auto run = [] {
    ShuffleTransformer<float> model(small_toy(), 4);
    const auto data = make_synthetic_dataset(16, 8, 16, 16, 2);
    TrainOptions opts;
    opts.steps = 12;
    std::vector<double> losses;
    for (const auto& rec : train_toy(model, data, opts).history) losses.push_back(rec.loss);
    return losses;
  };
  const auto a = run();
  CHECK(a == run());
  REQUIRE(a.size() == 12);
  const double first = (a[0] + a[1] + a[2]) / 3, last = (a[9] + a[10] + a[11]) / 3;
  CHECK(last < first);
}

TEST_CASE("divergence is reported with the step index") {
  ShuffleTransformer<float> model(small_toy(), 5);
  const auto data = make_synthetic_dataset(8, 8, 16, 16, 3);
  model.head_weight().mutable_data()[0] = NAN;
  TrainOptions opts;
  opts.steps = 5;
  const auto r = train_toy(model, data, opts);
  CHECK(r.diverged);
  CHECK(r.diverged_step == 0);
  CHECK(r.history.empty());
}

TEST_CASE("target accuracy stops early") {
  ShuffleTransformer<float> model(small_toy(), 6);
  const auto data = make_synthetic_dataset(16, 8, 16, 16, 4);
  TrainOptions opts;
  opts.steps = 200;
  opts.target_accuracy = 0.95;
  const auto r = train_toy(model, data, opts);
  CHECK_FALSE(r.diverged);
  CHECK(r.train_accuracy >= 0.95);
  CHECK(r.history.size() < 200);
}

}
