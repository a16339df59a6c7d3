#include <chrono>
#include <cmath>

#include "doctest.h"
#include "shuffle_former/cost.hpp"
#include "shuffle_former/model.hpp"
#include "test_support.hpp"

using namespace shuffle_former;
using sf_test::max_abs_diff;
using sf_test::random_tensor;
using In = std::vector<Tensor<double>>;

namespace {

BlockConfig small_block(ShuffleMode shuffle, NwcPosition nwc) {
  BlockConfig b;
  b.channels = 4;
  b.head_dim = 2;
  b.window = 2;
  b.mlp_ratio = 2;
  b.shuffle = shuffle;
  b.nwc = nwc;
  b.even_rule = EvenKernelRule::same_asymmetric;
  b.shuffle_seed = 21;
  return b;
}

BlockParams<double> random_block(const BlockConfig& cfg, Rng& rng) {
  auto p = BlockParams<double>::init(cfg, rng);
  ParameterList<double> list;
  p.collect("b", list);
  sf_test::randomize(list, rng);
  return p;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 8;
  c.depths = {2, 2};
  c.window = 2;
  c.head_dim = 4;
  c.mlp_ratio = 2;
  c.num_classes = 5;
  c.img_size = 16;
  c.even_rule = EvenKernelRule::same_asymmetric;
  return c;
}

Tensor<double> find_param(const ParameterList<double>& list, const std::string& name) {
  for (const auto& p : list.parameters)
    if (p.name == name) return p.tensor;
  FAIL("missing parameter " << name);
  return {};
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("variant configurations") {
  const auto t = build_variant("T");
  CHECK(t.name == "Shuffle-T");
  CHECK(t.embed_dim == 96);
  CHECK(t.depths == std::vector<std::int64_t>{2, 2, 6, 2});
  CHECK(t.window == 7);
  CHECK(t.mlp_ratio == 4);
  CHECK(t.head_dim == 32);
  std::vector<std::int64_t> heads;
  for (std::size_t s = 0; s < 4; ++s) heads.push_back(t.stage_heads(s));
  CHECK(heads == std::vector<std::int64_t>{3, 6, 12, 24});

  const auto b = build_variant("B");
  std::vector<std::int64_t> widths;
  for (std::size_t s = 0; s < 4; ++s) widths.push_back(b.stage_channels(s));
  CHECK(widths == std::vector<std::int64_t>{128, 256, 512, 1024});
  CHECK(b.depths == std::vector<std::int64_t>{2, 2, 18, 2});

  auto s = build_variant("S");
  CHECK(s.depths[2] == 18);
  s.depths[2] = 6;
  s.name = t.name;
  CHECK(s.to_text() == t.to_text());

  try {
    build_variant("XL");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("T, S, B") != std::string::npos);
  }
}

TEST_CASE("pairing invariant: odd blocks shuffle") {
  for (const char* v : {"T", "S", "B"}) {
    const auto cfg = build_variant(v);
    for (std::size_t s = 0; s < cfg.stages(); ++s)
      for (std::int64_t i = 0; i < cfg.depths[s]; ++i)
        CHECK(cfg.block(s, i).shuffle == (i % 2 ? ShuffleMode::long_range : ShuffleMode::none));
  }
  auto odd = build_variant("T");
  odd.depths[2] = 5;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("config validation and resolution checks") {
  const auto t = build_variant("T");
  CHECK_NOTHROW(t.check_resolution(224, 224));
  CHECK_THROWS_AS(t.check_resolution(222, 224), ShapeError);
  try {
    t.check_resolution(196, 196);  // 49 -> merge of an odd grid
    FAIL("expected an error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
  }
  try {
    t.check_resolution(32, 32);
    FAIL("expected an error");
  } catch (const PartitionError& e) {
    CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
  }
  try {
    t.check_resolution(112, 112);  // 28, 14, 7, then 3.5
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stage 3") != std::string::npos);
  }
  auto even = t;
  even.window = 2;
  CHECK_THROWS_AS(even.validate(), ConfigError);
  even.even_rule = EvenKernelRule::same_asymmetric;
  CHECK_NOTHROW(even.validate());
  even.nwc = NwcPosition::none;
  even.even_rule = EvenKernelRule::reject;
  CHECK_NOTHROW(even.validate());
}

TEST_CASE("config text round trip") {
  auto c = tiny_config();
  c.shuffle = ShuffleMode::random;
  c.nwc = NwcPosition::C;
  c.rel_pos_bias = true;
  c.shuffle_seed = 77;
  const auto back = ModelConfig::from_text("# comment\n" + c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK_THROWS_AS(ModelConfig::from_text("embed_dim=8\nbogus=1\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_text("embed_dim=eight\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_text("depths=2,,2\n"), ConfigError);
}

TEST_CASE("block residual degeneracy and zero-init NWC") {
  Rng rng(1);
  auto x = random_tensor({2, 4, 4, 4}, rng);
  for (auto pos : {NwcPosition::none, NwcPosition::A, NwcPosition::B, NwcPosition::C}) {
    auto p = BlockParams<double>::init(small_block(ShuffleMode::long_range, pos), rng);
    ParameterList<double> list;
    p.collect("b", list);
    for (auto& t : list.parameters)
      for (auto& v : t.tensor.mutable_data()) v = 0.0;
    CHECK(block_forward(x, p, NormMode::eval).values() == x.values());
  }
  for (auto mode : {NormMode::train, NormMode::eval}) {
    Rng a(5), b(5);
    auto with = BlockParams<double>::init(small_block(ShuffleMode::long_range, NwcPosition::B), a);
    auto without = BlockParams<double>::init(small_block(ShuffleMode::long_range, NwcPosition::none), b);
    CHECK(block_forward(x, with, mode).values() == block_forward(x, without, mode).values());
  }
}

TEST_CASE("single-window shuffle equals no shuffle") {
  Rng rng(2);
  auto x = random_tensor({1, 4, 2, 2}, rng);
  auto cfg = small_block(ShuffleMode::long_range, NwcPosition::B);
  auto p = random_block(cfg, rng);
  auto q = p;
  q.config.shuffle = ShuffleMode::none;
  CHECK(block_forward(x, p, NormMode::eval).values() == block_forward(x, q, NormMode::eval).values());
  CHECK(WindowShuffle::make(7, 7, 7, ShuffleMode::long_range).rows.is_identity());
}

TEST_CASE("block pair equals two sequential blocks") {
  Rng rng(3);
  auto x = random_tensor({2, 4, 4, 4}, rng);
  auto first = random_block(small_block(ShuffleMode::none, NwcPosition::B), rng);
  auto second = random_block(small_block(ShuffleMode::long_range, NwcPosition::B), rng);
  auto a = block_pair_forward(x, first, second, NormMode::eval);
  auto b = block_forward(block_forward(x, first, NormMode::eval), second, NormMode::eval);
  CHECK(a.values() == b.values());
  CHECK_THROWS_AS(block_pair_forward(x, second, first, NormMode::eval), ConfigError);
  CHECK_THROWS_AS(block_forward(random_tensor({1, 4, 3, 4}, rng), first, NormMode::eval), PartitionError);
}

TEST_CASE("NWC placement follows the block equations") {
  // Rebuild the block by hand from the layer primitives for every position.
  Rng rng(4);
  auto x = random_tensor({2, 4, 4, 4}, rng);
  for (auto pos : {NwcPosition::none, NwcPosition::A, NwcPosition::B, NwcPosition::C}) {
    auto cfg = small_block(ShuffleMode::long_range, pos);
    auto p = random_block(cfg, rng);
    const auto s = WindowShuffle::make(4, 4, 2, cfg.shuffle, cfg.shuffle_seed);
    auto u = batchnorm2d(x, p.norm1, NormMode::eval);
    if (pos == NwcPosition::A) u = nwc_forward(u, *p.nwc);
    auto y = add(x, aligned_window_reverse(wmsa_forward(shuffled_window_partition(u, 2, s), p.attn), 2, 4, 4, s));
    if (pos == NwcPosition::B) y = nwc_forward(y, *p.nwc);
    auto expect = add(y, mlp_forward(batchnorm2d(y, p.norm2, NormMode::eval), p.mlp));
    CHECK(max_abs_diff(block_forward(x, p, NormMode::eval), expect) == 0.0);
    CHECK(p.nwc.has_value() == (pos == NwcPosition::A || pos == NwcPosition::B));
    CHECK(p.mlp.inner.has_value() == (pos == NwcPosition::C));
  }
}

TEST_CASE("full reduced block gradients pass the finite-difference check") {
  Rng rng(5);
  for (auto shuffle : {ShuffleMode::none, ShuffleMode::long_range, ShuffleMode::random}) {
    for (auto pos : {NwcPosition::A, NwcPosition::B, NwcPosition::C}) {
      auto p = random_block(small_block(shuffle, pos), rng);
      ParameterList<double> list;
      p.collect("b", list);
      In inputs{random_tensor({2, 4, 4, 4}, rng)};
      for (auto& t : list.parameters) inputs.push_back(t.tensor.clone());
      const auto r = sf_test::grad_check(
          [&](const In& v) {
            // rebind every parameter handle of a copy to the checked inputs
            auto q = p;
            std::size_t k = 1;
            q.norm1.gamma = v[k++];
            q.norm1.beta = v[k++];
            q.attn.wq = v[k++], q.attn.bq = v[k++], q.attn.wk = v[k++], q.attn.bk = v[k++];
            q.attn.wv = v[k++], q.attn.bv = v[k++], q.attn.wo = v[k++], q.attn.bo = v[k++];
            if (q.nwc) q.nwc->kernel = v[k++], q.nwc->bias = v[k++];
            q.norm2.gamma = v[k++];
            q.norm2.beta = v[k++];
            q.mlp.fc1_w = v[k++], q.mlp.fc1_b = v[k++];
            if (q.mlp.inner) q.mlp.inner->kernel = v[k++], q.mlp.inner->bias = v[k++];
            q.mlp.fc2_w = v[k++], q.mlp.fc2_b = v[k++];
            REQUIRE(k == v.size());
            // train-mode batch norm would update the shared running stats; use copies
            q.norm1.running_mean = q.norm1.running_mean.clone();
            q.norm1.running_var = q.norm1.running_var.clone();
            q.norm2.running_mean = q.norm2.running_mean.clone();
            q.norm2.running_var = q.norm2.running_var.clone();
            return block_forward(v[0], q, NormMode::train);
          },
          inputs);
      INFO("shuffle " << to_string(shuffle) << " nwc " << to_string(pos) << " error " << r.max_rel_error);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("token embedding and merging") {
  Rng rng(6);
  auto e = EmbedParams<double>::init(3, 8, rng);
  CHECK(token_embed(random_tensor({1, 3, 28, 28}, rng), e, NormMode::eval).shape() == Shape{1, 8, 7, 7});
  CHECK_THROWS_AS(token_embed(random_tensor({1, 3, 30, 28}, rng), e, NormMode::eval), ShapeError);

  ParameterList<double> el;
  e.collect("embed", el);
  std::int64_t n = 0;
  for (auto& p : el.parameters) n += p.tensor.numel();
  auto cfg = tiny_config();
  cfg.embed_dim = 8;
  const auto ledger = cost_ledger(cfg, 16, 16);
  std::int64_t ledger_embed = 0;
  for (const char* row : {"embed.conv1", "embed.norm1", "embed.conv2", "embed.norm2"}) ledger_embed += ledger.find(row)->params;
  CHECK(n == ledger_embed);

  auto m = MergeParams<double>::init(3, rng);
  CHECK(m.weight.numel() + m.bias.numel() == (2 * 2 * 3) * 6 + 6);
  for (auto& v : m.bias.mutable_data()) v = rng.normal();
  auto x = random_tensor({2, 3, 4, 6}, rng);
  auto y = token_merge(x, m);
  REQUIRE(y.shape() == Shape{2, 6, 2, 3});
  // gather the 2x2 patch (c, dy, dx) and multiply by the flattened weight
  double worst = 0;
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        std::vector<double> patch;
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) patch.push_back(x.at(((b * 3 + c) * 4 + 2 * i + dy) * 6 + 2 * j + dx));
        for (int o = 0; o < 6; ++o) {
          double acc = m.bias.at(o);
          for (int k = 0; k < 12; ++k) acc += m.weight.at(o * 12 + k) * patch[k];
          worst = std::max(worst, std::abs(acc - y.at(((b * 6 + o) * 2 + i) * 3 + j)));
        }
      }
  CHECK(worst < 1e-10);
  CHECK_THROWS_AS(token_merge(random_tensor({1, 3, 5, 4}, rng), m), ShapeError);

  Rng big(7);
  auto m96 = MergeParams<float>::init(96, big);
  auto x96 = Tensor<float>::zeros({1, 96, 56, 56});
  CHECK(token_merge(x96, m96).shape() == Shape{1, 192, 28, 28});
}

TEST_CASE("model parameter count matches the ledger") {
  for (auto pos : {NwcPosition::none, NwcPosition::A, NwcPosition::B, NwcPosition::C}) {
    auto cfg = tiny_config();
    cfg.nwc = pos;
    cfg.rel_pos_bias = pos == NwcPosition::C;
    ShuffleTransformer<float> model(cfg, 1);
    CHECK(model.parameter_count() == count_params(cfg).total_params());
  }
}

TEST_CASE("residual degeneracy of the whole model") {
  Rng rng(8);
  ShuffleTransformer<double> model(tiny_config(), 3);
  auto st = model.state();
  sf_test::randomize(st, rng);
  for (auto& p : st.parameters) {
    if (p.name.find(".blocks.") != std::string::npos)
      for (auto& v : p.tensor.mutable_data()) v = 0.0;
  }
  auto img = random_tensor({2, 3, 16, 16}, rng);
  const auto feats = model.forward_features(img, NormMode::eval);
  auto x = token_embed(img, model.embed(), NormMode::eval);
  CHECK(feats[1].values() == x.values());
  MergeParams<double> merge{find_param(st, "stages.1.merge.weight"), find_param(st, "stages.1.merge.bias")};
  CHECK(feats[2].values() == token_merge(x, merge).values());
}

TEST_CASE("determinism and argmax stability") {
  Rng rng(9);
  ShuffleTransformer<float> a(tiny_config(), 4), b(tiny_config(), 4);
  auto img = random_tensor<float>({3, 3, 16, 16}, rng);
  const auto la = a.forward(img, NormMode::eval);
  CHECK(la.values() == b.forward(img, NormMode::eval).values());
  CHECK(la.values() == a.forward(img, NormMode::eval).values());
  CHECK(la.shape() == Shape{3, 5});

  // head bias starts at zero, so a positive scale of the head weight only rescales logits
  auto before = la.values();
  for (auto& v : a.head_weight().mutable_data()) v *= 3.5f;
  const auto after = a.forward(img, NormMode::eval).values();
  for (int i = 0; i < 3; ++i) {
    const auto row_a = before.cbegin() + i * 5;
    const auto row_b = after.cbegin() + i * 5;
    CHECK(std::max_element(row_a, row_a + 5) - row_a == std::max_element(row_b, row_b + 5) - row_b);
  }
}

TEST_CASE("Shuffle-T shape ledger at 224") {
  const auto t0 = std::chrono::steady_clock::now();
  ShuffleTransformer<float> model(build_variant("T"), 0);
  model.set_requires_grad(false);
  auto img = Tensor<float>::zeros({1, 3, 224, 224});
  Rng rng(10);
  for (auto& v : img.mutable_data()) v = static_cast<float>(rng.normal());
  const auto feats = model.forward_features(img, NormMode::eval);
  REQUIRE(feats.size() == 5);
  CHECK(feats[0].shape() == Shape{1, 96, 56, 56});
  CHECK(feats[1].shape() == Shape{1, 96, 56, 56});
  CHECK(feats[2].shape() == Shape{1, 192, 28, 28});
  CHECK(feats[3].shape() == Shape{1, 384, 14, 14});
  CHECK(feats[4].shape() == Shape{1, 768, 7, 7});
  const auto logits = model.forward(img, NormMode::eval);
  CHECK(logits.shape() == Shape{1, 1000});
  for (float v : logits.values()) CHECK(std::isfinite(v));
  MESSAGE("Shuffle-T forward x2 took "
          << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s");
}

}
