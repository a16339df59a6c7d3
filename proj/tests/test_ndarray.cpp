#include <cmath>
#include <numeric>

#include "doctest.h"
#include "shuffle_former/optim.hpp"
#include "test_support.hpp"

using namespace shuffle_former;
using sf_test::max_abs_diff;
using sf_test::random_tensor;

namespace {

// Naive oracles, written loop by loop against the documented layouts.

std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                                const Conv2dOptions& o) {
  const auto B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = w.dim(0), cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const auto OH = (H + o.padding.top + o.padding.bottom - kh) / o.stride + 1;
  const auto OW = (W + o.padding.left + o.padding.right - kw) / o.stride + 1;
  const auto opg = Cout / o.groups;
  (void)Cin;
  std::vector<double> out(static_cast<std::size_t>(B * Cout * OH * OW), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias.defined() ? bias.at(co) : 0.0;
          const auto g = co / opg;
          for (int64_t ci = 0; ci < cpg; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const auto iy = oy * o.stride + ky - o.padding.top;
                const auto ix = ox * o.stride + kx - o.padding.left;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at(((b * x.dim(1) + g * cpg + ci) * H + iy) * W + ix) *
                       w.at(((co * cpg + ci) * kh + ky) * kw + kx);
              }
          out[static_cast<std::size_t>(((b * Cout + co) * OH + oy) * OW + ox)] = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("ndarray") {

TEST_CASE("shape contract and row-major strides") {
  CHECK(shape_numel({2, 3, 4}) == 24);
  CHECK(row_major_strides({2, 3, 4}) == Shape{12, 4, 1});
  CHECK_THROWS_AS(shape_numel({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1, 2, 3}), ShapeError);
  auto t = Tensor<double>::from_data({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(t.at(1 * 3 + 2) == 5);
}

TEST_CASE("rng determinism and derived streams") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    (void)c.next_u64();
  }
  Rng d(42), e(43);
  CHECK(d.next_u64() != e.next_u64());
  CHECK(Rng::derive_seed(1, 0) != Rng::derive_seed(1, 1));
  Rng t(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = t.truncated_normal(0.02);
    CHECK(std::abs(v) <= 0.04);
  }
}

TEST_CASE("reshape_permute row-major semantics") {
  auto t = Tensor<double>::from_data({4}, {0, 1, 2, 3});
  auto r = reshape(reshape_permute(t, {2, 2}, {1, 0}), {4});
  CHECK(r.values() == std::vector<double>{0, 2, 1, 3});

  Rng rng(1);
  auto x = random_tensor({2, 3, 4}, rng);
  CHECK(reshape_permute(x, {2, 3, 4}, {0, 1, 2}).values() == x.values());

  auto row = random_tensor({1, 7}, rng);
  CHECK(reshape(reshape(row, {7, 1}), {1, 7}).values() == row.values());

  CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
  CHECK_THROWS_AS(reshape_permute(x, {24}, {0, 0}), ShapeError);

  // permute oracle on a 3-d tensor
  auto p = permute(x, {2, 0, 1});
  REQUIRE(p.shape() == Shape{4, 2, 3});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k) CHECK(p.at((k * 2 + i) * 3 + j) == x.at((i * 3 + j) * 4 + k));
}

TEST_CASE("matmul oracle and closed-form gradients") {
  auto eye = Tensor<double>::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(2);
  auto m = random_tensor({3, 4}, rng);
  CHECK(matmul(eye, m).values() == m.values());
  CHECK(matmul(Tensor<double>::from_data({1, 1}, {2}), Tensor<double>::from_data({1, 1}, {3})).item() == 6);

  auto a = random_tensor({4, 5}, rng, 1.0, true);
  auto b = random_tensor({5, 3}, rng, 1.0, true);
  auto c = matmul(a, b);
  CHECK(max_abs_diff(c.values(), matmul_oracle(a.values(), b.values(), 4, 5, 3)) < 1e-12);

  backward(sum(c));
  // d/dA sum(AB) = ones(4,3) B^T; d/dB = A^T ones(4,3)
  for (int i = 0; i < 4; ++i)
    for (int p = 0; p < 5; ++p) {
      double expect = 0;
      for (int j = 0; j < 3; ++j) expect += b.at(p * 3 + j);
      CHECK(std::abs(a.grad()[i * 5 + p] - expect) < 1e-10);
    }
  for (int p = 0; p < 5; ++p)
    for (int j = 0; j < 3; ++j) {
      double expect = 0;
      for (int i = 0; i < 4; ++i) expect += a.at(i * 5 + p);
      CHECK(std::abs(b.grad()[p * 3 + j] - expect) < 1e-10);
    }

  auto ba = random_tensor({2, 3, 4}, rng);
  auto bb = random_tensor({2, 4, 2}, rng);
  auto bc = matmul(ba, bb);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> sa(ba.values().begin() + k * 12, ba.values().begin() + (k + 1) * 12);
    std::vector<double> sb(bb.values().begin() + k * 8, bb.values().begin() + (k + 1) * 8);
    std::vector<double> sc(bc.values().begin() + k * 6, bc.values().begin() + (k + 1) * 6);
    CHECK(max_abs_diff(sc, matmul_oracle(sa, sb, 3, 4, 2)) < 1e-12);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("softmax closed forms and invariants") {
  auto eq = softmax_lastdim(Tensor<double>::full({1, 5}, 0.3));
  for (double v : eq.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  auto two = softmax_lastdim(Tensor<double>::from_data({1, 2}, {0.0, std::log(3.0)}));
  CHECK(two.at(0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(two.at(1) == doctest::Approx(0.75).epsilon(1e-14));

  Rng rng(3);
  auto x = random_tensor<float>({6, 7}, rng, 5.0);
  auto s = softmax_lastdim(x);
  auto shifted = x.clone();
  for (auto& v : shifted.mutable_data()) v += 3.0f;
  CHECK(max_abs_diff(s, softmax_lastdim(shifted)) <= 1e-7);
  for (int r = 0; r < 6; ++r) {
    double total = 0;
    for (int c = 0; c < 7; ++c) {
      CHECK(s.at(r * 7 + c) >= 0.0f);
      total += s.at(r * 7 + c);
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }

  // large logits stay finite thanks to max subtraction
  auto big = softmax_lastdim(Tensor<double>::from_data({1, 2}, {1000.0, 1000.0}));
  CHECK(big.at(0) == doctest::Approx(0.5));

  auto nan_in = Tensor<double>::from_data({1, 2}, {0.0, NAN});
  CHECK_THROWS_AS(softmax_lastdim(nan_in, Validation::on), NumericError);
  CHECK(std::isnan(softmax_lastdim(nan_in).at(1)));
}

TEST_CASE("conv2d against the naive loop oracle") {
  Rng rng(4);
  struct Case {
    Shape x, w;
    Conv2dOptions o;
    bool bias;
  };
  const std::vector<Case> cases{
      {{2, 3, 5, 6}, {4, 3, 3, 3}, {1, Padding2d::symmetric(1), 1}, true},
      {{1, 4, 6, 6}, {4, 1, 3, 3}, {1, Padding2d::symmetric(1), 4}, true},
      {{1, 4, 4, 4}, {6, 2, 2, 2}, {2, {}, 2}, false},
      {{2, 3, 7, 5}, {2, 3, 3, 3}, {2, Padding2d::symmetric(1), 1}, false},
      {{1, 2, 5, 5}, {2, 1, 2, 2}, {1, {0, 0, 1, 1}, 2}, true},
      {{1, 5, 3, 4}, {3, 5, 1, 1}, {1, {}, 1}, true},
  };
  for (const auto& c : cases) {
    auto x = random_tensor(c.x, rng);
    auto w = random_tensor(c.w, rng);
    auto b = c.bias ? random_tensor({c.w[0]}, rng) : Tensor<double>();
    auto y = conv2d(x, w, b, c.o);
    CHECK(max_abs_diff(y.values(), conv_oracle(x, w, b, c.o)) < 1e-10);
  }

  // 1x1 conv == per-pixel matmul
  auto x = random_tensor({1, 3, 2, 2}, rng);
  auto w = random_tensor({5, 3, 1, 1}, rng);
  auto y = conv2d(x, w, Tensor<double>(), {});
  for (int p = 0; p < 4; ++p)
    for (int o = 0; o < 5; ++o) {
      double acc = 0;
      for (int i = 0; i < 3; ++i) acc += w.at(o * 3 + i) * x.at(i * 4 + p);
      CHECK(std::abs(y.at(o * 4 + p) - acc) < 1e-12);
    }

  // identity-center depthwise kernel
  auto img = random_tensor({1, 3, 5, 5}, rng);
  auto k = Tensor<double>::zeros({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) k.mutable_data()[c * 9 + 4] = 1.0;
  CHECK(conv2d(img, k, Tensor<double>(), {1, Padding2d::symmetric(1), 3}).values() == img.values());

  auto s2 = conv2d(random_tensor({1, 1, 4, 4}, rng), random_tensor({1, 1, 2, 2}, rng), Tensor<double>(), {2, {}, 1});
  CHECK(s2.shape() == Shape{1, 1, 2, 2});

  CHECK_THROWS_AS(conv2d(img, random_tensor({4, 1, 3, 3}, rng), Tensor<double>(), {1, {}, 2}), ConfigError);
}

TEST_CASE("batchnorm statistics and modes") {
  Rng rng(5);
  auto x = random_tensor({4, 3, 3, 3}, rng, 2.0);
  for (auto& v : x.mutable_data()) v += 1.5;
  auto bn = BatchNormState<double>::identity(3);
  auto y = batchnorm2d(x, bn, NormMode::train);
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0, in_mean = 0, in_var = 0;
    std::vector<double> vals, ins;
    for (int b = 0; b < 4; ++b)
      for (int p = 0; p < 9; ++p) {
        vals.push_back(y.at((b * 3 + c) * 9 + p));
        ins.push_back(x.at((b * 3 + c) * 9 + p));
      }
    for (std::size_t i = 0; i < vals.size(); ++i) {
      mean += vals[i];
      in_mean += ins[i];
    }
    mean /= 36;
    in_mean /= 36;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      var += (vals[i] - mean) * (vals[i] - mean);
      in_var += (ins[i] - in_mean) * (ins[i] - in_mean);
    }
    var /= 36;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
    // running stats: momentum 0.1, unbiased variance
    CHECK(bn.running_mean.at(c) == doctest::Approx(0.1 * in_mean).epsilon(1e-12));
    CHECK(bn.running_var.at(c) == doctest::Approx(0.9 + 0.1 * in_var / 35).epsilon(1e-12));
  }

  auto fresh = BatchNormState<double>::identity(3);
  auto e = batchnorm2d(x, fresh, NormMode::eval);
  CHECK(max_abs_diff(e.values(), x.values()) < 1e-4);  // 1/sqrt(1 + eps)

  auto cst = Tensor<double>::full({2, 3, 2, 2}, 4.0);
  auto shifted = BatchNormState<double>::identity(3);
  for (auto& v : shifted.beta.mutable_data()) v = 0.7;
  const auto flat = batchnorm2d(cst, shifted, NormMode::train);
  for (double v : flat.values()) CHECK(v == doctest::Approx(0.7));

  auto single = random_tensor({1, 3, 1, 1}, rng);
  auto bn2 = BatchNormState<double>::identity(3);
  CHECK_THROWS_AS(batchnorm2d(single, bn2, NormMode::train), DegenerateBatchError);
  CHECK_NOTHROW(batchnorm2d(single, bn2, NormMode::eval));
}

TEST_CASE("elementwise ops and pooling") {
  auto g = gelu(Tensor<double>::from_data({3}, {0.0, 1.0, -1.0}));
  CHECK(g.at(0) == 0.0);
  CHECK(g.at(1) == doctest::Approx(0.5 * (1 + std::erf(1 / std::sqrt(2.0)))).epsilon(1e-14));
  Rng rng(6);
  auto x = random_tensor({2, 3}, rng);
  CHECK(add(x, Tensor<double>::zeros({2, 3})).values() == x.values());
  CHECK_THROWS_AS(add(x, Tensor<double>::zeros({3, 2})), ShapeError);
  auto pooled = mean_pool_hw(Tensor<double>::full({2, 3, 4, 5}, 1.25));
  CHECK(pooled.shape() == Shape{2, 3});
  for (double v : pooled.values()) CHECK(v == doctest::Approx(1.25));
}

TEST_CASE("backward semantics") {
  Rng rng(7);
  auto x = random_tensor({3, 4}, rng, 1.0, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  CHECK_THROWS_AS(backward(x), CallError);

  // diamond graph: every node visited once, shared input accumulates
  auto a = random_tensor({2, 2}, rng, 1.0, true);
  auto b = gelu(a);
  auto c = add(mul(b, b), b);
  const auto loss = sum(c);
  CHECK(Graph<double>::trace(loss).node_count() == 5);  // a, gelu, mul, add, sum
  CHECK(backward(loss) == 4);                           // every non-leaf closure once
  for (std::size_t i = 0; i < 4; ++i) {
    const double u = a.at(static_cast<int64_t>(i));
    const double gb = 2 * b.at(static_cast<int64_t>(i)) + 1;
    const double phi = std::exp(-u * u / 2) / std::sqrt(2 * M_PI);
    const double dgelu = 0.5 * (1 + std::erf(u / std::sqrt(2.0))) + u * phi;
    CHECK(a.grad()[i] == doctest::Approx(gb * dgelu).epsilon(1e-12));
  }

  // frozen inputs record no graph
  auto frozen = random_tensor({2, 2}, rng);
  auto r = gelu(frozen);
  CHECK_FALSE(r.requires_grad());
  CHECK(r.node()->parents.empty());
}

TEST_CASE("finite-difference gradient checks for every primitive") {
  Rng rng(8);
  using In = std::vector<Tensor<double>>;
  auto check = [](const char* name, auto f, In inputs) {
    const auto r = sf_test::grad_check(f, std::move(inputs));
    INFO(name << " max relative error " << r.max_rel_error);
    CHECK(r.max_rel_error < 1e-4);
  };
  check("matmul", [](const In& v) { return matmul(v[0], v[1]); },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  check("batched matmul", [](const In& v) { return matmul(v[0], v[1]); },
        {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)});
  check("softmax", [](const In& v) { return softmax_lastdim(v[0]); }, {random_tensor({3, 5}, rng)});
  check("gelu", [](const In& v) { return gelu(v[0]); }, {random_tensor({2, 6}, rng)});
  check("mul/add/scale", [](const In& v) { return scale(add(mul(v[0], v[1]), v[0]), 0.7); },
        {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  check("permute", [](const In& v) { return reshape_permute(v[0], {2, 3, 2}, {2, 0, 1}); },
        {random_tensor({3, 4}, rng)});
  check("conv2d 3x3", [](const In& v) { return conv2d(v[0], v[1], v[2], {1, Padding2d::symmetric(1), 1}); },
        {random_tensor({2, 2, 4, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  check("conv2d stride 2 grouped", [](const In& v) { return conv2d(v[0], v[1], v[2], {2, {}, 2}); },
        {random_tensor({1, 4, 4, 6}, rng), random_tensor({4, 2, 2, 2}, rng), random_tensor({4}, rng)});
  check("conv2d asymmetric depthwise", [](const In& v) { return conv2d(v[0], v[1], v[2], {1, {0, 0, 1, 1}, 3}); },
        {random_tensor({1, 3, 4, 4}, rng), random_tensor({3, 1, 2, 2}, rng), random_tensor({3}, rng)});
  check("batchnorm train",
        [](const In& v) {
          BatchNormState<double> bn = BatchNormState<double>::identity(3);
          bn.gamma = v[1];
          bn.beta = v[2];
          return batchnorm2d(v[0], bn, NormMode::train);
        },
        {random_tensor({2, 3, 2, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  check("batchnorm eval",
        [](const In& v) {
          BatchNormState<double> bn = BatchNormState<double>::identity(3);
          bn.gamma = v[1];
          bn.beta = v[2];
          return batchnorm2d(v[0], bn, NormMode::eval);
        },
        {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  check("mean pool", [](const In& v) { return mean_pool_hw(v[0]); }, {random_tensor({2, 3, 3, 2}, rng)});
  check("linear", [](const In& v) { return linear(v[0], v[1], v[2]); },
        {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)});
  check("cross entropy", [](const In& v) { return cross_entropy(v[0], {1, 0, 3}); }, {random_tensor({3, 4}, rng)});
}

TEST_CASE("cross entropy closed form") {
  auto logits = Tensor<double>::from_data({2, 3}, {0, 0, 0, 1, 2, 3});
  const double l1 = std::log(3.0);
  const double l2 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(cross_entropy(logits, {0, 2}).item() == doctest::Approx((l1 + l2) / 2).epsilon(1e-14));
  CHECK_THROWS(cross_entropy(logits, {0}));
  CHECK_THROWS(cross_entropy(logits, {0, 3}));
}

TEST_CASE("optimizer updates") {
  auto p = Tensor<double>::full({1}, 1.0);
  std::vector<Tensor<double>> params{p};
  std::vector<std::vector<double>> grads{{1.0}};
  OptimizerState<double> st;
  OptimizerConfig sgd{UpdateRule::sgd_momentum, 0.1, 0.9};
  optimizer_step<double>(params, grads, st, sgd);
  CHECK(p.item() == doctest::Approx(0.9).epsilon(1e-15));
  optimizer_step<double>(params, grads, st, sgd);  // v = 0.9 + 1
  CHECK(p.item() == doctest::Approx(0.9 - 0.19).epsilon(1e-14));

  auto q = Tensor<double>::full({1}, 0.5);
  std::vector<Tensor<double>> qs{q};
  OptimizerState<double> sq;
  OptimizerConfig adam{UpdateRule::adamw, 1e-2, 0.9, 0.9, 0.999, 1e-8, 0.0};
  std::vector<std::vector<double>> zero{{0.0}};
  optimizer_step<double>(qs, zero, sq, adam);
  CHECK(q.item() == 0.5);

  // textbook first step: m = (1-b1) g, v = (1-b2) g^2, bias-corrected -> g / (|g| + eps)
  auto r = Tensor<double>::full({1}, 2.0);
  std::vector<Tensor<double>> rs{r};
  OptimizerState<double> sr;
  OptimizerConfig adamw{UpdateRule::adamw, 0.05, 0.9, 0.9, 0.999, 1e-8, 0.1};
  std::vector<std::vector<double>> g{{-0.3}};
  optimizer_step<double>(rs, g, sr, adamw);
  const double decayed = 2.0 - 0.05 * 0.1 * 2.0;
  const double m_hat = (0.1 * -0.3) / 0.1, v_hat = (0.001 * 0.09) / 0.001;
  CHECK(r.item() == doctest::Approx(decayed - 0.05 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-14));

  std::vector<std::vector<double>> wrong{{1.0, 2.0}};
  CHECK_THROWS_AS(optimizer_step<double>(rs, wrong, sr, adamw), CallError);
  std::vector<std::vector<double>> missing{};
  CHECK_THROWS_AS(optimizer_step<double>(rs, missing, sr, adamw), CallError);
}

TEST_CASE("determinism: same seed, bit-identical results") {
  auto run = [] {
    Rng rng(11);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto w = random_tensor({3, 3, 3, 3}, rng);
    return softmax_lastdim(gelu(conv2d(x, w, Tensor<double>(), {1, Padding2d::symmetric(1), 1}))).values();
  };
  CHECK(run() == run());
}

}
