#include <set>

#include "doctest.h"
#include "json.hpp"
#include "shuffle_former/reachability.hpp"

using namespace shuffle_former;

namespace {

std::set<std::pair<std::int64_t, std::int64_t>> as_set(const ReachabilitySet& r) {
  const auto m = r.members();
  return {m.begin(), m.end()};
}

}  // namespace

TEST_SUITE("reachability") {

TEST_CASE("stack parsing") {
  const auto s = StackSpec::parse("wmsa,swmsa:short,nwc,mlp,block:random:C", 8, 8, 2);
  REQUIRE(s.layers.size() == 5);
  CHECK(s.layers[1].shuffle == ShuffleMode::short_range);
  CHECK(s.layers[4].kind == ProbeLayerKind::block);
  CHECK(s.layers[4].nwc == NwcPosition::C);
  CHECK(s.describe() == "wmsa:none,wmsa:short,nwc,mlp,block:random:C");
  CHECK(StackSpec::parse("swmsa", 8, 8, 2).layers[0].shuffle == ShuffleMode::long_range);
  CHECK_THROWS_AS(StackSpec::parse("conv", 8, 8, 2), ConfigError);
  CHECK_THROWS_AS(StackSpec::parse("nwc:long", 8, 8, 2), ConfigError);
  CHECK_THROWS_AS(StackSpec::parse("block:long:D", 8, 8, 2), ConfigError);
  CHECK_THROWS_AS(StackSpec::parse("wmsa", 7, 8, 2), PartitionError);
  CHECK_THROWS_AS(StackSpec::parse("", 8, 8, 2), ConfigError);
}

TEST_CASE("symbolic relations of single layers") {
  // WMSA: the window equivalence class
  const auto w = symbolic_reachability(StackSpec::parse("wmsa", 8, 8, 2), 5, 2);
  CHECK(as_set(w) == std::set<std::pair<std::int64_t, std::int64_t>>{{4, 2}, {4, 3}, {5, 2}, {5, 3}});
  // NWC: Chebyshev ball of radius floor(M/2) for odd M
  const auto n3 = symbolic_reachability(StackSpec::parse("nwc", 9, 9, 3), 4, 4);
  CHECK(n3.size() == 9);
  for (auto [h, x] : n3.members()) CHECK(std::max(std::abs(h - 4), std::abs(x - 4)) <= 1);
  // even M: offsets [-(M-1)/2, M/2]
  const auto n2 = symbolic_reachability(StackSpec::parse("nwc", 8, 8, 2), 4, 4);
  CHECK(as_set(n2) == std::set<std::pair<std::int64_t, std::int64_t>>{{4, 4}, {4, 5}, {5, 4}, {5, 5}});
  CHECK(symbolic_reachability(StackSpec::parse("mlp", 8, 8, 2), 3, 3).size() == 1);
  // shuffled WMSA: the probe's class under the permutation
  const auto s = symbolic_reachability(StackSpec::parse("swmsa", 8, 8, 2), 0, 0);
  CHECK(as_set(s) == std::set<std::pair<std::int64_t, std::int64_t>>{{0, 0}, {0, 4}, {4, 0}, {4, 4}});
}

TEST_CASE("non-shuffle pair stays inside the probe window") {
  for (auto [h, w] : std::vector<std::pair<int, int>>{{0, 0}, {3, 6}, {7, 7}}) {
    const auto spec = StackSpec::parse("block:none:none,block:none:none", 8, 8, 2);
    const auto fd = reachability_probe(spec, h, w);
    CHECK(fd.size() == 4);
    for (auto [i, j] : fd.members()) {
      CHECK(i / 2 == h / 2);
      CHECK(j / 2 == w / 2);
    }
    CHECK(fd.same_members(symbolic_reachability(spec, h, w)));
  }
}

TEST_CASE("shuffle pair reaches the full 4x4 grid") {
  const auto spec = StackSpec::parse("wmsa,swmsa", 4, 4, 2);
  for (std::int64_t p = 0; p < 16; ++p) {
    const auto fd = reachability_probe(spec, p / 4, p % 4);
    CHECK(fd.full());
    CHECK(fd.same_members(symbolic_reachability(spec, p / 4, p % 4)));
  }
  CHECK(reachability_probe(StackSpec::parse("block:none:none,block:long:none", 4, 4, 2), 2, 1).full());
}

TEST_CASE("grid issue on 16x16 and the NWC fix") {
  const auto plain = StackSpec::parse("block:none:none,block:long:none", 16, 16, 2);
  const auto fd = reachability_probe(plain, 5, 6);
  CHECK_FALSE(fd.full());
  CHECK(fd.strided());
  CHECK(fd.rows() == std::vector<std::int64_t>{4, 5, 12, 13});
  CHECK(fd.cols() == std::vector<std::int64_t>{6, 7, 14, 15});
  CHECK(fd.same_members(symbolic_reachability(plain, 5, 6)));

  for (const char* pos : {"A", "B", "C"}) {
    const auto nwc = StackSpec::parse(std::string("block:none:") + pos + ",block:long:" + pos, 16, 16, 2);
    const auto r = reachability_probe(nwc, 5, 6);
    CHECK(fd.subset_of(r));
    CHECK(r.size() > fd.size());
    CHECK(r.same_members(symbolic_reachability(nwc, 5, 6)));
  }
  // shuffled pair beats the non-shuffle pair on 8x8
  const auto base = reachability_probe(StackSpec::parse("block:none:B,block:none:B", 8, 8, 2), 3, 3);
  const auto shuf = reachability_probe(StackSpec::parse("block:none:B,block:long:B", 8, 8, 2), 3, 3);
  CHECK(base.subset_of(shuf));
  CHECK(shuf.size() > base.size());
}

TEST_CASE("non-shuffle pair with NWC: output unchanged outside window and NWC reach") {
  const auto spec = StackSpec::parse("block:none:B,block:none:B", 8, 8, 2);
  const auto fd = reachability_probe(spec, 2, 2);
  // window {2,3}^2, each NWC extends by +1 per axis after attention: [2, 5] at most
  for (auto [i, j] : fd.members()) {
    CHECK(i >= 2);
    CHECK(i <= 5);
    CHECK(j >= 2);
    CHECK(j <= 5);
  }
}

TEST_CASE("finite differences agree with the symbolic oracle on random stacks") {
  Rng rng(2024);
  const std::vector<std::string> kinds{"wmsa", "swmsa:long", "swmsa:short", "swmsa:random", "nwc", "mlp",
                                       "block:none:none", "block:long:B", "block:short:A", "block:random:C"};
  const std::vector<std::int64_t> grids{8, 12, 16};
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = grids[rng.below(grids.size())];
    const auto depth = 1 + rng.below(3);
    std::string layers;
    for (std::uint64_t d = 0; d < depth; ++d) {
      auto k = kinds[rng.below(kinds.size())];
      if (n % 4 && k.find("short") != std::string::npos) k = "wmsa";
      layers += (d ? "," : "") + k;
    }
    auto spec = StackSpec::parse(layers, n, n, 2);
    spec.shuffle_seed = static_cast<std::uint64_t>(trial);
    const auto ph = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
    const auto pw = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
    ProbeOptions opts;
    opts.seeds = {static_cast<std::uint64_t>(trial) + 1, 77, 901};
    const auto fd = reachability_probe(spec, ph, pw, opts);
    const auto sym = symbolic_reachability(spec, ph, pw);
    INFO("stack " << spec.describe() << " grid " << n << " probe " << ph << "," << pw);
    CHECK(fd.same_members(sym));
  }
}

TEST_CASE("monotonicity: appending a layer never shrinks the set") {
  const std::vector<std::string> tails{"wmsa", "swmsa", "nwc", "mlp", "block:long:B"};
  std::string stack = "block:none:none";
  auto prev = symbolic_reachability(StackSpec::parse(stack, 16, 16, 2), 7, 9);
  auto prev_fd = reachability_probe(StackSpec::parse(stack, 16, 16, 2), 7, 9);
  for (const auto& t : tails) {
    stack += "," + t;
    const auto next = symbolic_reachability(StackSpec::parse(stack, 16, 16, 2), 7, 9);
    const auto next_fd = reachability_probe(StackSpec::parse(stack, 16, 16, 2), 7, 9);
    CHECK(prev.subset_of(next));
    CHECK(prev_fd.subset_of(next_fd));
    prev = next;
    prev_fd = next_fd;
  }
}

TEST_CASE("degenerate weights are rejected") {
  const auto spec = StackSpec::parse("wmsa,swmsa", 8, 8, 2);
  std::vector<ProbeStack> models;
  models.emplace_back(spec, 1);
  CHECK(models[0].degenerate_parameter().empty());
  models[0].zero_weights();
  CHECK_FALSE(models[0].degenerate_parameter().empty());
  CHECK_THROWS_AS(reachability_probe(models, 0, 0), ConfigError);
  CHECK_THROWS_AS(reachability_probe(spec, 8, 0), ConfigError);
}

TEST_CASE("json report") {
  const auto spec = StackSpec::parse("wmsa", 4, 4, 2);
  const auto fd = reachability_probe(spec, 1, 1);
  const auto j = nlohmann::json::parse(fd.to_json());
  CHECK(j["method"] == "fd");
  CHECK(j["probe"] == nlohmann::json::array({1, 1}));
  CHECK(j["grid"] == nlohmann::json::array({4, 4}));
  CHECK(j["threshold"] == 1e-9);
  CHECK(j["seeds"] == nlohmann::json::array({1, 2, 3}));
  CHECK(j["members"].size() == 4);
  CHECK(j["size"] == 4);
}

}
