#pragma once

#include <cstdint>
#include <random>

namespace shuffle_former {

// Seeded pseudo-random source. The engine is std::mt19937_64, whose output
// sequence is fixed by the C++ standard; the floating-point transforms below
// are implemented here rather than through <random> distributions so the
// derived streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, bound), rejection sampled; bound > 0.
  std::uint64_t below(std::uint64_t bound);
  // Standard normal via Box-Muller (one value per call, no caching).
  double normal();
  // Normal(0, std) truncated to [-2 std, 2 std] by rejection.
  double truncated_normal(double std);

  // Independent child stream derived from this one's seed and a tag.
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace shuffle_former
