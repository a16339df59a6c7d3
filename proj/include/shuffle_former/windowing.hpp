#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shuffle_former/ops.hpp"
#include "shuffle_former/rng.hpp"
#include "shuffle_former/tensor.hpp"

namespace shuffle_former {

enum class ShuffleMode { none, long_range, short_range, random };

std::string to_string(ShuffleMode mode);
// Accepts none/long/short/random (and the long-range/short-range spellings).
ShuffleMode parse_shuffle_mode(const std::string& text);

// Permutation of the n token positions along one spatial axis.
// map[k] is the source index placed at position k.
struct SpatialPermutation {
  std::int64_t n = 0;
  std::vector<std::int64_t> map;
  ShuffleMode mode = ShuffleMode::none;

  static SpatialPermutation identity(std::int64_t n);
  bool is_identity() const;
  bool operator==(const SpatialPermutation& other) const { return map == other.map; }
};

// Builds the token permutation applied before window partition.
//
//   long-range:  reshape (m, n/m), transpose, flatten: map[g*m + j] = j*(n/m) + g
//   short-range: reshape (n/2m, m, 2), swap the last two axes, flatten:
//                map[a*2m + c*m + b] = a*2m + 2b + c
//   random:      Fisher-Yates over [0, n) drawn from rng
//
// When n == m the axis holds a single window and every mode yields the
// identity. Otherwise long-range needs m | n and short-range needs 2m | n.
SpatialPermutation make_shuffle_permutation(std::int64_t n, std::int64_t m, ShuffleMode mode,
                                            Rng* rng = nullptr);

SpatialPermutation invert_permutation(const SpatialPermutation& p);

// result.map[k] = outer.map[inner.map[k]]: applying `inner` after `outer`.
SpatialPermutation compose(const SpatialPermutation& outer, const SpatialPermutation& inner);

bool is_bijection(const std::vector<std::int64_t>& map);

// Window layout: (B, C, H, W) -> (B * gh * gw, C, m, m). Window index is
// b * gh * gw + wy * gw + wx (row-major over windows); within a window the
// m x m block keeps row-major order, so pixel (h, w) sits in window
// (h / m, w / m) at intra position (h % m, w % m).
struct WindowGrid {
  std::int64_t m = 0;
  std::int64_t gh = 0;
  std::int64_t gw = 0;

  static WindowGrid for_extent(std::int64_t h, std::int64_t w, std::int64_t m);
  std::int64_t windows() const { return gh * gw; }
};

// Spatial permutation pair for a Shuffle-WMSA layer. Row and column axes
// are permuted independently.
struct WindowShuffle {
  SpatialPermutation rows;
  SpatialPermutation cols;

  static WindowShuffle identity(std::int64_t h, std::int64_t w);
  // Random mode uses independent row/column streams derived from seed.
  static WindowShuffle make(std::int64_t h, std::int64_t w, std::int64_t m, ShuffleMode mode,
                            std::uint64_t seed = 0);
  WindowShuffle inverse() const;
};

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t m);

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& wins, std::int64_t m, std::int64_t h, std::int64_t w);

// out[b, c, i, j] = x[b, c, rows.map[i], cols.map[j]]
template <typename T>
Tensor<T> apply_spatial_permutation_2d(const Tensor<T>& x, const SpatialPermutation& rows,
                                       const SpatialPermutation& cols);

// Spatial shuffle fused into the partition gather: equals
// window_partition(apply_spatial_permutation_2d(x, rows, cols), m).
template <typename T>
Tensor<T> shuffled_window_partition(const Tensor<T>& x, std::int64_t m, const WindowShuffle& shuffle);

// Spatial alignment fused into the reverse gather: equals
// apply_spatial_permutation_2d(window_reverse(wins), rows^-1, cols^-1).
template <typename T>
Tensor<T> aligned_window_reverse(const Tensor<T>& wins, std::int64_t m, std::int64_t h,
                                 std::int64_t w, const WindowShuffle& shuffle);

}  // namespace shuffle_former
