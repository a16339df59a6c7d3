#include "shuffle_former/windowing.hpp"

#include <algorithm>
#include <numeric>

namespace shuffle_former {

std::string to_string(ShuffleMode mode) {
  switch (mode) {
    case ShuffleMode::none: return "none";
    case ShuffleMode::long_range: return "long";
    case ShuffleMode::short_range: return "short";
    case ShuffleMode::random: return "random";
  }
  return "?";
}

ShuffleMode parse_shuffle_mode(const std::string& text) {
  if (text == "none" || text == "identity") return ShuffleMode::none;
  if (text == "long" || text == "long-range") return ShuffleMode::long_range;
  if (text == "short" || text == "short-range") return ShuffleMode::short_range;
  if (text == "random") return ShuffleMode::random;
  throw ConfigError("unknown shuffle mode '" + text + "' (valid: none, long, short, random)");
}

SpatialPermutation SpatialPermutation::identity(std::int64_t n) {
  SpatialPermutation p;
  p.n = n;
  p.map.resize(static_cast<std::size_t>(n));
  std::iota(p.map.begin(), p.map.end(), 0);
  return p;
}

bool SpatialPermutation::is_identity() const {
  for (std::size_t k = 0; k < map.size(); ++k) {
    if (map[k] != static_cast<std::int64_t>(k)) return false;
  }
  return true;
}

bool is_bijection(const std::vector<std::int64_t>& map) {
  std::vector<bool> hit(map.size(), false);
  for (auto v : map) {
    if (v < 0 || v >= static_cast<std::int64_t>(map.size()) || hit[static_cast<std::size_t>(v)]) {
      return false;
    }
    hit[static_cast<std::size_t>(v)] = true;
  }
  return true;
}

SpatialPermutation make_shuffle_permutation(std::int64_t n, std::int64_t m, ShuffleMode mode,
                                            Rng* rng) {
  if (n <= 0 || m <= 0) throw ConfigError("permutation extents must be positive");
  SpatialPermutation p = SpatialPermutation::identity(n);
  p.mode = mode;
  if (mode == ShuffleMode::none || n == m) return p;
  switch (mode) {
    case ShuffleMode::long_range: {
      if (n % m != 0) {
        throw ConfigError("long-range shuffle needs window " + std::to_string(m) + " to divide " +
                          std::to_string(n));
      }
      const std::int64_t groups = n / m;
      for (std::int64_t g = 0; g < groups; ++g)
        for (std::int64_t j = 0; j < m; ++j) p.map[g * m + j] = j * groups + g;
      break;
    }
    case ShuffleMode::short_range: {
      if (n % (2 * m) != 0) {
        throw ConfigError("short-range shuffle needs 2 x window " + std::to_string(2 * m) +
                          " to divide " + std::to_string(n));
      }
      for (std::int64_t a = 0; a < n / (2 * m); ++a)
        for (std::int64_t c = 0; c < 2; ++c)
          for (std::int64_t b = 0; b < m; ++b) p.map[a * 2 * m + c * m + b] = a * 2 * m + 2 * b + c;
      break;
    }
    case ShuffleMode::random: {
      if (rng == nullptr) throw ConfigError("random shuffle needs an explicit Rng");
      for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(rng->below(static_cast<std::uint64_t>(i + 1)));
        std::swap(p.map[static_cast<std::size_t>(i)], p.map[static_cast<std::size_t>(j)]);
      }
      break;
    }
    case ShuffleMode::none: break;
  }
  return p;
}

SpatialPermutation invert_permutation(const SpatialPermutation& p) {
  SpatialPermutation inv;
  inv.n = p.n;
  inv.mode = p.mode;
  inv.map.resize(p.map.size());
  for (std::size_t k = 0; k < p.map.size(); ++k) {
    inv.map[static_cast<std::size_t>(p.map[k])] = static_cast<std::int64_t>(k);
  }
  return inv;
}

SpatialPermutation compose(const SpatialPermutation& outer, const SpatialPermutation& inner) {
  if (outer.n != inner.n) throw ShapeError("composing permutations of different lengths");
  SpatialPermutation r;
  r.n = outer.n;
  r.map.resize(inner.map.size());
  for (std::size_t k = 0; k < inner.map.size(); ++k) {
    r.map[k] = outer.map[static_cast<std::size_t>(inner.map[k])];
  }
  return r;
}

WindowGrid WindowGrid::for_extent(std::int64_t h, std::int64_t w, std::int64_t m) {
  if (m <= 0) throw ConfigError("window size must be positive");
  if (h % m != 0 || w % m != 0) {
    throw PartitionError("extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by window " + std::to_string(m));
  }
  return {m, h / m, w / m};
}

WindowShuffle WindowShuffle::identity(std::int64_t h, std::int64_t w) {
  return {SpatialPermutation::identity(h), SpatialPermutation::identity(w)};
}

WindowShuffle WindowShuffle::make(std::int64_t h, std::int64_t w, std::int64_t m, ShuffleMode mode,
                                  std::uint64_t seed) {
  Rng row_rng(Rng::derive_seed(seed, 0));
  Rng col_rng(Rng::derive_seed(seed, 1));
  return {make_shuffle_permutation(h, m, mode, &row_rng),
          make_shuffle_permutation(w, m, mode, &col_rng)};
}

WindowShuffle WindowShuffle::inverse() const {
  return {invert_permutation(rows), invert_permutation(cols)};
}

namespace {

void check_map(const SpatialPermutation& p, std::int64_t n, const char* axis) {
  if (p.n != n || static_cast<std::int64_t>(p.map.size()) != n) {
    throw ShapeError(std::string(axis) + " permutation of length " + std::to_string(p.n) +
                     " for extent " + std::to_string(n));
  }
}

void check_feature_map(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + " expects (B, C, H, W), got " + shape_str(s));
}

// Gather index for partitioning the image seen through (row_src, col_src).
IndexMap partition_index(const Shape& s, std::int64_t m, const std::vector<std::int64_t>& row_src,
                         const std::vector<std::int64_t>& col_src) {
  const std::int64_t b = s[0], c = s[1], h = s[2], w = s[3];
  const auto grid = WindowGrid::for_extent(h, w, m);
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(b * c * h * w));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t wy = 0; wy < grid.gh; ++wy)
      for (std::int64_t wx = 0; wx < grid.gw; ++wx)
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const std::int64_t base = (bi * c + ci) * h;
          for (std::int64_t i = 0; i < m; ++i) {
            const std::int64_t row = row_src[static_cast<std::size_t>(wy * m + i)];
            for (std::int64_t j = 0; j < m; ++j) {
              index->push_back((base + row) * w + col_src[static_cast<std::size_t>(wx * m + j)]);
            }
          }
        }
  return index;
}

// Gather index for reassembling windows, reading image position (h, w)
// from the window slot at (row_pos[h], col_pos[w]).
IndexMap reverse_index(const Shape& s, std::int64_t m, std::int64_t h, std::int64_t w,
                       const std::vector<std::int64_t>& row_pos,
                       const std::vector<std::int64_t>& col_pos) {
  const auto grid = WindowGrid::for_extent(h, w, m);
  if (s[2] != m || s[3] != m || s[0] % grid.windows() != 0) {
    throw ShapeError("windows " + shape_str(s) + " inconsistent with window " + std::to_string(m) +
                     " over " + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::int64_t b = s[0] / grid.windows(), c = s[1];
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(b * c * h * w));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t y = 0; y < h; ++y) {
        const std::int64_t p = row_pos[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t q = col_pos[static_cast<std::size_t>(x)];
          const std::int64_t win = bi * grid.windows() + (p / m) * grid.gw + q / m;
          index->push_back(((win * c + ci) * m + p % m) * m + q % m);
        }
      }
  return index;
}

std::vector<std::int64_t> iota_vec(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t m) {
  check_feature_map(x.shape(), "window_partition");
  const auto& s = x.shape();
  auto index = partition_index(s, m, iota_vec(s[2]), iota_vec(s[3]));
  const std::int64_t nwin = s[0] * (s[2] / m) * (s[3] / m);
  return gather(x, std::move(index), Shape{nwin, s[1], m, m});
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& wins, std::int64_t m, std::int64_t h, std::int64_t w) {
  check_feature_map(wins.shape(), "window_reverse");
  auto index = reverse_index(wins.shape(), m, h, w, iota_vec(h), iota_vec(w));
  const std::int64_t b = wins.dim(0) / ((h / m) * (w / m));
  return gather(wins, std::move(index), Shape{b, wins.dim(1), h, w});
}

template <typename T>
Tensor<T> apply_spatial_permutation_2d(const Tensor<T>& x, const SpatialPermutation& rows,
                                       const SpatialPermutation& cols) {
  check_feature_map(x.shape(), "apply_spatial_permutation_2d");
  const auto& s = x.shape();
  check_map(rows, s[2], "row");
  check_map(cols, s[3], "column");
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(x.numel()));
  for (std::int64_t plane = 0; plane < s[0] * s[1]; ++plane)
    for (std::int64_t i = 0; i < s[2]; ++i)
      for (std::int64_t j = 0; j < s[3]; ++j)
        index->push_back((plane * s[2] + rows.map[static_cast<std::size_t>(i)]) * s[3] +
                         cols.map[static_cast<std::size_t>(j)]);
  return gather(x, std::move(index), s);
}

template <typename T>
Tensor<T> shuffled_window_partition(const Tensor<T>& x, std::int64_t m, const WindowShuffle& shuffle) {
  check_feature_map(x.shape(), "shuffled_window_partition");
  const auto& s = x.shape();
  check_map(shuffle.rows, s[2], "row");
  check_map(shuffle.cols, s[3], "column");
  auto index = partition_index(s, m, shuffle.rows.map, shuffle.cols.map);
  const std::int64_t nwin = s[0] * (s[2] / m) * (s[3] / m);
  return gather(x, std::move(index), Shape{nwin, s[1], m, m});
}

template <typename T>
Tensor<T> aligned_window_reverse(const Tensor<T>& wins, std::int64_t m, std::int64_t h,
                                 std::int64_t w, const WindowShuffle& shuffle) {
  check_feature_map(wins.shape(), "aligned_window_reverse");
  check_map(shuffle.rows, h, "row");
  check_map(shuffle.cols, w, "column");
  const auto inv = shuffle.inverse();
  auto index = reverse_index(wins.shape(), m, h, w, inv.rows.map, inv.cols.map);
  const std::int64_t b = wins.dim(0) / ((h / m) * (w / m));
  return gather(wins, std::move(index), Shape{b, wins.dim(1), h, w});
}

#define SF_INSTANTIATE(T)                                                                        \
  template Tensor<T> window_partition(const Tensor<T>&, std::int64_t);                          \
  template Tensor<T> window_reverse(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t); \
  template Tensor<T> apply_spatial_permutation_2d(const Tensor<T>&, const SpatialPermutation&,  \
                                                  const SpatialPermutation&);                   \
  template Tensor<T> shuffled_window_partition(const Tensor<T>&, std::int64_t,                  \
                                               const WindowShuffle&);                           \
  template Tensor<T> aligned_window_reverse(const Tensor<T>&, std::int64_t, std::int64_t,       \
                                            std::int64_t, const WindowShuffle&);

SF_INSTANTIATE(float)
SF_INSTANTIATE(double)

#undef SF_INSTANTIATE

}  // namespace shuffle_former
