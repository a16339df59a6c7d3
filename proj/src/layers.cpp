#include "shuffle_former/layers.hpp"

#include <cmath>

namespace shuffle_former {

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double std) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(std));
  return t;
}

constexpr double kInitStd = 0.02;

}  // namespace

void AttentionConfig::validate() const {
  if (channels <= 0 || head_dim <= 0 || window <= 0) {
    throw ConfigError("attention extents must be positive");
  }
  if (channels % head_dim != 0) {
    throw ConfigError("channels " + std::to_string(channels) + " not a multiple of head_dim " +
                      std::to_string(head_dim));
  }
}

template <typename T>
WmsaParams<T> WmsaParams<T>::init(const AttentionConfig& config, Rng& rng) {
  config.validate();
  WmsaParams p;
  p.config = config;
  const std::int64_t c = config.channels;
  p.wq = trunc_normal<T>({c, c, 1, 1}, rng, kInitStd);
  p.wk = trunc_normal<T>({c, c, 1, 1}, rng, kInitStd);
  p.wv = trunc_normal<T>({c, c, 1, 1}, rng, kInitStd);
  p.wo = trunc_normal<T>({c, c, 1, 1}, rng, kInitStd);
  if (config.bias) {
    p.bq = Tensor<T>::zeros({c}, true);
    p.bk = Tensor<T>::zeros({c}, true);
    p.bv = Tensor<T>::zeros({c}, true);
    p.bo = Tensor<T>::zeros({c}, true);
  }
  if (config.rel_pos_bias) {
    const std::int64_t span = 2 * config.window - 1;
    p.rel_table = trunc_normal<T>({span * span, config.heads()}, rng, kInitStd);
  }
  return p;
}

template <typename T>
void WmsaParams<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.add_parameter(prefix + ".q.weight", wq);
  out.add_parameter(prefix + ".q.bias", bq);
  out.add_parameter(prefix + ".k.weight", wk);
  out.add_parameter(prefix + ".k.bias", bk);
  out.add_parameter(prefix + ".v.weight", wv);
  out.add_parameter(prefix + ".v.bias", bv);
  out.add_parameter(prefix + ".proj.weight", wo);
  out.add_parameter(prefix + ".proj.bias", bo);
  out.add_parameter(prefix + ".rel_pos_table", rel_table);
}

namespace {

// (num_windows * heads, m*m, m*m) gather from the relative position table.
IndexMap relative_bias_index(std::int64_t windows, std::int64_t heads, std::int64_t m) {
  const std::int64_t tokens = m * m;
  const std::int64_t span = 2 * m - 1;
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(windows * heads * tokens * tokens));
  for (std::int64_t w = 0; w < windows; ++w)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t i = 0; i < tokens; ++i)
        for (std::int64_t j = 0; j < tokens; ++j) {
          const std::int64_t dy = i / m - j / m + m - 1;
          const std::int64_t dx = i % m - j % m + m - 1;
          index->push_back((dy * span + dx) * heads + h);
        }
  return index;
}

}  // namespace

template <typename T>
Tensor<T> wmsa_forward(const Tensor<T>& wins, const WmsaParams<T>& p) {
  const auto& cfg = p.config;
  if (wins.rank() != 4 || wins.dim(2) != wins.dim(3)) {
    throw ShapeError("wmsa expects square windows (N, C, m, m), got " + shape_str(wins.shape()));
  }
  if (wins.dim(1) != cfg.channels) {
    throw ConfigError("wmsa built for " + std::to_string(cfg.channels) + " channels, input has " +
                      std::to_string(wins.dim(1)));
  }
  const std::int64_t nw = wins.dim(0), c = cfg.channels, m = wins.dim(2);
  const std::int64_t heads = cfg.heads(), d = cfg.head_dim, tokens = m * m;
  if (cfg.rel_pos_bias && m != cfg.window) {
    throw ConfigError("relative position table built for window " + std::to_string(cfg.window));
  }
  const Conv2dOptions pointwise{};
  auto q = conv2d(wins, p.wq, p.bq, pointwise);
  auto k = conv2d(wins, p.wk, p.bk, pointwise);
  auto v = conv2d(wins, p.wv, p.bv, pointwise);
  // Channel c = head * d + e, so (N, C, m, m) regroups to (N*heads, d, tokens).
  q = reshape_permute(q, {nw * heads, d, tokens}, {0, 2, 1});
  k = reshape(k, {nw * heads, d, tokens});
  v = reshape_permute(v, {nw * heads, d, tokens}, {0, 2, 1});
  auto logits = scale(matmul(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  if (cfg.rel_pos_bias) {
    logits = add(logits, gather(p.rel_table, relative_bias_index(nw, heads, m),
                                Shape{nw * heads, tokens, tokens}));
  }
  auto attn = softmax_lastdim(logits);
  auto merged = reshape(permute(matmul(attn, v), {0, 2, 1}), {nw, c, m, m});
  return conv2d(merged, p.wo, p.bo, pointwise);
}

Padding2d NwcConfig::padding() const {
  if (kernel <= 0) throw ConfigError("NWC kernel must be positive");
  if (kernel % 2 == 0 && even_rule == EvenKernelRule::reject) {
    throw ConfigError("even NWC kernel " + std::to_string(kernel) +
                      " needs an explicit padding rule (same_asymmetric)");
  }
  const int before = static_cast<int>(reach_before());
  const int after = static_cast<int>(reach_after());
  return {before, before, after, after};
}

template <typename T>
NwcParams<T> NwcParams<T>::init(const NwcConfig& config) {
  (void)config.padding();
  NwcParams p;
  p.config = config;
  p.kernel = Tensor<T>::zeros({config.channels, 1, config.kernel, config.kernel}, true);
  if (config.bias) p.bias = Tensor<T>::zeros({config.channels}, true);
  return p;
}

template <typename T>
void NwcParams<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.add_parameter(prefix + ".weight", kernel);
  out.add_parameter(prefix + ".bias", bias);
}

template <typename T>
Tensor<T> nwc_forward(const Tensor<T>& x, const NwcParams<T>& p) {
  const auto& cfg = p.config;
  if (x.rank() != 4 || x.dim(1) != cfg.channels) {
    throw ConfigError("NWC built for " + std::to_string(cfg.channels) + " channels, input " +
                      shape_str(x.shape()));
  }
  Conv2dOptions opt;
  opt.padding = cfg.padding();
  opt.groups = static_cast<int>(cfg.channels);
  return add(x, conv2d(x, p.kernel, p.bias, opt));
}

template <typename T>
MlpParams<T> MlpParams<T>::init(const MlpConfig& config, Rng& rng) {
  if (config.channels <= 0 || config.ratio <= 0) throw ConfigError("MLP widths must be positive");
  MlpParams p;
  p.config = config;
  const std::int64_t c = config.channels, h = config.hidden();
  p.fc1_w = trunc_normal<T>({h, c, 1, 1}, rng, kInitStd);
  p.fc1_b = Tensor<T>::zeros({h}, true);
  p.fc2_w = trunc_normal<T>({c, h, 1, 1}, rng, kInitStd);
  p.fc2_b = Tensor<T>::zeros({c}, true);
  if (config.inner_nwc) {
    if (config.inner_nwc->channels != h) {
      throw ConfigError("inner NWC width must equal MLP hidden width " + std::to_string(h));
    }
    p.inner = NwcParams<T>::init(*config.inner_nwc);
  }
  return p;
}

template <typename T>
void MlpParams<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.add_parameter(prefix + ".fc1.weight", fc1_w);
  out.add_parameter(prefix + ".fc1.bias", fc1_b);
  if (inner) inner->collect(prefix + ".nwc", out);
  out.add_parameter(prefix + ".fc2.weight", fc2_w);
  out.add_parameter(prefix + ".fc2.bias", fc2_b);
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& p) {
  if (x.rank() != 4 || x.dim(1) != p.config.channels || p.fc1_w.dim(0) != p.fc2_w.dim(1)) {
    throw ConfigError("MLP width mismatch for input " + shape_str(x.shape()));
  }
  auto h = gelu(conv2d(x, p.fc1_w, p.fc1_b, Conv2dOptions{}));
  if (p.inner) h = nwc_forward(h, *p.inner);
  return conv2d(h, p.fc2_w, p.fc2_b, Conv2dOptions{});
}

#define SF_INSTANTIATE(T)                                               \
  template struct WmsaParams<T>;                                        \
  template struct NwcParams<T>;                                         \
  template struct MlpParams<T>;                                         \
  template Tensor<T> wmsa_forward(const Tensor<T>&, const WmsaParams<T>&); \
  template Tensor<T> nwc_forward(const Tensor<T>&, const NwcParams<T>&);   \
  template Tensor<T> mlp_forward(const Tensor<T>&, const MlpParams<T>&);

SF_INSTANTIATE(float)
SF_INSTANTIATE(double)

#undef SF_INSTANTIATE

}  // namespace shuffle_former
