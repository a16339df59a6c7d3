#include "shuffle_former/model.hpp"

#include <sstream>

namespace shuffle_former {

std::string to_string(NwcPosition position) {
  switch (position) {
    case NwcPosition::none: return "none";
    case NwcPosition::A: return "A";
    case NwcPosition::B: return "B";
    case NwcPosition::C: return "C";
  }
  return "?";
}

NwcPosition parse_nwc_position(const std::string& text) {
  if (text == "none") return NwcPosition::none;
  if (text == "A" || text == "a") return NwcPosition::A;
  if (text == "B" || text == "b") return NwcPosition::B;
  if (text == "C" || text == "c") return NwcPosition::C;
  throw ConfigError("unknown NWC position '" + text + "' (valid: none, A, B, C)");
}

AttentionConfig BlockConfig::attention() const {
  return {channels, head_dim, window, attn_bias, rel_pos_bias};
}

NwcConfig BlockConfig::nwc_config(std::int64_t width) const {
  return {width, window, true, even_rule};
}

MlpConfig BlockConfig::mlp() const {
  MlpConfig m{channels, mlp_ratio, std::nullopt};
  if (nwc == NwcPosition::C) m.inner_nwc = nwc_config(channels * mlp_ratio);
  return m;
}

template <typename T>
BlockParams<T> BlockParams<T>::init(const BlockConfig& config, Rng& rng) {
  BlockParams p;
  p.config = config;
  p.norm1 = BatchNormState<T>::identity(config.channels);
  p.attn = WmsaParams<T>::init(config.attention(), rng);
  if (config.nwc == NwcPosition::A || config.nwc == NwcPosition::B) {
    p.nwc = NwcParams<T>::init(config.nwc_config(config.channels));
  }
  p.norm2 = BatchNormState<T>::identity(config.channels);
  p.mlp = MlpParams<T>::init(config.mlp(), rng);
  return p;
}

template <typename T>
void BlockParams<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.add_norm(prefix + ".norm1", norm1);
  attn.collect(prefix + ".attn", out);
  if (nwc) nwc->collect(prefix + ".nwc", out);
  out.add_norm(prefix + ".norm2", norm2);
  mlp.collect(prefix + ".mlp", out);
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& z, BlockParams<T>& p, NormMode mode) {
  const auto& cfg = p.config;
  if (z.rank() != 4) throw ShapeError("block expects (B, C, H, W), got " + shape_str(z.shape()));
  const std::int64_t h = z.dim(2), w = z.dim(3), m = cfg.window;
  WindowGrid::for_extent(h, w, m);

  auto u = batchnorm2d(z, p.norm1, mode);
  if (cfg.nwc == NwcPosition::A) u = nwc_forward(u, *p.nwc);
  Tensor<T> attended;
  if (cfg.shuffle == ShuffleMode::none) {
    attended = window_reverse(wmsa_forward(window_partition(u, m), p.attn), m, h, w);
  } else {
    const auto shuffle = WindowShuffle::make(h, w, m, cfg.shuffle, cfg.shuffle_seed);
    attended = aligned_window_reverse(
        wmsa_forward(shuffled_window_partition(u, m, shuffle), p.attn), m, h, w, shuffle);
  }
  auto x = add(attended, z);
  auto y = cfg.nwc == NwcPosition::B ? nwc_forward(x, *p.nwc) : x;
  return add(mlp_forward(batchnorm2d(y, p.norm2, mode), p.mlp), y);
}

template <typename T>
Tensor<T> block_pair_forward(const Tensor<T>& z, BlockParams<T>& first, BlockParams<T>& second,
                             NormMode mode) {
  if (first.config.shuffle != ShuffleMode::none) {
    throw ConfigError("the first block of a pair uses plain window attention");
  }
  return block_forward(block_forward(z, first, mode), second, mode);
}

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(0.02));
  return t;
}

}  // namespace

template <typename T>
EmbedParams<T> EmbedParams<T>::init(std::int64_t in_chans, std::int64_t channels, Rng& rng) {
  if (channels % 2 != 0) throw ConfigError("embedding width must be even");
  EmbedParams p;
  p.conv1 = trunc_normal<T>({channels / 2, in_chans, 3, 3}, rng);
  p.norm1 = BatchNormState<T>::identity(channels / 2);
  p.conv2 = trunc_normal<T>({channels, channels / 2, 3, 3}, rng);
  p.norm2 = BatchNormState<T>::identity(channels);
  return p;
}

template <typename T>
void EmbedParams<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.add_parameter(prefix + ".conv1.weight", conv1);
  out.add_norm(prefix + ".norm1", norm1);
  out.add_parameter(prefix + ".conv2.weight", conv2);
  out.add_norm(prefix + ".norm2", norm2);
}

template <typename T>
Tensor<T> token_embed(const Tensor<T>& image, EmbedParams<T>& p, NormMode mode) {
  if (image.rank() != 4 || image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
    throw ShapeError("token embedding needs (B, C, H, W) with H and W divisible by 4, got " +
                     shape_str(image.shape()));
  }
  const Conv2dOptions down{2, Padding2d::symmetric(1), 1};
  auto h = gelu(batchnorm2d(conv2d(image, p.conv1, Tensor<T>{}, down), p.norm1, mode));
  return batchnorm2d(conv2d(h, p.conv2, Tensor<T>{}, down), p.norm2, mode);
}

template <typename T>
MergeParams<T> MergeParams<T>::init(std::int64_t channels, Rng& rng) {
  return {trunc_normal<T>({2 * channels, channels, 2, 2}, rng),
          Tensor<T>::zeros({2 * channels}, true)};
}

template <typename T>
void MergeParams<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
  out.add_parameter(prefix + ".weight", weight);
  out.add_parameter(prefix + ".bias", bias);
}

template <typename T>
Tensor<T> token_merge(const Tensor<T>& x, const MergeParams<T>& p) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("token merging needs even extents, got " + shape_str(x.shape()));
  }
  return conv2d(x, p.weight, p.bias, Conv2dOptions{2, {}, 1});
}

BlockConfig ModelConfig::block(std::size_t stage, std::int64_t index) const {
  BlockConfig b;
  b.channels = stage_channels(stage);
  b.head_dim = head_dim;
  b.window = window;
  b.mlp_ratio = mlp_ratio;
  b.shuffle = index % 2 == 1 ? shuffle : ShuffleMode::none;
  b.nwc = nwc;
  b.attn_bias = attn_bias;
  b.rel_pos_bias = rel_pos_bias;
  b.even_rule = even_rule;
  std::uint64_t ordinal = 0;
  for (std::size_t s = 0; s < stage; ++s) ordinal += static_cast<std::uint64_t>(depths[s]);
  b.shuffle_seed = Rng::derive_seed(shuffle_seed, ordinal + static_cast<std::uint64_t>(index));
  return b;
}

void ModelConfig::validate() const {
  if (depths.empty()) throw ConfigError("model needs at least one stage");
  if (embed_dim <= 0 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be positive and even");
  if (head_dim <= 0 || embed_dim % head_dim != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not a multiple of head_dim " +
                      std::to_string(head_dim));
  }
  for (std::size_t s = 0; s < depths.size(); ++s) {
    if (depths[s] <= 0 || depths[s] % 2 != 0) {
      throw ConfigError("stage " + std::to_string(s + 1) + " depth " + std::to_string(depths[s]) +
                        " must be positive and even (blocks come in pairs)");
    }
  }
  if (window <= 0 || mlp_ratio <= 0 || num_classes <= 0 || in_chans <= 0 || img_size <= 0) {
    throw ConfigError("model extents must be positive");
  }
  if (nwc != NwcPosition::none && window % 2 == 0 && even_rule == EvenKernelRule::reject) {
    throw ConfigError("even window " + std::to_string(window) +
                      " with NWC needs even_kernel=same_asymmetric");
  }
}

void ModelConfig::check_resolution(std::int64_t h, std::int64_t w) const {
  if (h % 4 != 0 || w % 4 != 0) {
    throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by 4 for the token embedding");
  }
  std::int64_t gh = h / 4, gw = w / 4;
  for (std::size_t s = 0; s < depths.size(); ++s) {
    const std::string stage = "stage " + std::to_string(s + 1);
    if (gh % window != 0 || gw % window != 0) {
      throw PartitionError(stage + " grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                           " is not divisible by window " + std::to_string(window));
    }
    if (s + 1 < depths.size()) {
      if (gh % 2 != 0 || gw % 2 != 0) {
        throw ShapeError(stage + " grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                         " cannot be merged (odd extent)");
      }
      gh /= 2;
      gw /= 2;
    }
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "name=" << name << '\n' << "embed_dim=" << embed_dim << '\n' << "depths=";
  for (std::size_t i = 0; i < depths.size(); ++i) os << (i ? "," : "") << depths[i];
  os << '\n'
     << "window=" << window << '\n'
     << "head_dim=" << head_dim << '\n'
     << "mlp_ratio=" << mlp_ratio << '\n'
     << "num_classes=" << num_classes << '\n'
     << "in_chans=" << in_chans << '\n'
     << "img_size=" << img_size << '\n'
     << "shuffle=" << to_string(shuffle) << '\n'
     << "nwc=" << to_string(nwc) << '\n'
     << "attn_bias=" << (attn_bias ? "true" : "false") << '\n'
     << "rel_pos_bias=" << (rel_pos_bias ? "true" : "false") << '\n'
     << "even_kernel=" << (even_rule == EvenKernelRule::reject ? "reject" : "same_asymmetric")
     << '\n'
     << "shuffle_seed=" << shuffle_seed << '\n';
  return os.str();
}

namespace {

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects an integer, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("key '" + key + "' expects true/false, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "name") {
      c.name = value;
    } else if (key == "embed_dim") {
      c.embed_dim = parse_int(key, value);
    } else if (key == "depths") {
      c.depths.clear();
      std::istringstream ds(value);
      std::string item;
      while (std::getline(ds, item, ',')) c.depths.push_back(parse_int(key, trim(item)));
    } else if (key == "window") {
      c.window = parse_int(key, value);
    } else if (key == "head_dim") {
      c.head_dim = parse_int(key, value);
    } else if (key == "mlp_ratio") {
      c.mlp_ratio = parse_int(key, value);
    } else if (key == "num_classes") {
      c.num_classes = parse_int(key, value);
    } else if (key == "in_chans") {
      c.in_chans = parse_int(key, value);
    } else if (key == "img_size") {
      c.img_size = parse_int(key, value);
    } else if (key == "shuffle") {
      c.shuffle = parse_shuffle_mode(value);
    } else if (key == "nwc") {
      c.nwc = parse_nwc_position(value);
    } else if (key == "attn_bias") {
      c.attn_bias = parse_bool(key, value);
    } else if (key == "rel_pos_bias") {
      c.rel_pos_bias = parse_bool(key, value);
    } else if (key == "even_kernel") {
      if (value == "reject") {
        c.even_rule = EvenKernelRule::reject;
      } else if (value == "same_asymmetric") {
        c.even_rule = EvenKernelRule::same_asymmetric;
      } else {
        throw ConfigError("even_kernel must be reject or same_asymmetric");
      }
    } else if (key == "shuffle_seed") {
      c.shuffle_seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  return c;
}

ModelConfig build_variant(const std::string& name) {
  ModelConfig c;
  if (name == "T") {
    c.embed_dim = 96;
    c.depths = {2, 2, 6, 2};
  } else if (name == "S") {
    c.embed_dim = 96;
    c.depths = {2, 2, 18, 2};
  } else if (name == "B") {
    c.embed_dim = 128;
    c.depths = {2, 2, 18, 2};
  } else {
    throw ConfigError("unknown variant '" + name + "' (valid: T, S, B)");
  }
  c.name = "Shuffle-" + name;
  return c;
}

template <typename T>
ShuffleTransformer<T>::ShuffleTransformer(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  embed_ = EmbedParams<T>::init(config_.in_chans, config_.embed_dim, rng);
  for (std::size_t s = 0; s < config_.stages(); ++s) {
    if (s > 0) merges_.push_back(MergeParams<T>::init(config_.stage_channels(s - 1), rng));
    std::vector<BlockParams<T>> blocks;
    for (std::int64_t i = 0; i < config_.depths[s]; ++i) {
      blocks.push_back(BlockParams<T>::init(config_.block(s, i), rng));
    }
    stages_.push_back(std::move(blocks));
  }
  const std::int64_t last = config_.stage_channels(config_.stages() - 1);
  head_norm_ = BatchNormState<T>::identity(last);
  head_w_ = trunc_normal<T>({config_.num_classes, last}, rng);
  head_b_ = Tensor<T>::zeros({config_.num_classes}, true);
}

template <typename T>
std::vector<Tensor<T>> ShuffleTransformer<T>::forward_features(const Tensor<T>& images,
                                                               NormMode mode) {
  if (images.rank() != 4 || images.dim(1) != config_.in_chans) {
    throw ShapeError("model expects (B, " + std::to_string(config_.in_chans) + ", H, W), got " +
                     shape_str(images.shape()));
  }
  config_.check_resolution(images.dim(2), images.dim(3));
  std::vector<Tensor<T>> features;
  auto x = token_embed(images, embed_, mode);
  features.push_back(x);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) x = token_merge(x, merges_[s - 1]);
    for (std::size_t i = 0; i < stages_[s].size(); i += 2) {
      x = block_pair_forward(x, stages_[s][i], stages_[s][i + 1], mode);
    }
    features.push_back(x);
  }
  return features;
}

template <typename T>
Tensor<T> ShuffleTransformer<T>::forward(const Tensor<T>& images, NormMode mode) {
  auto x = forward_features(images, mode).back();
  auto pooled = mean_pool_hw(batchnorm2d(x, head_norm_, mode));
  return linear(pooled, head_w_, head_b_);
}

template <typename T>
ParameterList<T> ShuffleTransformer<T>::state() const {
  ParameterList<T> out;
  embed_.collect("embed", out);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string stage = "stages." + std::to_string(s);
    if (s > 0) merges_[s - 1].collect(stage + ".merge", out);
    for (std::size_t i = 0; i < stages_[s].size(); ++i) {
      stages_[s][i].collect(stage + ".blocks." + std::to_string(i), out);
    }
  }
  out.add_norm("head.norm", head_norm_);
  out.add_parameter("head.fc.weight", head_w_);
  out.add_parameter("head.fc.bias", head_b_);
  return out;
}

template <typename T>
std::vector<Tensor<T>> ShuffleTransformer<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : state().parameters) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::int64_t ShuffleTransformer<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : state().parameters) n += p.tensor.numel();
  return n;
}

template <typename T>
void ShuffleTransformer<T>::set_requires_grad(bool value) {
  for (auto& p : state().parameters) p.tensor.set_requires_grad(value);
}

#define SF_INSTANTIATE(T)                                                                     \
  template struct BlockParams<T>;                                                             \
  template struct EmbedParams<T>;                                                             \
  template struct MergeParams<T>;                                                             \
  template class ShuffleTransformer<T>;                                                       \
  template Tensor<T> block_forward(const Tensor<T>&, BlockParams<T>&, NormMode);              \
  template Tensor<T> block_pair_forward(const Tensor<T>&, BlockParams<T>&, BlockParams<T>&,   \
                                        NormMode);                                            \
  template Tensor<T> token_embed(const Tensor<T>&, EmbedParams<T>&, NormMode);                \
  template Tensor<T> token_merge(const Tensor<T>&, const MergeParams<T>&);

SF_INSTANTIATE(float)
SF_INSTANTIATE(double)

#undef SF_INSTANTIATE

}  // namespace shuffle_former
