#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shuffle_former/layers.hpp"
#include "shuffle_former/ops.hpp"
#include "shuffle_former/windowing.hpp"

namespace shuffle_former {

// Where the neighbor-window connection sits inside a block.
//   A: on the normalized input, before (shuffle) attention
//   B: after the attention residual, before the MLP (default)
//   C: inside the MLP, between its two 1x1 convs, at hidden width
enum class NwcPosition { none, A, B, C };

std::string to_string(NwcPosition position);
NwcPosition parse_nwc_position(const std::string& text);

struct BlockConfig {
  std::int64_t channels = 96;
  std::int64_t head_dim = 32;
  std::int64_t window = 7;
  std::int64_t mlp_ratio = 4;
  ShuffleMode shuffle = ShuffleMode::none;
  NwcPosition nwc = NwcPosition::B;
  bool attn_bias = true;
  bool rel_pos_bias = false;
  EvenKernelRule even_rule = EvenKernelRule::reject;
  std::uint64_t shuffle_seed = 0;  // only read in random mode

  std::int64_t heads() const { return channels / head_dim; }
  AttentionConfig attention() const;
  NwcConfig nwc_config(std::int64_t width) const;
  MlpConfig mlp() const;
};

template <typename T>
struct BlockParams {
  BlockConfig config;
  BatchNormState<T> norm1;
  WmsaParams<T> attn;
  std::optional<NwcParams<T>> nwc;  // positions A and B
  BatchNormState<T> norm2;
  MlpParams<T> mlp;

  static BlockParams init(const BlockConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

// x = (Shuffle-)WMSA(BN(z)) + z;  y = NWC(x);  z' = MLP(BN(y)) + y
// with NWC relocated according to config.nwc. Shuffle-WMSA partitions with
// the fused shuffle gather and reassembles with the fused alignment gather.
template <typename T>
Tensor<T> block_forward(const Tensor<T>& z, BlockParams<T>& p, NormMode mode);

// Two consecutive blocks: the first must not shuffle.
template <typename T>
Tensor<T> block_pair_forward(const Tensor<T>& z, BlockParams<T>& first, BlockParams<T>& second,
                             NormMode mode);

// conv3x3/s2 (3 -> C/2) -> BN -> GELU -> conv3x3/s2 (C/2 -> C) -> BN
template <typename T>
struct EmbedParams {
  Tensor<T> conv1;  // (C/2, in, 3, 3)
  BatchNormState<T> norm1;
  Tensor<T> conv2;  // (C, C/2, 3, 3)
  BatchNormState<T> norm2;

  static EmbedParams init(std::int64_t in_chans, std::int64_t channels, Rng& rng);
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

template <typename T>
Tensor<T> token_embed(const Tensor<T>& image, EmbedParams<T>& p, NormMode mode);

// 2x2 stride-2 conv, C -> 2C, with bias.
template <typename T>
struct MergeParams {
  Tensor<T> weight;  // (2C, C, 2, 2)
  Tensor<T> bias;    // (2C)

  static MergeParams init(std::int64_t channels, Rng& rng);
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

template <typename T>
Tensor<T> token_merge(const Tensor<T>& x, const MergeParams<T>& p);

struct ModelConfig {
  std::string name = "custom";
  std::int64_t embed_dim = 96;
  std::vector<std::int64_t> depths{2, 2, 6, 2};
  std::int64_t window = 7;
  std::int64_t head_dim = 32;
  std::int64_t mlp_ratio = 4;
  std::int64_t num_classes = 1000;
  std::int64_t in_chans = 3;
  std::int64_t img_size = 224;
  ShuffleMode shuffle = ShuffleMode::long_range;  // used by odd-indexed blocks
  NwcPosition nwc = NwcPosition::B;
  bool attn_bias = true;
  bool rel_pos_bias = false;
  EvenKernelRule even_rule = EvenKernelRule::reject;
  // Seeds the frozen per-block permutations of random shuffle mode.
  std::uint64_t shuffle_seed = 0;

  std::size_t stages() const { return depths.size(); }
  std::int64_t stage_channels(std::size_t stage) const { return embed_dim << stage; }
  std::int64_t stage_heads(std::size_t stage) const { return stage_channels(stage) / head_dim; }
  // Block config for block `index` (0-based) of `stage`, with its own
  // permutation seed derived from shuffle_seed.
  BlockConfig block(std::size_t stage, std::int64_t index) const;

  // Structural checks (widths, even depths, head split).
  void validate() const;
  // Every stage grid must divide by the window and every merge needs an
  // even grid; the error names the offending stage.
  void check_resolution(std::int64_t h, std::int64_t w) const;

  // Plain-text key=value lines, one per field, in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

// T: C=96, depths {2,2,6,2}; S: C=96, {2,2,18,2}; B: C=128, {2,2,18,2}.
ModelConfig build_variant(const std::string& name);

// Four-stage (or fewer) hierarchical classifier:
// embed -> [blocks -> merge]* -> blocks -> BN -> global average pool -> linear.
template <typename T>
class ShuffleTransformer {
 public:
  ShuffleTransformer(ModelConfig config, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& images, NormMode mode);
  // Output of the embedding and of every stage, for shape inspection.
  std::vector<Tensor<T>> forward_features(const Tensor<T>& images, NormMode mode);

  const ModelConfig& config() const { return config_; }
  ParameterList<T> state() const;
  std::vector<Tensor<T>> parameters() const;
  std::int64_t parameter_count() const;
  void set_requires_grad(bool value);

  BlockParams<T>& block(std::size_t stage, std::size_t index) { return stages_.at(stage).at(index); }
  EmbedParams<T>& embed() { return embed_; }
  Tensor<T>& head_weight() { return head_w_; }

 private:
  ModelConfig config_;
  EmbedParams<T> embed_;
  std::vector<std::vector<BlockParams<T>>> stages_;
  std::vector<MergeParams<T>> merges_;
  BatchNormState<T> head_norm_;
  Tensor<T> head_w_;
  Tensor<T> head_b_;
};

}  // namespace shuffle_former
