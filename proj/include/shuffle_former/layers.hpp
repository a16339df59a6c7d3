#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shuffle_former/ops.hpp"
#include "shuffle_former/rng.hpp"
#include "shuffle_former/tensor.hpp"

namespace shuffle_former {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Learnable tensors and persistent buffers of a module, in a fixed order.
template <typename T>
struct ParameterList {
  std::vector<NamedTensor<T>> parameters;
  std::vector<NamedTensor<T>> buffers;

  void add_parameter(std::string name, const Tensor<T>& t) {
    if (t.defined()) parameters.push_back({std::move(name), t});
  }
  void add_buffer(std::string name, const Tensor<T>& t) {
    if (t.defined()) buffers.push_back({std::move(name), t});
  }
  void add_norm(const std::string& prefix, const BatchNormState<T>& bn) {
    add_parameter(prefix + ".weight", bn.gamma);
    add_parameter(prefix + ".bias", bn.beta);
    add_buffer(prefix + ".running_mean", bn.running_mean);
    add_buffer(prefix + ".running_var", bn.running_var);
  }
};

// ---------------------------------------------------------------------------
// Window multi-head self-attention

struct AttentionConfig {
  std::int64_t channels = 0;
  std::int64_t head_dim = 32;
  std::int64_t window = 7;
  bool bias = true;            // on q, k, v and the output projection
  bool rel_pos_bias = false;   // learned (2M-1)^2 x heads table, off by default

  std::int64_t heads() const { return channels / head_dim; }
  void validate() const;
};

template <typename T>
struct WmsaParams {
  AttentionConfig config;
  Tensor<T> wq, wk, wv, wo;  // (C, C, 1, 1)
  Tensor<T> bq, bk, bv, bo;  // (C) when config.bias
  Tensor<T> rel_table;       // ((2M-1)^2, heads) when config.rel_pos_bias

  // Projection weights from a truncated normal (std 0.02), biases zero.
  static WmsaParams init(const AttentionConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

// Self-attention inside each window of wins (num_windows, C, m, m):
// per head softmax(Q K^T / sqrt(head_dim)) V, heads merged, then projected.
template <typename T>
Tensor<T> wmsa_forward(const Tensor<T>& wins, const WmsaParams<T>& p);

// ---------------------------------------------------------------------------
// Neighbor-window connection: x + depthwise_conv(x) with a window-sized kernel

// How an even kernel is padded to keep the resolution. same_asymmetric pads
// (k-1)/2 before and k/2 after, so the kernel covers offsets [-(k-1)/2, k/2].
enum class EvenKernelRule { reject, same_asymmetric };

struct NwcConfig {
  std::int64_t channels = 0;
  std::int64_t kernel = 7;
  bool bias = true;
  EvenKernelRule even_rule = EvenKernelRule::reject;

  Padding2d padding() const;
  // Inclusive offset range of input positions feeding one output position.
  std::int64_t reach_before() const { return (kernel - 1) / 2; }
  std::int64_t reach_after() const { return kernel / 2; }
};

template <typename T>
struct NwcParams {
  NwcConfig config;
  Tensor<T> kernel;  // (C, 1, k, k)
  Tensor<T> bias;    // (C)

  // Zero kernel and bias: the connection starts as the identity.
  static NwcParams init(const NwcConfig& config);
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

template <typename T>
Tensor<T> nwc_forward(const Tensor<T>& x, const NwcParams<T>& p);

// ---------------------------------------------------------------------------
// Pointwise MLP: 1x1 conv -> GELU -> [optional NWC at hidden width] -> 1x1 conv

struct MlpConfig {
  std::int64_t channels = 0;
  std::int64_t ratio = 4;
  std::optional<NwcConfig> inner_nwc;  // set for NWC position C

  std::int64_t hidden() const { return channels * ratio; }
};

template <typename T>
struct MlpParams {
  MlpConfig config;
  Tensor<T> fc1_w, fc1_b;  // (hidden, C, 1, 1), (hidden)
  Tensor<T> fc2_w, fc2_b;  // (C, hidden, 1, 1), (C)
  std::optional<NwcParams<T>> inner;

  static MlpParams init(const MlpConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParameterList<T>& out) const;
};

// MLP branch only; the caller adds the residual.
template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& p);

}  // namespace shuffle_former
