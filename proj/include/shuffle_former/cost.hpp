#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shuffle_former/model.hpp"

namespace shuffle_former {

// Counting convention shared by every report:
//   - one multiply-accumulate counts as one FLOP;
//   - batch norm, activations, softmax, residual adds, bias adds, pooling and
//     the shuffle/partition permutations count as zero;
//   - params count every learnable weight, bias, relative position table and
//     batch-norm affine pair; running statistics are buffers, not params.
inline constexpr const char* kCostConvention =
    "1 MAC = 1 FLOP; BN, activations, softmax, residual/bias adds, pooling and "
    "window/shuffle permutations excluded; params exclude BN running stats";

struct CostRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::string model;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::string convention = kCostConvention;
  std::vector<CostRow> rows;

  std::int64_t total_params() const;
  std::int64_t total_flops() const;
  const CostRow* find(const std::string& name) const;

  // name,params,flops with a TOTAL row; `echo` lines are emitted first as
  // '#'-prefixed comments.
  std::string to_csv(const std::string& echo = {}) const;
  std::string to_text() const;
};

// Closed-form ledger for `config` at an input resolution.
CostReport cost_ledger(const ModelConfig& config, std::int64_t height, std::int64_t width);

// Ledger at the config's own img_size (params do not depend on resolution).
CostReport count_params(const ModelConfig& config);
CostReport count_flops(const ModelConfig& config, std::int64_t height, std::int64_t width);

// Multi-head attention at one stage with hw tokens of width c.
// Projections: 4 hw c^2. Window core (QK^T and AV): 2 m^2 hw c.
// Global core: 2 (hw)^2 c.
std::int64_t window_attention_core_flops(std::int64_t hw, std::int64_t channels, std::int64_t window);
std::int64_t global_attention_core_flops(std::int64_t hw, std::int64_t channels);
std::int64_t attention_projection_flops(std::int64_t hw, std::int64_t channels);

}  // namespace shuffle_former
