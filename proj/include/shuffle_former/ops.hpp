#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "shuffle_former/tensor.hpp"

namespace shuffle_former {

// Differentiable primitives. All functions are pure with respect to their
// inputs except batchnorm2d in train mode, which updates the running
// statistics it is given.

enum class Validation { off, on };

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape new_shape);

// Materialized axis permutation: out.shape[i] = t.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<int>& axes);

// reshape to new_shape, then permute by axis_order.
template <typename T>
Tensor<T> reshape_permute(const Tensor<T>& t, Shape new_shape, const std::vector<int>& axis_order);

// out[i] = t[index[i]] over flattened storage. The adjoint scatter-adds,
// so repeated indices are allowed.
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;
template <typename T>
Tensor<T> gather(const Tensor<T>& t, IndexMap index, Shape out_shape);

// (m, k) x (k, n) or batched (b, m, k) x (b, k, n).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& t, Validation validation = Validation::off);

struct Padding2d {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;
  static Padding2d symmetric(int p) { return {p, p, p, p}; }
};

struct Conv2dOptions {
  int stride = 1;
  Padding2d padding;
  int groups = 1;
};

// x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw); bias: (Cout) or undefined.
// Output extent per axis: floor((in + pad_before + pad_after - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dOptions& options);

enum class NormMode { train, eval };

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;         // (C), learnable
  Tensor<T> beta;          // (C), learnable
  Tensor<T> running_mean;  // (C), buffer
  Tensor<T> running_var;   // (C), buffer
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormState identity(std::int64_t channels);
};

// Per-channel normalization of (B, C, H, W). Train mode normalizes with the
// biased batch variance and folds the unbiased variance into running_var.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& state, NormMode mode);

// Exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& t);

// Same-shape elementwise sum.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& t, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& t);

// (B, C, H, W) -> (B, C)
template <typename T>
Tensor<T> mean_pool_hw(const Tensor<T>& x);

// x: (B, in), w: (out, in), bias: (out) or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Mean softmax cross-entropy of logits (B, K) against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);

// Throws NumericError naming `what` if any value is NaN or infinite.
template <typename T>
void validate_finite(const Tensor<T>& t, const char* what);

}  // namespace shuffle_former
