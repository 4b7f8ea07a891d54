#pragma once

// Differentiable operations. Each op computes its value eagerly; when a tape is
// active and any input requires a gradient, it records a backward closure.
//
// Broadcasting is limited to add_bias (trailing-dimension bias); every other
// shape mix is a dimension error.

#include <optional>
#include <vector>

#include "mte/kernels.hpp"
#include "mte/tensor.hpp"

namespace mte {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., D] + bias[D]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, Index axis, T temperature = T(1));

template <typename T>
Tensor<T> log_softmax_axis(const Tensor<T>& x, Index axis, T temperature = T(1));

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// x: [H, W, D] or [B, H, W, D]; kernel: [k, k, D] with k odd; zero "same" padding.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel);

// x: [..., D], weight: [D, D'], bias: [D'] -> [..., D']
template <typename T>
Tensor<T> pointwise_conv1x1(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Identity forward; blocks gradient flow.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// out[i] = x[rows[i]] over the trailing dimension; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<Index>& rows);

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

// x: [groups * n, D] -> [groups, D], mean over each consecutive block of n rows.
template <typename T>
Tensor<T> segment_mean_rows(const Tensor<T>& x, Index groups);

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));

// out[r] = x[r, cols[r]]
template <typename T>
Tensor<T> pick_cols(const Tensor<T>& x, const std::vector<Index>& cols);

// Multi-head attention over image-major token rows (see kernels::AttentionShape).
// `allowed` is [q_tokens x kv_tokens]; when `probs_out` is given it receives the
// attention probabilities [batch, heads, q_tokens, kv_tokens].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const kernels::AttentionShape& shape,
                    const std::vector<unsigned char>* allowed = nullptr,
                    Tensor<T>* probs_out = nullptr);

}  // namespace mte
