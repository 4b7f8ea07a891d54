#pragma once

// Dense compute kernels behind the differentiable ops.
//
// Every kernel parallelizes over independent output elements only; each output
// element is produced by one thread with a fixed summation order, so results are
// bit-identical for any OpenMP thread count. The serial versions in
// `kernels::reference` are the straightforward loop nests used as test oracles
// and as the baseline in the benchmark target.

#include <cstddef>
#include <span>

namespace mte::kernels {

using Index = std::size_t;

// C[m x n] (+)= A[m x k] * B[k x n], row-major.
template <typename T>
void gemm(Index m, Index k, Index n, const T* a, const T* b, T* c, bool accumulate);

// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose(Index rows, Index cols, const T* in, T* out);

// Row-wise softmax of in * inv_temperature over the trailing `cols`.
template <typename T>
void softmax_rows(Index rows, Index cols, const T* in, T* out, T inv_temperature);

template <typename T>
void log_softmax_rows(Index rows, Index cols, const T* in, T* out, T inv_temperature);

// Per-row normalization; mean and reciprocal std are written for the backward pass.
template <typename T>
void layer_norm_rows(Index rows, Index cols, const T* in, const T* gamma, const T* beta, T eps,
                     T* out, T* mean, T* rstd);

template <typename T>
void layer_norm_rows_backward(Index rows, Index cols, const T* in, const T* gamma, const T* mean,
                              const T* rstd, const T* grad_out, T* grad_in, T* grad_gamma,
                              T* grad_beta);

// tanh-approximated GELU and its derivative.
template <typename T>
void gelu(Index n, const T* in, T* out);

template <typename T>
void gelu_backward(Index n, const T* in, const T* grad_out, T* grad_in);

// Depthwise "same" correlation with zero padding (k-1)/2 on [batch, height, width, channels]
// with a [k, k, channels] kernel.
template <typename T>
void depthwise_conv2d(Index batch, Index height, Index width, Index channels, Index k,
                      const T* in, const T* kernel, T* out);

template <typename T>
void depthwise_conv2d_backward(Index batch, Index height, Index width, Index channels, Index k,
                               const T* in, const T* kernel, const T* grad_out, T* grad_in,
                               T* grad_kernel);

// Multi-head scaled dot-product attention on image-major token rows.
//   q: [batch * q_tokens, dim], k/v: [batch * kv_tokens, dim]
//   allowed (optional): [q_tokens * kv_tokens], nonzero where attending is permitted.
//   probs: [batch, heads, q_tokens, kv_tokens], saved for backward.
struct AttentionShape {
    Index batch = 1;
    Index q_tokens = 1;
    Index kv_tokens = 1;
    Index dim = 1;
    Index heads = 1;
};

template <typename T>
void attention(const AttentionShape& s, const T* q, const T* k, const T* v,
               const unsigned char* allowed, T* probs, T* out);

template <typename T>
void attention_backward(const AttentionShape& s, const T* q, const T* k, const T* v,
                        const T* probs, const T* grad_out, T* grad_q, T* grad_k, T* grad_v);

namespace reference {

template <typename T>
void gemm(Index m, Index k, Index n, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void softmax_rows(Index rows, Index cols, const T* in, T* out, T inv_temperature);

template <typename T>
void layer_norm_rows(Index rows, Index cols, const T* in, const T* gamma, const T* beta, T eps,
                     T* out, T* mean, T* rstd);

template <typename T>
void gelu(Index n, const T* in, T* out);

template <typename T>
void depthwise_conv2d(Index batch, Index height, Index width, Index channels, Index k,
                      const T* in, const T* kernel, T* out);

template <typename T>
void attention(const AttentionShape& s, const T* q, const T* k, const T* v,
               const unsigned char* allowed, T* probs, T* out);

}  // namespace reference

// Thread count control for the OpenMP kernels; no-ops without OpenMP.
void set_num_threads(int threads);
int num_threads();

}  // namespace mte::kernels
