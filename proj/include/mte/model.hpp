#pragma once

// Miniature plain ViT that emits a global CLS token, M auxiliary CLS tokens and
// N patch tokens, plus the training-only token enhancing (TEN) cross-attention
// block and K adaptively pooled tokens.
//
// Token rows are image-major: for a batch of B images a [B*n x D] tensor holds
// image b's n tokens at rows b*n .. b*n+n-1.

#include <cstdint>
#include <optional>
#include <vector>

#include "mte/ops.hpp"
#include "mte/params.hpp"

namespace mte {

struct ModelConfig {
    Index embed_dim = 64;
    Index depth = 4;
    Index heads = 4;
    Index mlp_ratio = 4;
    Index patch_size = 8;
    Index image_size = 32;
    Index channels = 3;
    Index num_aux = 4;     // M auxiliary CLS tokens
    Index num_pooled = 6;  // K adaptively pooled tokens
    Index pool_kernel = 11;
    bool mask_auxiliary = true;

    Index grid() const { return image_size / patch_size; }
    Index num_patches() const { return grid() * grid(); }
    Index num_tokens() const { return 1 + num_aux + num_patches(); }
    // Kernels wider than the token grid are clamped to the largest odd extent that fits.
    Index effective_pool_kernel() const;
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Token order is [global | auxiliary | patches]. allowed(q, k) is false for the
// global query and every patch query against auxiliary keys; auxiliary queries
// see everything.
struct AttentionMask {
    Index size = 0;
    std::vector<unsigned char> allowed;

    bool operator()(Index query, Index key) const { return allowed[query * size + key] != 0; }
};

AttentionMask build_attention_mask(Index num_aux, Index num_patches);

template <typename T>
struct TokenBundle {
    Index batch = 0;
    Tensor<T> global;    // z_c  [B x D]
    Tensor<T> aux;       // z_a  [B*M x D]
    Tensor<T> patches;   // z_p  [B*N x D]
    Tensor<T> enhanced;  // T_a  [B*M x D]
    Tensor<T> pooled;    // T_p  [B*K x D]
};

// Rows of token `index` for every image in the batch: [B x D].
template <typename T>
Tensor<T> token_rows(const Tensor<T>& tokens, Index per_image, Index index, Index batch);

template <typename T>
struct ForwardTrace {
    // Last-block self-attention probabilities [B, heads, tokens, tokens].
    Tensor<T> last_attention;
};

template <typename T>
struct TenModule {
    Tensor<T> norm_q_weight, norm_q_bias, norm_kv_weight, norm_kv_bias;
    Tensor<T> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, out_weight, out_bias;
    Tensor<T> norm2_weight, norm2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
    Index heads = 1;

    static TenModule view(const ParameterSet<T>& params, Index heads);
};

template <typename T>
struct PoolerBranch {
    Tensor<T> pw_weight;  // [D x D]
    Tensor<T> pw_bias;    // [D]
    Tensor<T> dw_kernel;  // [k x k x D]
};

template <typename T>
struct AdaptivePooler {
    std::vector<PoolerBranch<T>> branches;
    Index grid = 0;

    static AdaptivePooler view(const ParameterSet<T>& params, const ModelConfig& config);
};

template <typename T>
ParameterSet<T> init_model_params(const ModelConfig& config, std::uint64_t seed);

// images: [B, H, W, C] with values in [0, 1].
template <typename T>
TokenBundle<T> forward(const Tensor<T>& images, const ModelConfig& config,
                       const ParameterSet<T>& params, ForwardTrace<T>* trace = nullptr);

// Encoder only: final-normed tokens [B*(1+M+N) x D].
template <typename T>
Tensor<T> encode(const Tensor<T>& images, const ModelConfig& config, const ParameterSet<T>& params,
                 ForwardTrace<T>* trace = nullptr);

// Cross-attention of z_a (queries) over z_p (keys/values) followed by a per-token MLP;
// pre-norm with residuals around both sub-layers. Empty input yields an empty [0 x D] result.
template <typename T>
Tensor<T> ten_forward(const Tensor<T>& aux, const Tensor<T>& patches, const TenModule<T>& ten,
                      Index batch);

// Adaptive weight map W^i = depthwise(pointwise(grid(z_p))) for one branch: [B*N x D].
template <typename T>
Tensor<T> adaptive_weights(const Tensor<T>& patches, const PoolerBranch<T>& branch, Index grid,
                           Index batch);

// T_p^i = mean over the N positions of W^i (elementwise) z_p; returns [B*K x D].
template <typename T>
Tensor<T> adaptive_pool(const Tensor<T>& patches, const AdaptivePooler<T>& pooler, Index batch);

struct StripReport {
    Index removed_scalars = 0;
    bool lossless = true;  // false when the source was trained without the auxiliary mask
};

// Drops auxiliary tokens, TEN, pooler and every projection head ("head." prefix);
// the returned config has M = K = 0. Retained tensors are copied bit-exactly.
template <typename T>
std::pair<ParameterSet<T>, ModelConfig> strip_auxiliary(const ParameterSet<T>& params,
                                                        const ModelConfig& config,
                                                        StripReport* report = nullptr);

// Converts HWC float images into patch rows [B*N x p*p*C], normalized as (x - 0.5) / 0.25.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const ModelConfig& config);

}  // namespace mte
