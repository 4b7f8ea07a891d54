#pragma once

// Projection heads, multi-token fusion, base losses, online distillation into the
// global token, EMA teacher maintenance and the supervised variant.

#include <array>
#include <string>
#include <vector>

#include "mte/model.hpp"

namespace mte {

enum class BaseLossKind { Clustering, Cosine, InfoNce };

BaseLossKind parse_loss_kind(const std::string& text);
std::string to_string(BaseLossKind kind);

struct LossSettings {
    BaseLossKind kind = BaseLossKind::Clustering;
    double student_temperature = 0.1;
    double teacher_temperature = 0.04;
    double infonce_temperature = 0.2;

    void validate() const;
};

struct HeadConfig {
    Index hidden = 512;
    Index bottleneck = 64;
    Index prototypes = 1024;
    bool shared = false;  // one head aliased across all auxiliary tokens
    BaseLossKind kind = BaseLossKind::Clustering;

    Index output_dim() const { return kind == BaseLossKind::Clustering ? prototypes : bottleneck; }
    bool operator==(const HeadConfig&) const = default;
};

// Parameter-name prefix of the head that processes auxiliary token `index`
// (0..M-1 enhanced CLS tokens, M..M+K-1 pooled tokens).
std::string aux_head_prefix(const HeadConfig& config, Index index);
inline const char* global_head_prefix() { return "head.global"; }

// Adds the global head and M+K auxiliary heads (or a single shared one) to `params`.
template <typename T>
void init_head_params(ParameterSet<T>& params, const HeadConfig& config, Index embed_dim,
                      Index num_aux_tokens, std::uint64_t seed);

// 3-layer MLP -> L2 normalization -> weight-normalized prototypes (clustering) or
// the normalized bottleneck itself (cosine / InfoNCE). x: [B x D].
template <typename T>
Tensor<T> projection_head(const Tensor<T>& x, const ParameterSet<T>& params, const std::string& prefix,
                          const HeadConfig& config);

// Rescales every trainable prototype row to unit norm; frozen ones stay bit-exact.
template <typename T>
void renormalize_prototypes(ParameterSet<T>& params);

template <typename T>
struct FusedProjection {
    Tensor<T> fused;                  // h_t [B x P]
    std::vector<Tensor<T>> per_token;  // p^i(token i) [B x P], M enhanced then K pooled
};

// h_t = (sum_i p^i(T_a^i) + sum_i p^{M+i}(T_p^i)) / (M + K)
template <typename T>
FusedProjection<T> project_fuse(const Tensor<T>& enhanced, const Tensor<T>& pooled, Index batch,
                                const ParameterSet<T>& params, const HeadConfig& config);

// Base loss L(teacher, student) averaged over the batch. The teacher side never
// receives gradient. `center` is used by the clustering loss only.
template <typename T>
Tensor<T> base_loss(const Tensor<T>& teacher, const Tensor<T>& student, const LossSettings& settings,
                    const Tensor<T>* center = nullptr);

enum class DistillMode {
    Distill,     // L(h^_t, h~_t) + L(h^_t, h~_c)
    NoDistill,   // L(h^_t, h~_t) + L(h^_c, h~_c)
    GlobalOnly,  // L(h^_c, h~_c); plain baseline and the frozen-auxiliary protocol
};

DistillMode parse_distill_mode(const std::string& text);
std::string to_string(DistillMode mode);

template <typename T>
struct HeadOutputs {
    Tensor<T> fused;   // [B x P]; empty when the network has no auxiliary tokens
    Tensor<T> global;  // [B x P]
};

template <typename T>
struct PretrainLoss {
    Tensor<T> total;
    T fused_term = 0;    // L_c
    T distill_term = 0;  // L_d (or the global-global term outside Distill mode)
};

// Symmetrized over the two view orderings: the teacher sees view v while the
// student sees view 1-v, and the two orderings are averaged.
template <typename T>
PretrainLoss<T> pretrain_loss(const std::array<HeadOutputs<T>, 2>& teacher,
                              const std::array<HeadOutputs<T>, 2>& student, const LossSettings& settings,
                              const Tensor<T>& center_fused, const Tensor<T>& center_global,
                              DistillMode mode);

// theta_teacher <- m * theta_teacher + (1 - m) * theta_student, matched by name.
template <typename T>
void ema_update(ParameterSet<T>& teacher, const ParameterSet<T>& student, double momentum);

// center <- momentum * center + (1 - momentum) * mean over rows of `batch_outputs`.
template <typename T>
Tensor<T> center_update(const Tensor<T>& center, const Tensor<T>& batch_outputs, double momentum);

template <typename T>
struct TeacherState {
    ParameterSet<T> params;
    Tensor<T> center_fused;
    Tensor<T> center_global;
    double momentum = 0.996;
};

// ---- supervised variant -------------------------------------------------------

std::string aux_classifier_name(bool shared, Index index);
inline const char* global_classifier_name() { return "classifier.global.weight"; }

template <typename T>
void init_classifier_params(ParameterSet<T>& params, Index embed_dim, Index num_aux_tokens, Index classes,
                            bool shared, std::uint64_t seed);

template <typename T>
struct SupervisedLoss {
    Tensor<T> total;
    Tensor<T> fused_probs;   // l_t [B x C]
    Tensor<T> global_probs;  // l_c [B x C]
    T label_term = 0;        // CE(l_t, y)
    T distill_term = 0;      // CE(l_c, sg(l_t))
};

// l_t = Softmax(mean_i token_i W^i), l_c = Softmax(z_c W_c),
// L = CE(l_t, y) + CE(l_c, sg(l_t)). Without auxiliary tokens L = CE(l_c, y).
template <typename T>
SupervisedLoss<T> supervised_loss(const TokenBundle<T>& bundle, const ParameterSet<T>& params,
                                  bool shared_classifiers, const std::vector<Index>& labels);

}  // namespace mte
