#include "mte/objectives.hpp"

#include <cmath>

namespace mte {

BaseLossKind parse_loss_kind(const std::string& text) {
    if (text == "clustering") return BaseLossKind::Clustering;
    if (text == "cosine") return BaseLossKind::Cosine;
    if (text == "infonce") return BaseLossKind::InfoNce;
    fail(ErrorKind::Configuration, "unknown base loss '" + text + "' (expected clustering, cosine or infonce)");
}

std::string to_string(BaseLossKind kind) {
    switch (kind) {
        case BaseLossKind::Clustering: return "clustering";
        case BaseLossKind::Cosine: return "cosine";
        case BaseLossKind::InfoNce: return "infonce";
    }
    return "?";
}

DistillMode parse_distill_mode(const std::string& text) {
    if (text == "distill") return DistillMode::Distill;
    if (text == "no_distill") return DistillMode::NoDistill;
    if (text == "global_only") return DistillMode::GlobalOnly;
    fail(ErrorKind::Configuration, "unknown distill mode '" + text + "'");
}

std::string to_string(DistillMode mode) {
    switch (mode) {
        case DistillMode::Distill: return "distill";
        case DistillMode::NoDistill: return "no_distill";
        case DistillMode::GlobalOnly: return "global_only";
    }
    return "?";
}

void LossSettings::validate() const {
    require(student_temperature > 0 && teacher_temperature > 0 && infonce_temperature > 0,
            ErrorKind::Configuration, "loss temperatures must be positive");
}

std::string aux_head_prefix(const HeadConfig& config, Index index) {
    return config.shared ? std::string("head.shared") : "head.aux." + std::to_string(index);
}

std::string aux_classifier_name(bool shared, Index index) {
    return shared ? std::string("head.classifier.shared.weight")
                  : "head.classifier.aux." + std::to_string(index) + ".weight";
}

namespace {

template <typename T>
Tensor<T> init_tensor(const std::string& name, Shape shape, std::uint64_t seed, double stddev) {
    Tensor<T> t(std::move(shape));
    Rng rng(derive_seed(seed, hash_name(name)));
    fill_trunc_normal(t, rng, stddev);
    return t;
}

template <typename T>
void add_head(ParameterSet<T>& params, const std::string& prefix, const HeadConfig& c, Index d,
              std::uint64_t seed) {
    auto linear = [&](const std::string& name, Index in, Index out) {
        params.add(prefix + "." + name + ".weight", init_tensor<T>(prefix + "." + name + ".weight", {in, out}, seed, 0.02));
        params.add(prefix + "." + name + ".bias", Tensor<T>(Shape{out}));
    };
    linear("fc1", d, c.hidden);
    linear("fc2", c.hidden, c.hidden);
    linear("fc3", c.hidden, c.bottleneck);
    if (c.kind == BaseLossKind::Clustering) {
        Tensor<T> protos = init_tensor<T>(prefix + ".prototypes", {c.prototypes, c.bottleneck}, seed, 0.02);
        params.add(prefix + ".prototypes", std::move(protos));
    }
}

}  // namespace

template <typename T>
void init_head_params(ParameterSet<T>& params, const HeadConfig& config, Index embed_dim,
                      Index num_aux_tokens, std::uint64_t seed) {
    require(config.hidden > 0 && config.bottleneck > 0 && config.prototypes > 0, ErrorKind::Configuration,
            "head dimensions must be positive");
    add_head(params, global_head_prefix(), config, embed_dim, seed);
    if (num_aux_tokens > 0) {
        if (config.shared)
            add_head(params, "head.shared", config, embed_dim, seed);
        else
            for (Index i = 0; i < num_aux_tokens; ++i) add_head(params, aux_head_prefix(config, i), config, embed_dim, seed);
    }
    for (auto& [name, t] : params.entries())
        if (name.starts_with("head.")) t.set_requires_grad(true);
    renormalize_prototypes(params);
}

template <typename T>
Tensor<T> projection_head(const Tensor<T>& x, const ParameterSet<T>& params, const std::string& prefix,
                          const HeadConfig& config) {
    auto linear = [&](const Tensor<T>& in, const char* name) {
        return add_bias(matmul(in, params.get(prefix + "." + name + ".weight")),
                        params.get(prefix + "." + name + ".bias"));
    };
    Tensor<T> h = gelu(linear(x, "fc1"));
    h = gelu(linear(h, "fc2"));
    const Tensor<T> z = l2_normalize_rows(linear(h, "fc3"));
    if (config.kind != BaseLossKind::Clustering) return z;
    // Weight normalization: the direction of each prototype is what the loss sees.
    const Tensor<T> protos = l2_normalize_rows(params.get(prefix + ".prototypes"));
    return matmul(z, transpose(protos));
}

template <typename T>
void renormalize_prototypes(ParameterSet<T>& params) {
    for (auto& [name, t] : params.entries()) {
        if (!name.ends_with(".prototypes") || !t.requires_grad()) continue;
        const Index cols = t.cols();
        for (Index r = 0; r < t.rows(); ++r) {
            T norm = 0;
            for (Index c = 0; c < cols; ++c) norm += t.at(r, c) * t.at(r, c);
            norm = std::sqrt(norm);
            if (norm > T(0))
                for (Index c = 0; c < cols; ++c) t.at(r, c) /= norm;
        }
    }
}

template <typename T>
FusedProjection<T> project_fuse(const Tensor<T>& enhanced, const Tensor<T>& pooled, Index batch,
                                const ParameterSet<T>& params, const HeadConfig& config) {
    require(batch > 0, ErrorKind::Usage, "project_fuse: empty batch");
    const Index m = enhanced.rows() / batch, k = pooled.rows() / batch;
    require(m + k > 0, ErrorKind::Usage, "project_fuse: fusion needs at least one auxiliary token");
    FusedProjection<T> out;
    Tensor<T> total;
    for (Index i = 0; i < m + k; ++i) {
        const Tensor<T> tok = i < m ? token_rows(enhanced, m, i, batch) : token_rows(pooled, k, i - m, batch);
        Tensor<T> h = projection_head(tok, params, aux_head_prefix(config, i), config);
        total = i == 0 ? h : add(total, h);
        out.per_token.push_back(std::move(h));
    }
    out.fused = scale(total, T(1) / static_cast<T>(m + k));
    return out;
}

template <typename T>
Tensor<T> base_loss(const Tensor<T>& teacher, const Tensor<T>& student, const LossSettings& settings,
                    const Tensor<T>* center) {
    require(teacher.shape() == student.shape() && teacher.rank() == 2, ErrorKind::Dimension,
            "base_loss: teacher " + shape_string(teacher.shape()) + " vs student " +
                shape_string(student.shape()));
    const Index batch = teacher.rows();
    const Tensor<T> target = stop_gradient(teacher);
    switch (settings.kind) {
        case BaseLossKind::Clustering: {
            Tensor<T> centered = target;
            if (center != nullptr) {
                require(center->size() == teacher.cols(), ErrorKind::Dimension,
                        "base_loss: center of size " + std::to_string(center->size()) + " for outputs of width " +
                            std::to_string(teacher.cols()));
                centered = add_bias(target, scale(stop_gradient(*center), T(-1)));
            }
            const Tensor<T> p = stop_gradient(softmax_axis(centered, 1, static_cast<T>(settings.teacher_temperature)));
            const Tensor<T> logq = log_softmax_axis(student, 1, static_cast<T>(settings.student_temperature));
            return scale(sum(mul(p, logq)), T(-1) / static_cast<T>(batch));
        }
        case BaseLossKind::Cosine: {
            for (Index r = 0; r < batch; ++r) {
                T nt = 0, ns = 0;
                for (Index c = 0; c < teacher.cols(); ++c) {
                    nt += teacher.at(r, c) * teacher.at(r, c);
                    ns += student.at(r, c) * student.at(r, c);
                }
                require(nt > T(0) && ns > T(0), ErrorKind::Numeric,
                        "base_loss: zero-norm vector in cosine mode at row " + std::to_string(r));
            }
            const Tensor<T> cos = sum(mul(l2_normalize_rows(target), l2_normalize_rows(student)));
            return add(Tensor<T>::scalar(T(2)), scale(cos, T(-2) / static_cast<T>(batch)));
        }
        case BaseLossKind::InfoNce: {
            // Row r of the student must pick teacher row r among all teacher rows.
            const Tensor<T> logits = matmul(l2_normalize_rows(student), transpose(l2_normalize_rows(target)));
            const Tensor<T> logp = log_softmax_axis(logits, 1, static_cast<T>(settings.infonce_temperature));
            std::vector<Index> diag(batch);
            for (Index r = 0; r < batch; ++r) diag[r] = r;
            return scale(sum(pick_cols(logp, diag)), T(-1) / static_cast<T>(batch));
        }
    }
    fail(ErrorKind::Configuration, "base_loss: unknown kind");
}

template <typename T>
PretrainLoss<T> pretrain_loss(const std::array<HeadOutputs<T>, 2>& teacher,
                              const std::array<HeadOutputs<T>, 2>& student, const LossSettings& settings,
                              const Tensor<T>& center_fused, const Tensor<T>& center_global,
                              DistillMode mode) {
    const bool has_fused = !teacher[0].fused.empty() && !student[0].fused.empty();
    if (!has_fused) mode = DistillMode::GlobalOnly;
    Tensor<T> fused_total, distill_total;
    for (int v = 0; v < 2; ++v) {
        const HeadOutputs<T>& t = teacher[v];
        const HeadOutputs<T>& s = student[1 - v];
        Tensor<T> lc, ld;
        switch (mode) {
            case DistillMode::Distill:
                lc = base_loss(t.fused, s.fused, settings, &center_fused);
                ld = base_loss(t.fused, s.global, settings, &center_fused);
                break;
            case DistillMode::NoDistill:
                lc = base_loss(t.fused, s.fused, settings, &center_fused);
                ld = base_loss(t.global, s.global, settings, &center_global);
                break;
            case DistillMode::GlobalOnly:
                ld = base_loss(t.global, s.global, settings, &center_global);
                break;
        }
        if (mode != DistillMode::GlobalOnly) fused_total = v == 0 ? lc : add(fused_total, lc);
        distill_total = v == 0 ? ld : add(distill_total, ld);
    }
    PretrainLoss<T> out;
    distill_total = scale(distill_total, T(0.5));
    out.distill_term = distill_total.item();
    if (mode == DistillMode::GlobalOnly) {
        out.total = distill_total;
    } else {
        fused_total = scale(fused_total, T(0.5));
        out.fused_term = fused_total.item();
        out.total = add(fused_total, distill_total);
    }
    require(std::isfinite(out.total.item()), ErrorKind::Numeric,
            "non-finite pretraining loss (L_c=" + std::to_string(out.fused_term) +
                ", L_d=" + std::to_string(out.distill_term) + ")");
    return out;
}

template <typename T>
void ema_update(ParameterSet<T>& teacher, const ParameterSet<T>& student, double momentum) {
    require(momentum >= 0.0 && momentum <= 1.0, ErrorKind::Parameter,
            "ema momentum " + std::to_string(momentum) + " outside [0, 1]");
    require(teacher.size() == student.size(), ErrorKind::Structural,
            "ema_update: teacher has " + std::to_string(teacher.size()) + " tensors, student " +
                std::to_string(student.size()));
    const T m = static_cast<T>(momentum), rest = static_cast<T>(1.0 - momentum);
    for (auto& [name, t] : teacher.entries()) {
        require(student.contains(name), ErrorKind::Structural, "ema_update: student lacks '" + name + "'");
        const Tensor<T>& s = student.get(name);
        require(s.shape() == t.shape(), ErrorKind::Structural,
                "ema_update: shape mismatch for '" + name + "'");
        for (Index i = 0; i < t.size(); ++i) t[i] = m * t[i] + rest * s[i];
    }
}

template <typename T>
Tensor<T> center_update(const Tensor<T>& center, const Tensor<T>& batch_outputs, double momentum) {
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::Parameter,
            "center momentum " + std::to_string(momentum) + " outside [0, 1)");
    const Index cols = batch_outputs.cols(), rows = batch_outputs.rows();
    require(center.size() == cols && rows > 0, ErrorKind::Dimension,
            "center_update: center " + shape_string(center.shape()) + " vs outputs " +
                shape_string(batch_outputs.shape()));
    Tensor<T> out(center.shape());
    for (Index c = 0; c < cols; ++c) {
        T s = 0;
        for (Index r = 0; r < rows; ++r) s += batch_outputs.at(r, c);
        out[c] = static_cast<T>(momentum) * center[c] + static_cast<T>(1.0 - momentum) * (s / static_cast<T>(rows));
    }
    return out;
}

template <typename T>
void init_classifier_params(ParameterSet<T>& params, Index embed_dim, Index num_aux_tokens, Index classes,
                            bool shared, std::uint64_t seed) {
    require(classes >= 2, ErrorKind::Configuration, "classifier needs at least 2 classes");
    auto add = [&](const std::string& name) {
        params.add(name, init_tensor<T>(name, {embed_dim, classes}, seed, 0.02)).set_requires_grad(true);
    };
    add(global_classifier_name());
    if (num_aux_tokens == 0) return;
    if (shared)
        add(aux_classifier_name(true, 0));
    else
        for (Index i = 0; i < num_aux_tokens; ++i) add(aux_classifier_name(false, i));
}

template <typename T>
SupervisedLoss<T> supervised_loss(const TokenBundle<T>& bundle, const ParameterSet<T>& params,
                                  bool shared_classifiers, const std::vector<Index>& labels) {
    const Index batch = bundle.batch;
    const Tensor<T>& wc = params.get(global_classifier_name());
    const Index classes = wc.cols();
    require(labels.size() == batch, ErrorKind::Dimension,
            "supervised_loss: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(batch));
    for (Index y : labels)
        require(y < classes, ErrorKind::Parameter,
                "label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
    const T inv_b = T(1) / static_cast<T>(batch);
    const Index m = bundle.enhanced.rows() / batch, k = bundle.pooled.rows() / batch;

    SupervisedLoss<T> out;
    const Tensor<T> global_logits = matmul(bundle.global, wc);
    const Tensor<T> global_logp = log_softmax_axis(global_logits, 1);
    out.global_probs = softmax_axis(global_logits, 1);
    if (m + k == 0) {
        out.total = scale(sum(pick_cols(global_logp, labels)), -inv_b);
        out.label_term = out.total.item();
        out.fused_probs = out.global_probs;
        return out;
    }
    Tensor<T> acc;
    for (Index i = 0; i < m + k; ++i) {
        const Tensor<T> tok = i < m ? token_rows(bundle.enhanced, m, i, batch) : token_rows(bundle.pooled, k, i - m, batch);
        const Tensor<T> logits = matmul(tok, params.get(aux_classifier_name(shared_classifiers, i)));
        acc = i == 0 ? logits : add(acc, logits);
    }
    const Tensor<T> fused_logits = scale(acc, T(1) / static_cast<T>(m + k));
    out.fused_probs = softmax_axis(fused_logits, 1);
    const Tensor<T> label_ce = scale(sum(pick_cols(log_softmax_axis(fused_logits, 1), labels)), -inv_b);
    const Tensor<T> soft_ce = scale(sum(mul(stop_gradient(out.fused_probs), global_logp)), -inv_b);
    out.label_term = label_ce.item();
    out.distill_term = soft_ce.item();
    out.total = add(label_ce, soft_ce);
    require(std::isfinite(out.total.item()), ErrorKind::Numeric, "non-finite supervised loss");
    return out;
}

#define MTE_INSTANTIATE_OBJECTIVES(T)                                                                 \
    template void init_head_params(ParameterSet<T>&, const HeadConfig&, Index, Index, std::uint64_t); \
    template Tensor<T> projection_head(const Tensor<T>&, const ParameterSet<T>&, const std::string&,  \
                                       const HeadConfig&);                                            \
    template void renormalize_prototypes(ParameterSet<T>&);                                           \
    template FusedProjection<T> project_fuse(const Tensor<T>&, const Tensor<T>&, Index,               \
                                             const ParameterSet<T>&, const HeadConfig&);              \
    template Tensor<T> base_loss(const Tensor<T>&, const Tensor<T>&, const LossSettings&,             \
                                 const Tensor<T>*);                                                   \
    template PretrainLoss<T> pretrain_loss(const std::array<HeadOutputs<T>, 2>&,                      \
                                           const std::array<HeadOutputs<T>, 2>&, const LossSettings&, \
                                           const Tensor<T>&, const Tensor<T>&, DistillMode);          \
    template void ema_update(ParameterSet<T>&, const ParameterSet<T>&, double);                       \
    template Tensor<T> center_update(const Tensor<T>&, const Tensor<T>&, double);                     \
    template void init_classifier_params(ParameterSet<T>&, Index, Index, Index, bool, std::uint64_t); \
    template SupervisedLoss<T> supervised_loss(const TokenBundle<T>&, const ParameterSet<T>&, bool,   \
                                               const std::vector<Index>&);

MTE_INSTANTIATE_OBJECTIVES(float)
MTE_INSTANTIATE_OBJECTIVES(double)

#undef MTE_INSTANTIATE_OBJECTIVES

}  // namespace mte
