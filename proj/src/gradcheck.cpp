#include "mte/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mte/model.hpp"
#include "mte/objectives.hpp"

namespace mte {

GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                const GradCheckOptions& options) {
    std::vector<std::vector<double>> analytic;
    {
        for (auto& [name, t] : inputs) {
            t.zero_grad();
            t.set_requires_grad(true);
        }
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = loss_fn();
        tape.backward(loss);
        for (auto& [name, t] : inputs) {
            std::vector<double> g(t.size(), 0.0);
            if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
            analytic.push_back(std::move(g));
        }
    }

    NoGradScope<double> no_grad;
    GradCheckResult result;
    for (Index which = 0; which < inputs.size(); ++which) {
        auto& [name, t] = inputs[which];
        const Index n = t.size();
        const Index stride =
            options.max_elements_per_input == 0 ? 1 : std::max<Index>(1, n / options.max_elements_per_input);
        for (Index i = 0; i < n; i += stride) {
            const double saved = t[i];
            t[i] = saved + options.step;
            const double up = loss_fn().item();
            t[i] = saved - options.step;
            const double down = loss_fn().item();
            t[i] = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double a = analytic[which][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
            const double rel = std::abs(a - numeric) / denom;
            ++result.checked;
            if (rel > result.max_rel_error || !std::isfinite(rel)) {
                result.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
                result.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    for (auto& [name, t] : inputs) t.zero_grad();
    return result;
}


namespace {

using TD = Tensor<double>;

class SuiteBuilder {
   public:
    SuiteBuilder(std::uint64_t seed, const GradCheckOptions& options) : rng_(seed), options_(options) {}

    TD random(Shape shape, double scale = 1.0) {
        TD t(std::move(shape));
        std::normal_distribution<double> dist(0.0, scale);
        for (double& v : t.data()) v = dist(rng_);
        return t;
    }

    // L = sum(f(inputs) * R) with a fixed random R, so every output element matters.
    void check(const std::string& name, std::vector<std::pair<std::string, TD>> inputs,
               const std::function<TD()>& f) {
        TD probe;
        {
            NoGradScope<double> no_grad;
            probe = random(f().shape());
        }
        auto loss = [&f, probe]() { return sum(mul(f(), probe)); };
        entries_.push_back({name, check_gradients(loss, std::move(inputs), options_)});
    }

    // For functions that already return a scalar loss.
    void check_scalar(const std::string& name, std::vector<std::pair<std::string, TD>> inputs,
                      const std::function<TD()>& f) {
        entries_.push_back({name, check_gradients(f, std::move(inputs), options_)});
    }

    std::vector<GradSuiteEntry> take() { return std::move(entries_); }
    Rng& rng() { return rng_; }

   private:
    Rng rng_;
    GradCheckOptions options_;
    std::vector<GradSuiteEntry> entries_;
};

void op_checks(SuiteBuilder& b) {
    TD a = b.random({3, 4}), c = b.random({4, 5}), d = b.random({3, 4}), bias = b.random({4});
    b.check("matmul", {{"a", a}, {"b", c}}, [=] { return matmul(a, c); });
    b.check("transpose", {{"a", a}}, [=] { return transpose(a); });
    b.check("add", {{"a", a}, {"b", d}}, [=] { return add(a, d); });
    b.check("sub", {{"a", a}, {"b", d}}, [=] { return sub(a, d); });
    b.check("mul", {{"a", a}, {"b", d}}, [=] { return mul(a, d); });
    b.check("add_bias", {{"x", a}, {"bias", bias}}, [=] { return add_bias(a, bias); });
    b.check("scale", {{"x", a}}, [=] { return scale(a, 0.37); });
    b.check("sum", {{"x", a}}, [=] { return sum(a); });
    b.check("mean", {{"x", a}}, [=] { return mean(a); });
    b.check("softmax_axis1", {{"x", a}}, [=] { return softmax_axis(a, 1, 0.5); });
    b.check("softmax_axis0", {{"x", a}}, [=] { return softmax_axis(a, 0, 1.0); });
    b.check("log_softmax_axis1", {{"x", a}}, [=] { return log_softmax_axis(a, 1, 0.1); });
    b.check("log_softmax_axis0", {{"x", a}}, [=] { return log_softmax_axis(a, 0, 2.0); });
    TD gamma = b.random({4}), beta = b.random({4});
    b.check("layer_norm", {{"x", a}, {"gamma", gamma}, {"beta", beta}}, [=] { return layer_norm(a, gamma, beta); });
    b.check("gelu", {{"x", a}}, [=] { return gelu(a); });
    TD img = b.random({2, 4, 4, 3}), kernel = b.random({3, 3, 3});
    b.check("depthwise_conv2d", {{"x", img}, {"kernel", kernel}}, [=] { return depthwise_conv2d(img, kernel); });
    TD pw = b.random({3, 5}), pb = b.random({5});
    b.check("pointwise_conv1x1", {{"x", img}, {"w", pw}, {"b", pb}}, [=] { return pointwise_conv1x1(img, pw, pb); });
    b.check("reshape", {{"x", a}}, [=] { return reshape(a, Shape{2, 6}); });
    b.check("gather_rows", {{"x", a}}, [=] { return gather_rows(a, std::vector<Index>{2, 0, 2, 1}); });
    b.check("concat_rows", {{"a", a}, {"b", d}}, [=] { return concat_rows(std::vector<TD>{a, d}); });
    TD six = b.random({6, 4});
    b.check("segment_mean_rows", {{"x", six}}, [=] { return segment_mean_rows(six, 2); });
    b.check("l2_normalize_rows", {{"x", a}}, [=] { return l2_normalize_rows(a); });
    b.check("pick_cols", {{"x", a}}, [=] { return pick_cols(a, std::vector<Index>{3, 0, 1}); });

    const kernels::AttentionShape self{2, 4, 4, 8, 2};
    TD q = b.random({8, 8}), k = b.random({8, 8}), v = b.random({8, 8});
    b.check("attention", {{"q", q}, {"k", k}, {"v", v}}, [=] { return attention(q, k, v, self); });
    const AttentionMask mask = build_attention_mask(1, 2);
    b.check("attention_masked", {{"q", q}, {"k", k}, {"v", v}},
            [=] { return attention(q, k, v, self, &mask.allowed); });
    const kernels::AttentionShape cross{2, 2, 3, 8, 4};
    TD cq = b.random({4, 8}), ck = b.random({6, 8}), cv = b.random({6, 8});
    b.check("attention_cross", {{"q", cq}, {"k", ck}, {"v", cv}}, [=] { return attention(cq, ck, cv, cross); });
}

void loss_checks(SuiteBuilder& b) {
    TD teacher = b.random({4, 6}), student = b.random({4, 6}), center = b.random({6}, 0.1);
    for (BaseLossKind kind : {BaseLossKind::Clustering, BaseLossKind::Cosine, BaseLossKind::InfoNce}) {
        LossSettings settings;
        settings.kind = kind;
        settings.infonce_temperature = 0.5;
        b.check_scalar("base_loss_" + to_string(kind), {{"student", student}},
                       [=] { return base_loss(teacher, student, settings, &center); });
    }
}

TokenBundle<double> toy_bundle(SuiteBuilder& b, Index batch, Index m, Index k, Index d) {
    TokenBundle<double> bundle;
    bundle.batch = batch;
    bundle.global = b.random({batch, d});
    bundle.aux = b.random({batch * m, d});
    bundle.patches = b.random({batch * 4, d});
    bundle.enhanced = b.random({batch * m, d});
    bundle.pooled = b.random({batch * k, d});
    return bundle;
}

void supervised_checks(SuiteBuilder& b) {
    ParameterSet<double> params;
    init_classifier_params(params, 6, 3, 4, false, 7);
    for (auto& [name, t] : params.entries())
        for (double& v : t.data()) v *= 20.0;  // move away from the near-uniform init
    const TokenBundle<double> bundle = toy_bundle(b, 3, 1, 2, 6);
    const std::vector<Index> labels{0, 3, 1};
    // The soft term CE(l_c, sg(l_t)) is constant in the auxiliary inputs by design, so
    // finite differences there see only the label term once the soft term's value is
    // subtracted; the global inputs are checked against the full loss.
    std::vector<std::pair<std::string, TD>> global_inputs{{"classifier.global.weight",
                                                            params.get(global_classifier_name())},
                                                           {"z_c", bundle.global}};
    b.check_scalar("supervised_loss_global", global_inputs,
                   [=] { return supervised_loss(bundle, params, false, labels).total; });
    std::vector<std::pair<std::string, TD>> aux_inputs;
    for (const auto& [name, t] : params.entries())
        if (name != global_classifier_name()) aux_inputs.emplace_back(name, t);
    aux_inputs.emplace_back("T_a", bundle.enhanced);
    aux_inputs.emplace_back("T_p", bundle.pooled);
    b.check_scalar("supervised_loss_fused", aux_inputs, [=] {
        const SupervisedLoss<double> loss = supervised_loss(bundle, params, false, labels);
        return sub(loss.total, TD::scalar(loss.distill_term));
    });
}

void pretrain_check(SuiteBuilder& b, std::uint64_t seed) {
    ModelConfig mc;
    mc.embed_dim = 16;
    mc.depth = 1;
    mc.heads = 2;
    mc.mlp_ratio = 2;
    mc.patch_size = 4;
    mc.image_size = 8;
    mc.channels = 3;
    mc.num_aux = 2;
    mc.num_pooled = 2;
    mc.pool_kernel = 3;
    HeadConfig hc;
    hc.hidden = 12;
    hc.bottleneck = 6;
    hc.prototypes = 10;
    LossSettings ls;
    // Softer temperatures keep the finite differences well inside the smooth regime.
    ls.student_temperature = 0.5;
    ls.teacher_temperature = 0.25;

    ParameterSet<double> student = init_model_params<double>(mc, seed);
    init_head_params(student, hc, mc.embed_dim, mc.num_aux + mc.num_pooled, seed + 1);
    // Perturb so LayerNorm affines, biases and tokens are not at symmetric init values.
    std::normal_distribution<double> jitter(0.0, 0.05);
    for (auto& [name, t] : student.entries())
        for (double& v : t.data()) v += jitter(b.rng());
    ParameterSet<double> teacher = student.clone();
    for (auto& [name, t] : teacher.entries())
        for (double& v : t.data()) v += jitter(b.rng());
    teacher.set_requires_grad(false);

    const std::array<TD, 2> views{b.random({2, 8, 8, 3}, 0.3), b.random({2, 8, 8, 3}, 0.3)};
    for (auto& v : views)
        for (double& x : const_cast<TD&>(v).data()) x += 0.5;
    TD center_fused = b.random({10}, 0.1), center_global = b.random({10}, 0.1);

    auto outputs = [&](const ParameterSet<double>& p, const TD& images) {
        const TokenBundle<double> bundle = forward(images, mc, p);
        HeadOutputs<double> out;
        out.global = projection_head(bundle.global, p, global_head_prefix(), hc);
        out.fused = project_fuse(bundle.enhanced, bundle.pooled, bundle.batch, p, hc).fused;
        return out;
    };
    std::array<HeadOutputs<double>, 2> teacher_out;
    {
        NoGradScope<double> no_grad;
        for (int v = 0; v < 2; ++v) teacher_out[v] = outputs(teacher, views[v]);
    }
    std::vector<std::pair<std::string, TD>> inputs(student.entries().begin(), student.entries().end());
    b.check_scalar("pretrain_loss_eq6", inputs, [&] {
        std::array<HeadOutputs<double>, 2> student_out{outputs(student, views[0]), outputs(student, views[1])};
        return pretrain_loss(teacher_out, student_out, ls, center_fused, center_global, DistillMode::Distill).total;
    });
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, const GradCheckOptions& options) {
    SuiteBuilder b(seed, options);
    op_checks(b);
    loss_checks(b);
    supervised_checks(b);
    pretrain_check(b, seed);
    return b.take();
}

}  // namespace mte
