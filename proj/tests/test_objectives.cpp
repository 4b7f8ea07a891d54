#include <cmath>
#include <random>

#include "doctest.h"
#include "mte/errors.hpp"
#include "mte/objectives.hpp"
#include "mte/ops.hpp"

using namespace mte;

namespace {

Tensor<double> random_tensor(Shape shape, unsigned seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    Tensor<double> t(std::move(shape));
    for (double& v : t.data()) v = g(rng);
    return t;
}

// -sum_p softmax((t - c) / tt)_p * log softmax(s / ts)_p, averaged over rows.
double clustering_oracle(const Tensor<double>& t, const Tensor<double>& s, const Tensor<double>& c, double tt,
                         double ts) {
    const Index rows = t.rows(), cols = t.cols();
    double total = 0;
    for (Index r = 0; r < rows; ++r) {
        double zt = 0, zs = 0;
        for (Index p = 0; p < cols; ++p) {
            zt += std::exp((t.at(r, p) - c[p]) / tt);
            zs += std::exp(s.at(r, p) / ts);
        }
        for (Index p = 0; p < cols; ++p)
            total -= std::exp((t.at(r, p) - c[p]) / tt) / zt * (s.at(r, p) / ts - std::log(zs));
    }
    return total / rows;
}

}  // namespace

TEST_CASE("clustering loss matches the hand formula") {
    const auto t = random_tensor({4, 7}, 1), s = random_tensor({4, 7}, 2), c = random_tensor({7}, 3, 0.1);
    LossSettings settings;
    CHECK(base_loss(t, s, settings, &c).item() ==
          doctest::Approx(clustering_oracle(t, s, c, 0.04, 0.1)).epsilon(1e-12));
}

TEST_CASE("cosine loss is 2 - 2 cos and zero for aligned outputs") {
    const auto t = random_tensor({3, 5}, 4), s = random_tensor({3, 5}, 5);
    LossSettings settings;
    settings.kind = BaseLossKind::Cosine;
    double expected = 0;
    for (Index r = 0; r < 3; ++r) {
        double dot = 0, nt = 0, ns = 0;
        for (Index c = 0; c < 5; ++c) {
            dot += t.at(r, c) * s.at(r, c);
            nt += t.at(r, c) * t.at(r, c);
            ns += s.at(r, c) * s.at(r, c);
        }
        expected += 2 - 2 * dot / std::sqrt(nt * ns);
    }
    CHECK(base_loss(t, s, settings).item() == doctest::Approx(expected / 3).epsilon(1e-12));
    CHECK(std::abs(base_loss(t, scale(t, 3.0), settings).item()) < 1e-12);
    CHECK_THROWS_AS(base_loss(Tensor<double>({1, 5}), gather_rows(s, {0}), settings), Error);
}

TEST_CASE("InfoNCE loss matches the hand formula") {
    const auto t = random_tensor({4, 6}, 6), s = random_tensor({4, 6}, 7);
    LossSettings settings;
    settings.kind = BaseLossKind::InfoNce;
    const auto sn = l2_normalize_rows(s), tn = l2_normalize_rows(t);
    double expected = 0;
    for (Index i = 0; i < 4; ++i) {
        std::vector<double> logits(4);
        double z = 0;
        for (Index j = 0; j < 4; ++j) {
            double dot = 0;
            for (Index c = 0; c < 6; ++c) dot += sn.at(i, c) * tn.at(j, c);
            logits[j] = dot / 0.2;
            z += std::exp(logits[j]);
        }
        expected -= logits[i] - std::log(z);
    }
    CHECK(base_loss(t, s, settings).item() == doctest::Approx(expected / 4).epsilon(1e-12));
}

TEST_CASE("the teacher side of a base loss receives no gradient") {
    auto t = random_tensor({3, 5}, 8);
    auto s = random_tensor({3, 5}, 9);
    t.set_requires_grad(true);
    s.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(base_loss(t, s, LossSettings{}));
    for (double g : t.grad()) CHECK(g == 0.0);
    double norm = 0;
    for (double g : s.grad()) norm += g * g;
    CHECK(norm > 0);
}

TEST_CASE("project_fuse averages the per-token head outputs") {
    HeadConfig hc;
    hc.hidden = 12;
    hc.bottleneck = 6;
    hc.prototypes = 10;
    ParameterSet<double> params;
    init_head_params(params, hc, 8, 5, 3);
    const Index batch = 2;
    const auto enhanced = random_tensor({batch * 2, 8}, 10), pooled = random_tensor({batch * 3, 8}, 11);
    const auto fused = project_fuse(enhanced, pooled, batch, params, hc);
    REQUIRE(fused.per_token.size() == 5);
    for (Index i = 0; i < 5; ++i) {
        const auto rows = i < 2 ? token_rows(enhanced, 2, i, batch) : token_rows(pooled, 3, i - 2, batch);
        const auto direct = projection_head(rows, params, aux_head_prefix(hc, i), hc);
        for (Index e = 0; e < direct.size(); ++e) CHECK(direct[e] == fused.per_token[i][e]);
    }
    for (Index e = 0; e < fused.fused.size(); ++e) {
        double mean = 0;
        for (const auto& p : fused.per_token) mean += p[e];
        CHECK(fused.fused[e] == doctest::Approx(mean / 5).epsilon(1e-13));
    }
    CHECK_THROWS_AS(project_fuse(Tensor<double>({0, 8}), Tensor<double>({0, 8}), batch, params, hc), Error);
}

TEST_CASE("shared heads alias a single parameter set") {
    HeadConfig hc;
    hc.hidden = 8;
    hc.bottleneck = 4;
    hc.prototypes = 6;
    hc.shared = true;
    CHECK(aux_head_prefix(hc, 0) == aux_head_prefix(hc, 3));
    hc.shared = false;
    CHECK(aux_head_prefix(hc, 0) != aux_head_prefix(hc, 3));
}

TEST_CASE("prototype rows are unit norm after renormalization") {
    HeadConfig hc;
    hc.hidden = 8;
    hc.bottleneck = 4;
    hc.prototypes = 6;
    ParameterSet<double> params;
    init_head_params(params, hc, 8, 1, 4);
    for (auto& [name, t] : params.entries())
        if (name.ends_with("prototypes"))
            for (double& v : t.data()) v *= 3.0;
    renormalize_prototypes(params);
    const auto& p = params.get("head.global.prototypes");
    for (Index r = 0; r < p.rows(); ++r) {
        double n = 0;
        for (Index c = 0; c < p.cols(); ++c) n += p.at(r, c) * p.at(r, c);
        CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("pretrain loss modes combine the right terms") {
    std::array<HeadOutputs<double>, 2> t, s;
    for (int v = 0; v < 2; ++v) {
        t[v] = {random_tensor({3, 5}, 20 + v), random_tensor({3, 5}, 22 + v)};
        s[v] = {random_tensor({3, 5}, 24 + v), random_tensor({3, 5}, 26 + v)};
    }
    const auto cf = random_tensor({5}, 28, 0.1), cg = random_tensor({5}, 29, 0.1);
    LossSettings ls;
    auto L = [&](const Tensor<double>& a, const Tensor<double>& b, const Tensor<double>& c) {
        return clustering_oracle(a, b, c, ls.teacher_temperature, ls.student_temperature);
    };
    const double lc = 0.5 * (L(t[0].fused, s[1].fused, cf) + L(t[1].fused, s[0].fused, cf));
    const double ld = 0.5 * (L(t[0].fused, s[1].global, cf) + L(t[1].fused, s[0].global, cf));
    const double lg = 0.5 * (L(t[0].global, s[1].global, cg) + L(t[1].global, s[0].global, cg));

    const auto d = pretrain_loss(t, s, ls, cf, cg, DistillMode::Distill);
    CHECK(d.total.item() == doctest::Approx(lc + ld).epsilon(1e-12));
    CHECK(d.fused_term == doctest::Approx(lc).epsilon(1e-12));
    const auto nd = pretrain_loss(t, s, ls, cf, cg, DistillMode::NoDistill);
    CHECK(nd.total.item() == doctest::Approx(lc + lg).epsilon(1e-12));
    const auto g = pretrain_loss(t, s, ls, cf, cg, DistillMode::GlobalOnly);
    CHECK(g.total.item() == doctest::Approx(lg).epsilon(1e-12));

    // Without auxiliary tokens every mode reduces to the global-only loss.
    for (int v = 0; v < 2; ++v) t[v].fused = s[v].fused = Tensor<double>();
    CHECK(pretrain_loss(t, s, ls, cf, cg, DistillMode::Distill).total.item() == doctest::Approx(lg).epsilon(1e-12));
}

TEST_CASE("EMA and center updates follow their formulas") {
    ParameterSet<double> teacher, student;
    teacher.add("w", random_tensor({2, 3}, 30));
    student.add("w", random_tensor({2, 3}, 31));
    const auto before = teacher.clone();
    ema_update(teacher, student, 0.9);
    for (Index i = 0; i < 6; ++i)
        CHECK(teacher.get("w")[i] == doctest::Approx(0.9 * before.get("w")[i] + 0.1 * student.get("w")[i]));
    CHECK_THROWS_AS(ema_update(teacher, student, 1.5), Error);
    ParameterSet<double> other;
    other.add("v", random_tensor({2, 3}, 32));
    CHECK_THROWS_AS(ema_update(teacher, other, 0.5), Error);

    const auto center = random_tensor({3}, 33), outputs = random_tensor({4, 3}, 34);
    const auto next = center_update(center, outputs, 0.9);
    for (Index c = 0; c < 3; ++c) {
        double mean = 0;
        for (Index r = 0; r < 4; ++r) mean += outputs.at(r, c) / 4;
        CHECK(next[c] == doctest::Approx(0.9 * center[c] + 0.1 * mean).epsilon(1e-13));
    }
}

TEST_CASE("supervised loss without auxiliary tokens is plain cross-entropy") {
    ParameterSet<double> params;
    init_classifier_params(params, 4, 0, 3, false, 1);
    TokenBundle<double> bundle;
    bundle.batch = 2;
    bundle.global = random_tensor({2, 4}, 40);
    bundle.enhanced = Tensor<double>({0, 4});
    bundle.pooled = Tensor<double>({0, 4});
    const std::vector<Index> labels{2, 0};
    const auto loss = supervised_loss(bundle, params, false, labels);
    const auto logp = log_softmax_axis(matmul(bundle.global, params.get(global_classifier_name())), 1);
    CHECK(loss.total.item() == doctest::Approx(-(logp.at(0, 2) + logp.at(1, 0)) / 2).epsilon(1e-12));
    CHECK_THROWS_AS(supervised_loss(bundle, params, false, {2, 3}), Error);
}

TEST_CASE("loss settings validation") {
    LossSettings s;
    s.teacher_temperature = 0;
    CHECK_THROWS_AS(s.validate(), Error);
    CHECK(parse_loss_kind("infonce") == BaseLossKind::InfoNce);
    CHECK_THROWS_AS(parse_loss_kind("mse"), Error);
    CHECK(parse_distill_mode(to_string(DistillMode::NoDistill)) == DistillMode::NoDistill);
}
