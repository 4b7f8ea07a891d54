#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mte/augment.hpp"
#include "mte/errors.hpp"
#include "mte/metrics_log.hpp"
#include "mte/ops.hpp"
#include "mte/trainer.hpp"

using namespace mte;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mte_unit_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunConfig tiny(Index epochs = 2) {
    RunConfig c;
    c.model.embed_dim = 16;
    c.model.depth = 1;
    c.model.heads = 2;
    c.model.mlp_ratio = 2;
    c.model.patch_size = 4;
    c.model.image_size = 16;
    c.model.num_aux = 2;
    c.model.num_pooled = 2;
    c.model.pool_kernel = 3;
    c.head.hidden = 16;
    c.head.bottleneck = 8;
    c.head.prototypes = 16;
    c.train.epochs = epochs;
    c.train.batch_size = 16;
    c.train.warmup_epochs = 1;
    c.train.checkpoint_every = 1;
    c.data.synthetic_size = 32;
    return c;
}

const Dataset& tiny_data() {
    static const Dataset d = gen_synthetic(2, 32, 32, 3);
    return d;
}

// Gives every tensor of `params` the gradient `g` via L = sum(w * g).
void set_gradient(ParameterSet<double>& params, const std::string& name, const Tensor<double>& g) {
    params.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(mul(params.get(name), g)));
}

bool same_values(const ParameterSet<float>& a, const ParameterSet<float>& b, const std::string& name) {
    const auto x = a.get(name).data(), y = b.get(name).data();
    return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

}  // namespace

TEST_CASE("cosine and warmup schedules") {
    CHECK(cosine_schedule(0, 100, 1.0, 0.0) == doctest::Approx(1.0));
    CHECK(cosine_schedule(50, 100, 1.0, 0.2) == doctest::Approx(0.6));  // midpoint is the mean
    CHECK(cosine_schedule(100, 100, 1.0, 0.2) == doctest::Approx(0.2));
    CHECK(cosine_schedule(150, 100, 1.0, 0.2) == doctest::Approx(0.2));  // clamped
    CHECK(warmup_cosine(0, 100, 10, 2.0, 0.0) == 0.0);
    CHECK(warmup_cosine(5, 100, 10, 2.0, 0.0) == doctest::Approx(1.0));
    CHECK(warmup_cosine(10, 100, 10, 2.0, 0.0) == doctest::Approx(2.0));
    CHECK(warmup_cosine(55, 100, 10, 2.0, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("AdamW matches a hand-computed update") {
    ParameterSet<double> params;
    params.add("w", Tensor<double>({2, 2}, std::vector<double>{1.0, -2.0, 0.5, 3.0})).set_requires_grad(true);
    params.add("b", Tensor<double>({2}, std::vector<double>{0.25, -0.75})).set_requires_grad(true);
    const Tensor<double> gw({2, 2}, std::vector<double>{0.1, -0.3, 0.2, 0.05});
    const Tensor<double> gb({2}, std::vector<double>{-0.4, 0.6});
    AdamW<double> opt;
    const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;

    std::vector<double> w(params.get("w").data().begin(), params.get("w").data().end());
    std::vector<double> b(params.get("b").data().begin(), params.get("b").data().end());
    std::vector<double> mw(4, 0), vw(4, 0), mb(2, 0), vb(2, 0);
    for (int step = 1; step <= 3; ++step) {
        params.zero_grad();
        {
            Tape<double> tape;
            TapeScope<double> scope(tape);
            tape.backward(add(sum(mul(params.get("w"), gw)), sum(mul(params.get("b"), gb))));
        }
        opt.step(params, lr, wd);
        const double bc1 = 1 - std::pow(b1, step), bc2 = 1 - std::pow(b2, step);
        for (int i = 0; i < 4; ++i) {
            mw[i] = b1 * mw[i] + (1 - b1) * gw[i];
            vw[i] = b2 * vw[i] + (1 - b2) * gw[i] * gw[i];
            w[i] -= lr * wd * w[i];  // decoupled decay, matrices only
            w[i] -= lr / bc1 * mw[i] / (std::sqrt(vw[i] / bc2) + eps);
        }
        for (int i = 0; i < 2; ++i) {
            mb[i] = b1 * mb[i] + (1 - b1) * gb[i];
            vb[i] = b2 * vb[i] + (1 - b2) * gb[i] * gb[i];
            b[i] -= lr / bc1 * mb[i] / (std::sqrt(vb[i] / bc2) + eps);
        }
    }
    CHECK(opt.steps() == 3);
    for (int i = 0; i < 4; ++i) CHECK(params.get("w")[i] == doctest::Approx(w[i]).epsilon(1e-12));
    for (int i = 0; i < 2; ++i) CHECK(params.get("b")[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("tensors without a gradient are left alone") {
    ParameterSet<double> params;
    params.add("w", Tensor<double>({2}, std::vector<double>{1.0, 2.0})).set_requires_grad(true);
    params.add("frozen", Tensor<double>({2, 2}, 1.0));
    set_gradient(params, "w", Tensor<double>({2}, 1.0));
    AdamW<double> opt;
    opt.step(params, 0.1, 0.5);
    CHECK(params.get("frozen")[0] == 1.0);
    CHECK_FALSE(opt.first_moment().contains("frozen"));
    CHECK(params.get("w")[0] != 1.0);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
    ParameterSet<double> params;
    params.add("w", Tensor<double>({2}, 0.0)).set_requires_grad(true);
    set_gradient(params, "w", Tensor<double>({2}, std::vector<double>{3.0, 4.0}));
    CHECK(clip_gradients(params, 1.0) == doctest::Approx(5.0));
    CHECK(params.get("w").grad()[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(params.get("w").grad()[1] == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("weight decay and auxiliary-parameter classification") {
    CHECK(decays_weight("blocks.0.attn.q.weight", 2));
    CHECK_FALSE(decays_weight("blocks.0.attn.q.bias", 1));
    CHECK_FALSE(decays_weight("pos_embed", 3));
    CHECK_FALSE(decays_weight("head.global.prototypes", 2));
    CHECK(is_auxiliary_param("aux_tokens"));
    CHECK(is_auxiliary_param("ten.q.weight"));
    CHECK(is_auxiliary_param("pool.3.dw.kernel"));
    CHECK(is_auxiliary_param("head.aux.1.fc1.weight"));
    CHECK_FALSE(is_auxiliary_param("head.global.fc1.weight"));
    CHECK_FALSE(is_auxiliary_param("blocks.0.norm1.weight"));
}

TEST_CASE("a train step composes the EMA teacher from the updated student") {
    TrainState state = init_pretrain_state(tiny());
    const auto teacher_before = state.teacher.params.clone();
    const Tensor<float> a = view_batch(tiny_data(), {0, 1, 2, 3}, 0, 0, 16, state.config.augment, 9);
    const Tensor<float> b = view_batch(tiny_data(), {0, 1, 2, 3}, 0, 1, 16, state.config.augment, 9);
    const double m = 0.9;
    const StepMetrics metrics = train_step(state, a, b, 1e-3, m);
    CHECK(std::isfinite(metrics.loss));
    CHECK(metrics.grad_norm > 0);
    CHECK(state.step == 1);
    for (const auto& [name, t] : state.teacher.params.entries()) {
        const auto& s = state.student.get(name);
        const auto& old = teacher_before.get(name);
        for (Index i = 0; i < t.size(); i += 7)
            CHECK(t[i] == doctest::Approx(m * old[i] + (1 - m) * s[i]).epsilon(1e-5));
    }
}

TEST_CASE("the optimizer never touches the teacher or the centers") {
    TrainState state = init_pretrain_state(tiny());
    const Tensor<float> a = view_batch(tiny_data(), {4, 5}, 0, 0, 16, state.config.augment, 1);
    const Tensor<float> b = view_batch(tiny_data(), {4, 5}, 0, 1, 16, state.config.augment, 1);
    train_step(state, a, b, 1e-3, 0.99);
    for (const auto& [name, t] : state.teacher.params.entries()) {
        CHECK_FALSE(t.requires_grad());
        CHECK_FALSE(t.has_grad());
    }
    for (const auto& [name, t] : state.optimizer.first_moment().entries()) CHECK(state.student.contains(name));
    CHECK(state.optimizer.first_moment().size() == state.student.size());
    CHECK_FALSE(state.teacher.center_fused.requires_grad());
    CHECK_FALSE(state.teacher.center_global.requires_grad());
}

TEST_CASE("freeze_auxiliary keeps auxiliary parameters bit-exact in student and teacher") {
    RunConfig c = tiny();
    c.train.freeze_auxiliary = true;
    TrainState state = init_pretrain_state(c);
    const auto init = state.student.clone();
    for (int s = 0; s < 3; ++s) {
        const Tensor<float> a = view_batch(tiny_data(), {0, 1, 2}, s, 0, 16, c.augment, 2);
        const Tensor<float> b = view_batch(tiny_data(), {0, 1, 2}, s, 1, 16, c.augment, 2);
        train_step(state, a, b, 1e-2, 0.9);
    }
    bool trunk_moved = false;
    for (const auto& [name, t] : init.entries()) {
        if (is_auxiliary_param(name)) {
            CHECK(same_values(state.student, init, name));
            CHECK(same_values(state.teacher.params, init, name));
        } else {
            trunk_moved |= !same_values(state.student, init, name);
        }
    }
    CHECK(trunk_moved);
}

TEST_CASE("a 2-epoch run on 64 synthetic images writes checkpoints and a metric log") {
    const auto dir = fresh_dir("two_epochs");
    TrainOptions options;
    options.out_dir = dir.string();
    Index epochs_seen = 0;
    options.on_epoch_end = [&](const TrainState&) { ++epochs_seen; };
    const TrainState state = pretrain(tiny_data(), tiny(), options);
    CHECK(state.epoch == 2);
    CHECK(state.step == 2 * steps_per_epoch(64, 16));
    CHECK(epochs_seen == 2);
    Index checkpoints = 0;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".mte") ++checkpoints;
    CHECK(checkpoints >= 2);
    CHECK(read_metric_log((dir / "metrics.ndjson").string(), {"wall_ms"}).size() == 8);
    CHECK_THROWS_AS(steps_per_epoch(8, 16), Error);
}

TEST_CASE("resuming from an epoch checkpoint reproduces the uninterrupted run") {
    const RunConfig c = tiny(3);
    const auto full_dir = fresh_dir("resume_full"), split_dir = fresh_dir("resume_split");
    TrainOptions full;
    full.out_dir = full_dir.string();
    const TrainState reference = pretrain(tiny_data(), c, full);

    TrainOptions interrupted;
    interrupted.out_dir = split_dir.string();
    interrupted.max_steps = steps_per_epoch(64, 16) + 2;  // dies mid-epoch 2; last.mte holds epoch 1
    pretrain(tiny_data(), c, interrupted);
    TrainOptions resumed;
    resumed.out_dir = split_dir.string();
    resumed.resume = true;
    const TrainState finished = pretrain(tiny_data(), c, resumed);

    CHECK(finished.step == reference.step);
    CHECK(fingerprint(finished.student) == fingerprint(reference.student));
    CHECK(fingerprint(finished.teacher.params) == fingerprint(reference.teacher.params));
    const auto a = read_metric_log((full_dir / "metrics.ndjson").string(), {"wall_ms"});
    const auto b = read_metric_log((split_dir / "metrics.ndjson").string(), {"wall_ms"});
    CHECK(a == b);

    RunConfig other = c;
    other.train.base_lr *= 2;
    CHECK_THROWS_AS(pretrain(tiny_data(), other, resumed), Error);
}

TEST_CASE("supervised training overfits one fixed batch") {
    RunConfig c = tiny();
    c.train.classes = 2;
    SupervisedState state = init_supervised_state(c);
    std::vector<Index> rows(16), labels;
    for (Index i = 0; i < 16; ++i) rows[i] = i;
    for (Index r : rows) labels.push_back(tiny_data().labels[r]);
    const Tensor<float> images = eval_batch(tiny_data(), rows, 16);
    const double first = supervised_step(state, images, labels, 3e-3).loss;
    double last = first;
    for (int s = 0; s < 80; ++s) last = supervised_step(state, images, labels, 3e-3).loss;
    INFO("loss " << first << " -> " << last);
    CHECK(last < 0.2 * first);
}

TEST_CASE("shared classifiers hold one auxiliary classifier instead of M + K") {
    const Index d = 16, tokens = 5, classes = 4;
    ParameterSet<float> shared, independent;
    init_classifier_params(shared, d, tokens, classes, true, 1);
    init_classifier_params(independent, d, tokens, classes, false, 1);
    CHECK(shared.scalar_count() == 2 * d * classes);
    CHECK(independent.scalar_count() == (1 + tokens) * d * classes);
    CHECK(aux_classifier_name(true, 0) == aux_classifier_name(true, 4));
}

TEST_CASE("horizontal flips occur with probability flip_p") {
    const Dataset d = gen_synthetic(2, 1, 32, 4);
    AugmentConfig cfg;
    std::vector<float> out(16 * 16 * 3);
    const int trials = 4000;
    int flips = 0;
    for (int i = 0; i < trials; ++i) flips += make_view(d.image(0), 32, 32, 3, 16, cfg, derive_seed(7, i), out.data()).flipped;
    // Binomial(4000, 0.5) has a standard deviation of about 0.008.
    CHECK(std::abs(flips / double(trials) - 0.5) < 0.04);
    cfg.flip_p = 0.0;
    for (int i = 0; i < 100; ++i) CHECK_FALSE(make_view(d.image(0), 32, 32, 3, 16, cfg, derive_seed(8, i), out.data()).flipped);
}
