#include "selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <vector>

#include "mte/augment.hpp"
#include "mte/checkpoint.hpp"
#include "mte/config.hpp"
#include "mte/data.hpp"
#include "mte/eval.hpp"
#include "mte/flops.hpp"
#include "mte/metrics_log.hpp"
#include "mte/ops.hpp"
#include "mte/trainer.hpp"

namespace fs = std::filesystem;
using namespace mte;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.model.embed_dim = 16;
    cfg.model.depth = 1;
    cfg.model.heads = 2;
    cfg.model.mlp_ratio = 2;
    cfg.model.patch_size = 4;
    cfg.model.image_size = 16;
    cfg.model.num_aux = 2;
    cfg.model.num_pooled = 2;
    cfg.model.pool_kernel = 3;
    cfg.head.hidden = 16;
    cfg.head.bottleneck = 8;
    cfg.head.prototypes = 12;
    cfg.data.synthetic_size = 16;
    cfg.data.train_per_class = 6;
    cfg.data.test_per_class = 4;
    return cfg;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double worst = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
        worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
    return worst;
}

FeatureMatrix matrix(Index rows, Index cols, std::vector<double> values, std::vector<Index> labels) {
    FeatureMatrix m;
    m.rows = rows;
    m.cols = cols;
    m.values = std::move(values);
    m.labels = std::move(labels);
    return m;
}

}  // namespace

bool run_selfcheck(std::ostream& out, const std::string& scratch_dir) {
    fs::create_directories(scratch_dir);
    const auto start = std::chrono::steady_clock::now();
    Index passed = 0, failed = 0;
    auto check = [&](const std::string& name, const std::function<bool()>& fn) {
        bool ok = false;
        std::string why;
        try {
            ok = fn();
        } catch (const std::exception& e) {
            why = std::string(" (") + e.what() + ")";
        }
        out << (ok ? "PASS " : "FAIL ") << name << why << '\n';
        (ok ? passed : failed)++;
    };

    const RunConfig cfg = tiny_config();
    const Split split = load_split(cfg.data);
    TrainState state = init_pretrain_state(cfg);
    const Checkpoint ck = to_checkpoint(state);
    const LoadedModel full = load_model(ck);

    check("tensor: matmul by identity returns the input", [] {
        Tensor<double> a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        Tensor<double> eye({3, 3});
        for (Index i = 0; i < 3; ++i) eye.at(i, i) = 1;
        const auto c = matmul(a, eye);
        return std::equal(a.data().begin(), a.data().end(), c.data().begin());
    });
    check("tensor: softmax rows sum to one", [] {
        Tensor<double> a({2, 3}, std::vector<double>{1, -2, 3, 0, 0, 0});
        const auto s = softmax_axis(a, 1);
        return std::abs(s.at(0, 0) + s.at(0, 1) + s.at(0, 2) - 1) < 1e-12 && std::abs(s.at(1, 1) - 1.0 / 3) < 1e-12;
    });
    check("tensor: stop_gradient blocks the backward pass", [] {
        Tensor<double> x({3}, std::vector<double>{1, 2, 3});
        x.set_requires_grad(true);
        Tape<double> tape;
        TapeScope<double> scope(tape);
        auto y = sum(mul(stop_gradient(x), x));
        tape.backward(y);
        return x.grad()[0] == 1 && x.grad()[2] == 3;
    });
    check("model: mask blocks auxiliary keys for global and patch queries", [] {
        const AttentionMask m = build_attention_mask(2, 4);
        return !m(0, 1) && !m(0, 2) && m(0, 3) && !m(5, 1) && m(1, 0) && m(1, 2);
    });
    check("model: forward shapes", [&] {
        NoGradScope<float> ng;
        const auto images = eval_batch(split.test, {0, 1, 2}, cfg.model.image_size);
        const auto b = forward(images, cfg.model, full.params);
        return b.global.rows() == 3 && b.enhanced.rows() == 6 && b.pooled.rows() == 6 && b.patches.rows() == 48 &&
               b.global.cols() == 16;
    });
    check("model: strip removes auxiliary parts and keeps the global token", [&] {
        StripReport report;
        const LoadedModel stripped = load_model(strip_checkpoint(ck, &report));
        NoGradScope<float> ng;
        const auto images = eval_batch(split.test, {0, 1, 2, 3}, cfg.model.image_size);
        const auto a = forward(images, cfg.model, full.params).global;
        const auto b = forward(images, stripped.config.model, stripped.params).global;
        return report.lossless && stripped.config.model.num_aux == 0 && !stripped.params.contains("aux_tokens") &&
               max_abs_diff(a.data(), b.data()) <= 1e-6;
    });
    check("checkpoint: save and load round-trip", [&] {
        const std::string path = (fs::path(scratch_dir) / "roundtrip.mte").string();
        save_checkpoint(path, ck);
        const TrainState back = train_state_from_checkpoint(load_checkpoint(path));
        return fingerprint(back.student) == fingerprint(state.student) &&
               fingerprint(back.teacher.params) == fingerprint(state.teacher.params);
    });
    check("config: text round-trip", [&] {
        RunConfig back;
        apply_config(back, parse_config_text(to_config_text(cfg)));
        return to_config_map(back) == to_config_map(cfg);
    });
    check("data: synthetic generator is deterministic", [] {
        const Dataset a = gen_synthetic(3, 4, 16, 9), b = gen_synthetic(3, 4, 16, 9);
        return a.pixels == b.pixels && a.labels == b.labels;
    });
    check("data: CIFAR record round-trip", [&] {
        const std::string path = (fs::path(scratch_dir) / "batch.bin").string();
        std::vector<std::uint8_t> pixels(2 * 3072);
        std::iota(pixels.begin(), pixels.end(), 0);
        write_cifar_batch(path, {3, 7}, pixels);
        const Dataset d = load_cifar_batches({path}, {}, 0);
        return d.size() == 2 && d.labels[1] == 7 && d.height == 32 &&
               d.image(0)[0] == 0.0f && d.image(0)[1] == float(1024 % 256) / 255.0f;
    });
    check("objectives: cosine loss of identical outputs is zero", [] {
        Tensor<double> t({2, 3}, std::vector<double>{1, 2, 3, -1, 0, 2});
        LossSettings s;
        s.kind = BaseLossKind::Cosine;
        return std::abs(base_loss(t, t, s).item()) < 1e-12;
    });
    check("objectives: EMA with m = 1 keeps the teacher, m = 0 copies the student", [&] {
        ParameterSet<float> teacher = state.teacher.params.clone();
        ema_update(teacher, state.student, 1.0);
        const bool keep = fingerprint(teacher) == fingerprint(state.teacher.params);
        ParameterSet<float> moved = state.student.clone();
        for (auto& [n, t] : moved.entries())
            for (float& v : t.data()) v += 1.0f;
        ema_update(teacher, moved, 0.0);
        return keep && fingerprint(teacher) == fingerprint(moved);
    });
    check("trainer: cosine schedule endpoints", [] {
        return cosine_schedule(0, 10, 0.996, 1.0) == 0.996 && cosine_schedule(10, 10, 0.996, 1.0) == 1.0 &&
               std::abs(warmup_cosine(5, 100, 10, 1.0, 0.0) - 0.5) < 1e-12;
    });
    check("eval: k = 1 on a duplicated train point is exact", [] {
        const auto train = matrix(3, 2, {1, 0, 0, 1, -1, 0}, {0, 1, 2});
        const auto test = matrix(1, 2, {0, 1}, {1});
        return knn_classify(train, test, 1) == 1.0;
    });
    check("eval: NMI identities", [] {
        const std::vector<Index> y{0, 0, 1, 1, 2}, c(5, 4);
        return std::abs(nmi(y, y) - 1) < 1e-12 && nmi(c, y) == 0.0;
    });
    check("eval: CKA(X, X) = 1", [] {
        const auto x = matrix(4, 2, {1, 2, 0, 1, 3, -1, 2, 2}, {0, 0, 0, 0});
        return std::abs(cka(x, x) - 1) < 1e-12;
    });
    check("eval: identical predictions give zero spread and no unique best", [] {
        const std::vector<Index> p{0, 1, 1, 0}, y{0, 1, 0, 0};
        const auto s = per_class_stats({p, p}, y);
        return s.accuracy_std[0] == 0 && s.accuracy_std[1] == 0 && s.best_token_counts == std::vector<Index>{0, 0};
    });
    check("eval: token selector parsing", [] {
        const auto s = TokenSelector::parse("global+aux:0..2+pool:1", 4, 6);
        return s.global && s.aux == std::vector<Index>{0, 1, 2} && s.pool == std::vector<Index>{1} && s.count() == 5;
    });
    check("eval: size-1 combination equals the single-token NMI", [&] {
        const TokenOutputs o = collect_token_outputs(full, split.test, true);
        const auto single = select_features(o, TokenSelector::parse("aux:1", 2, 2), FeatureSpace::PostHead);
        return subset_nmi(o, {1}) == nmi(assign_prototypes(single), o.labels);
    });
    check("eval: top-n patch feature with n = N equals the patch mean", [&] {
        const TokenOutputs o = collect_token_outputs(full, split.test, false);
        const FeatureMatrix f = topn_patch_features(full, split.test, cfg.model.num_patches());
        double worst = 0;
        for (Index i = 0; i < f.values.size(); ++i) worst = std::max(worst, std::abs(f.values[i] - o.patch_avg[i]));
        return worst < 1e-5;
    });
    check("flops: inference equals the M = K = 0 baseline", [&] {
        ModelConfig base = cfg.model;
        base.num_aux = base.num_pooled = 0;
        return flop_count(cfg.model, cfg.head, FlopMode::Inference).total() ==
                   flop_count(base, cfg.head, FlopMode::Inference).total() &&
               flop_count(cfg.model, cfg.head, FlopMode::TrainForward).total() >
                   flop_count(base, cfg.head, FlopMode::TrainForward).total();
    });
    check("metrics: log write and read", [&] {
        const std::string path = (fs::path(scratch_dir) / "log.ndjson").string();
        {
            MetricLog log(path, false);
            log.write(StepRecord{3, 1, 0.5, 0.25, 0.25, 1e-4, 0.996, 12.0});
        }
        const auto back = read_metric_log(path, {"wall_ms"});
        return back.size() == 1 && back[0]["step"] == 3 && !back[0].contains("wall_ms");
    });

    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << passed << " passed, " << failed << " failed in " << seconds << " s\n";
    return failed == 0 && seconds < 60;
}
