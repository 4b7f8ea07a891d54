#include "mte/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <type_traits>

#include "mte/augment.hpp"
#include "mte/metrics_log.hpp"

namespace mte {

double cosine_schedule(double t, double total, double start, double end) {
    if (total <= 0) return end;
    if (t > total) {
        std::fprintf(stderr, "warning: schedule step %g beyond total %g, clamped\n", t, total);
        t = total;
    }
    if (t < 0) t = 0;
    return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * t / total));
}

double warmup_cosine(double t, double total, double warmup, double peak, double final_value) {
    if (warmup > 0 && t < warmup) return peak * t / warmup;
    return cosine_schedule(t - warmup, total - warmup, peak, final_value);
}

bool decays_weight(const std::string& name, Index rank) {
    if (rank < 2) return false;
    return name != "pos_embed" && name != "cls_token" && name != "aux_tokens" && !name.ends_with(".prototypes");
}

bool is_auxiliary_param(const std::string& name) {
    return name == "aux_tokens" || name.starts_with("ten.") || name.starts_with("pool.") ||
           name.starts_with("head.aux.") || name.starts_with("head.shared") || name.starts_with("head.classifier.");
}

template <typename T>
void AdamW<T>::step(ParameterSet<T>& params, double lr, double weight_decay) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (auto& [name, p] : params.entries()) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        if (!m_.contains(name)) {
            m_.add(name, Tensor<T>(p.shape()));
            v_.add(name, Tensor<T>(p.shape()));
        }
        Tensor<T>& m = m_.get(name);
        Tensor<T>& v = v_.get(name);
        const auto g = p.grad();
        const T decay = decays_weight(name, p.rank()) ? static_cast<T>(lr * weight_decay) : T(0);
        const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T epsilon = static_cast<T>(eps);
        for (Index i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            p[i] -= decay * p[i];
            p[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + epsilon);
        }
    }
}

template <typename T>
void AdamW<T>::restore(ParameterSet<T> m, ParameterSet<T> v, Index steps) {
    m_ = std::move(m);
    v_ = std::move(v);
    steps_ = steps;
}

template <typename T>
double clip_gradients(ParameterSet<T>& params, double max_norm) {
    double sq = 0;
    for (auto& [name, p] : params.entries())
        if (p.has_grad())
            for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T factor = static_cast<T>(max_norm / (norm + 1e-6));
        for (auto& [name, p] : params.entries())
            if (p.has_grad())
                for (T& g : p.grad()) g *= factor;
    }
    return norm;
}

namespace {

std::uint64_t model_seed(const RunConfig& c) { return derive_seed(c.train.seed, 1); }
std::uint64_t head_seed(const RunConfig& c) { return derive_seed(c.train.seed, 2); }
std::uint64_t augment_seed(const RunConfig& c) { return derive_seed(c.train.seed, 4); }

std::vector<Index> epoch_order(Index n, std::uint64_t seed, Index epoch) {
    std::vector<Index> order(n);
    for (Index i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 3, epoch));
    // Fisher-Yates with explicit draws so the order is fixed across standard libraries.
    for (Index i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    return order;
}

void freeze_auxiliary(ParameterSet<float>& params) {
    for (auto& [name, t] : params.entries())
        if (is_auxiliary_param(name)) t.set_requires_grad(false);
}

// Keeps only log records up to `last_step` so a resumed run continues a clean log.
void truncate_log(const std::string& path, Index last_step) {
    if (!std::filesystem::exists(path)) return;
    std::vector<std::string> kept;
    {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            if (j.value("step", Index{0}) < last_step) kept.push_back(line);
        }
    }
    std::ofstream out(path, std::ios::trunc);
    for (const auto& line : kept) out << line << '\n';
}

struct LoopContext {
    Index steps_per_epoch = 0;
    Index total_steps = 0;
    double warmup_steps = 0;
    double peak_lr = 0;
};

LoopContext loop_context(Index samples, const RunConfig& config) {
    LoopContext c;
    c.steps_per_epoch = steps_per_epoch(samples, config.train.batch_size);
    c.total_steps = c.steps_per_epoch * config.train.epochs;
    c.warmup_steps = config.train.warmup_epochs * static_cast<double>(c.steps_per_epoch);
    c.peak_lr = config.train.base_lr * static_cast<double>(config.train.batch_size) / 256.0;
    return c;
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

Index steps_per_epoch(Index samples, Index batch_size) {
    const Index steps = samples / batch_size;
    require(steps > 0, ErrorKind::Data,
            "dataset of " + std::to_string(samples) + " samples is smaller than one batch of " +
                std::to_string(batch_size));
    return steps;
}

TrainState init_pretrain_state(const RunConfig& config) {
    config.validate();
    TrainState state;
    state.config = config;
    state.student = init_model_params<float>(config.model, model_seed(config));
    init_head_params(state.student, config.head, config.model.embed_dim,
                     config.model.num_aux + config.model.num_pooled, head_seed(config));
    if (config.train.freeze_auxiliary) freeze_auxiliary(state.student);
    state.teacher.params = state.student.clone();
    state.teacher.params.set_requires_grad(false);
    state.teacher.center_fused = Tensor<float>(Shape{config.head.output_dim()});
    state.teacher.center_global = Tensor<float>(Shape{config.head.output_dim()});
    state.teacher.momentum = config.train.ema_start;
    return state;
}

HeadOutputs<float> head_outputs(const ParameterSet<float>& params, const Tensor<float>& images,
                                const RunConfig& config, bool need_fused) {
    const TokenBundle<float> bundle = forward(images, config.model, params);
    HeadOutputs<float> out;
    out.global = projection_head(bundle.global, params, global_head_prefix(), config.head);
    if (need_fused && config.model.num_aux + config.model.num_pooled > 0)
        out.fused = project_fuse(bundle.enhanced, bundle.pooled, bundle.batch, params, config.head).fused;
    return out;
}

StepMetrics train_step(TrainState& state, const Tensor<float>& view_a, const Tensor<float>& view_b, double lr,
                       double ema_momentum) {
    const RunConfig& config = state.config;
    const DistillMode mode = config.distill_mode();
    const bool need_fused = mode != DistillMode::GlobalOnly;
    const std::array<const Tensor<float>*, 2> views{&view_a, &view_b};

    std::array<HeadOutputs<float>, 2> teacher_out;
    {
        NoGradScope<float> no_grad;
        for (int v = 0; v < 2; ++v) teacher_out[v] = head_outputs(state.teacher.params, *views[v], config, need_fused);
    }

    state.student.zero_grad();
    StepMetrics metrics;
    {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        std::array<HeadOutputs<float>, 2> student_out;
        for (int v = 0; v < 2; ++v) student_out[v] = head_outputs(state.student, *views[v], config, need_fused);
        const PretrainLoss<float> loss = pretrain_loss(teacher_out, student_out, config.loss,
                                                       state.teacher.center_fused, state.teacher.center_global, mode);
        tape.backward(loss.total);
        metrics.loss = loss.total.item();
        metrics.loss_fused = loss.fused_term;
        metrics.loss_distill = loss.distill_term;
    }
    metrics.grad_norm = clip_gradients(state.student, config.train.grad_clip);
    state.optimizer.step(state.student, lr, config.train.weight_decay);
    renormalize_prototypes(state.student);
    state.student.zero_grad();

    ema_update(state.teacher.params, state.student, ema_momentum);
    if (config.train.freeze_auxiliary) {
        // m*x + (1-m)*x is not always x in floating point; frozen tensors stay bit-exact.
        for (auto& [name, t] : state.teacher.params.entries())
            if (is_auxiliary_param(name)) t = state.student.get(name).clone().set_requires_grad(false);
    }
    state.teacher.momentum = ema_momentum;
    const double cm = config.train.center_momentum;
    state.teacher.center_global =
        center_update(state.teacher.center_global, concat_rows(std::vector{teacher_out[0].global, teacher_out[1].global}), cm);
    if (need_fused)
        state.teacher.center_fused =
            center_update(state.teacher.center_fused, concat_rows(std::vector{teacher_out[0].fused, teacher_out[1].fused}), cm);
    ++state.step;
    return metrics;
}

Checkpoint to_checkpoint(const TrainState& state) {
    Checkpoint ck;
    ck.meta["kind"] = "pretrain";
    ck.meta["stripped"] = false;
    ck.meta["step"] = state.step;
    ck.meta["epoch"] = state.epoch;
    ck.meta["adam_steps"] = state.optimizer.steps();
    ck.meta["ema_momentum"] = state.teacher.momentum;
    set_checkpoint_config(ck, state.config);
    ck.put("student/", state.student);
    ck.put("teacher/", state.teacher.params);
    ck.put("adam.m/", state.optimizer.first_moment());
    ck.put("adam.v/", state.optimizer.second_moment());
    ck.put("state/center_fused", state.teacher.center_fused);
    ck.put("state/center_global", state.teacher.center_global);
    return ck;
}

TrainState train_state_from_checkpoint(const Checkpoint& ck) {
    require(ck.meta.value("kind", std::string()) == "pretrain" && !ck.meta.value("stripped", false),
            ErrorKind::Usage, "resuming needs an unstripped pretraining checkpoint");
    TrainState state;
    state.config = checkpoint_config(ck);
    state.student = ck.get<float>("student/");
    if (state.config.train.freeze_auxiliary) freeze_auxiliary(state.student);
    state.teacher.params = ck.get<float>("teacher/");
    state.teacher.params.set_requires_grad(false);
    state.teacher.center_fused = ck.tensor<float>("state/center_fused");
    state.teacher.center_global = ck.tensor<float>("state/center_global");
    state.teacher.momentum = ck.meta.value("ema_momentum", state.config.train.ema_start);
    state.optimizer.restore(ck.get<float>("adam.m/"), ck.get<float>("adam.v/"), ck.meta.value("adam_steps", Index{0}));
    state.step = ck.meta.value("step", Index{0});
    state.epoch = ck.meta.value("epoch", Index{0});
    return state;
}

namespace {

template <typename State, typename StepFn, typename CheckpointFn>
void run_loop(State& state, const Dataset& train, const TrainOptions& options, StepFn&& step_fn,
              CheckpointFn&& checkpoint_fn) {
    const RunConfig& config = state.config;
    const LoopContext ctx = loop_context(train.size(), config);
    MetricLog log;
    if (!options.out_dir.empty()) {
        const std::string path = (std::filesystem::path(options.out_dir) / "metrics.ndjson").string();
        if (state.step > 0) truncate_log(path, state.step);
        log = MetricLog(path, state.step > 0);
    }
    const Index batch = config.train.batch_size;
    for (Index epoch = state.epoch; epoch < config.train.epochs; ++epoch) {
        const std::vector<Index> order = epoch_order(train.size(), config.train.seed, epoch);
        double loss_sum = 0;
        for (Index s = 0; s < ctx.steps_per_epoch; ++s) {
            if (options.max_steps > 0 && state.step >= options.max_steps) return;
            const auto start = std::chrono::steady_clock::now();
            const std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(s * batch),
                                          order.begin() + static_cast<std::ptrdiff_t>((s + 1) * batch));
            const double t = static_cast<double>(state.step);
            const double lr = warmup_cosine(t, static_cast<double>(ctx.total_steps), ctx.warmup_steps, ctx.peak_lr,
                                            config.train.final_lr);
            const double ema = cosine_schedule(t, static_cast<double>(ctx.total_steps), config.train.ema_start,
                                               config.train.ema_end);
            StepRecord record;
            record.step = state.step;
            record.epoch = epoch;
            const StepMetrics m = step_fn(state, rows, epoch, lr, ema);
            record.loss = m.loss;
            record.loss_fused = m.loss_fused;
            record.loss_distill = m.loss_distill;
            record.lr = lr;
            record.ema_momentum = ema;
            record.wall_ms = elapsed_ms(start);
            log.write(record);
            loss_sum += m.loss;
        }
        state.epoch = epoch + 1;
        if (options.verbose)
            std::fprintf(stderr, "epoch %zu/%zu  mean loss %.5f\n", state.epoch, config.train.epochs,
                         loss_sum / static_cast<double>(ctx.steps_per_epoch));
        if constexpr (std::is_same_v<State, TrainState>) {
            if (options.on_epoch_end) options.on_epoch_end(state);
        } else {
            if (options.on_supervised_epoch_end) options.on_supervised_epoch_end(state);
        }
        const bool periodic = config.train.checkpoint_every > 0 && state.epoch % config.train.checkpoint_every == 0;
        if (!options.out_dir.empty() && (periodic || state.epoch == config.train.epochs)) {
            const Checkpoint ck = checkpoint_fn(state);
            const std::filesystem::path dir(options.out_dir);
            save_checkpoint((dir / ("checkpoint_epoch" + std::to_string(state.epoch) + ".mte")).string(), ck);
            save_checkpoint((dir / "last.mte").string(), ck);
        }
    }
}

}  // namespace

TrainState pretrain(const Dataset& train, const RunConfig& config, const TrainOptions& options) {
    require(train.size() > 0, ErrorKind::Data, "pretrain: empty dataset");
    TrainState state;
    const std::string last = (std::filesystem::path(options.out_dir) / "last.mte").string();
    if (options.resume && !options.out_dir.empty() && std::filesystem::exists(last)) {
        state = train_state_from_checkpoint(load_checkpoint(last));
        require(to_config_map(state.config) == to_config_map(config), ErrorKind::Configuration,
                "resume: checkpoint config differs from the requested config");
    } else {
        state = init_pretrain_state(config);
    }
    const Index size = config.model.image_size;
    const std::uint64_t aug_seed = augment_seed(config);
    run_loop(
        state, train, options,
        [&](TrainState& s, const std::vector<Index>& rows, Index epoch, double lr, double ema) {
            const Tensor<float> a = view_batch(train, rows, epoch, 0, size, config.augment, aug_seed);
            const Tensor<float> b = view_batch(train, rows, epoch, 1, size, config.augment, aug_seed);
            return train_step(s, a, b, lr, ema);
        },
        [](const TrainState& s) { return to_checkpoint(s); });
    return state;
}

SupervisedState init_supervised_state(const RunConfig& config) {
    config.validate();
    SupervisedState state;
    state.config = config;
    state.params = init_model_params<float>(config.model, model_seed(config));
    init_classifier_params(state.params, config.model.embed_dim, config.model.num_aux + config.model.num_pooled,
                           config.train.classes, config.train.shared_classifiers, head_seed(config));
    return state;
}

StepMetrics supervised_step(SupervisedState& state, const Tensor<float>& images, const std::vector<Index>& labels,
                            double lr) {
    state.params.zero_grad();
    StepMetrics metrics;
    {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        const TokenBundle<float> bundle = forward(images, state.config.model, state.params);
        const SupervisedLoss<float> loss =
            supervised_loss(bundle, state.params, state.config.train.shared_classifiers, labels);
        tape.backward(loss.total);
        metrics.loss = loss.total.item();
        metrics.loss_fused = loss.label_term;
        metrics.loss_distill = loss.distill_term;
    }
    metrics.grad_norm = clip_gradients(state.params, state.config.train.grad_clip);
    state.optimizer.step(state.params, lr, state.config.train.weight_decay);
    state.params.zero_grad();
    ++state.step;
    return metrics;
}

Checkpoint to_checkpoint(const SupervisedState& state) {
    Checkpoint ck;
    ck.meta["kind"] = "supervised";
    ck.meta["stripped"] = false;
    ck.meta["step"] = state.step;
    ck.meta["epoch"] = state.epoch;
    ck.meta["adam_steps"] = state.optimizer.steps();
    set_checkpoint_config(ck, state.config);
    ck.put("student/", state.params);
    ck.put("adam.m/", state.optimizer.first_moment());
    ck.put("adam.v/", state.optimizer.second_moment());
    return ck;
}

SupervisedState train_supervised(const Dataset& train, const RunConfig& config, const TrainOptions& options) {
    require(train.size() > 0, ErrorKind::Data, "train_supervised: empty dataset");
    require(train.num_classes() <= config.train.classes, ErrorKind::Configuration,
            "dataset has labels up to " + std::to_string(train.num_classes() - 1) + " but classes = " +
                std::to_string(config.train.classes));
    SupervisedState state;
    const std::string last = (std::filesystem::path(options.out_dir) / "last.mte").string();
    if (options.resume && !options.out_dir.empty() && std::filesystem::exists(last)) {
        const Checkpoint ck = load_checkpoint(last);
        state.config = checkpoint_config(ck);
        state.params = ck.get<float>("student/");
        state.optimizer.restore(ck.get<float>("adam.m/"), ck.get<float>("adam.v/"), ck.meta.value("adam_steps", Index{0}));
        state.step = ck.meta.value("step", Index{0});
        state.epoch = ck.meta.value("epoch", Index{0});
    } else {
        state = init_supervised_state(config);
    }
    const Index size = config.model.image_size;
    const std::uint64_t aug_seed = augment_seed(config);
    run_loop(
        state, train, options,
        [&](SupervisedState& s, const std::vector<Index>& rows, Index epoch, double lr, double) {
            std::vector<Index> labels;
            for (Index r : rows) labels.push_back(train.labels[r]);
            return supervised_step(s, view_batch(train, rows, epoch, 0, size, config.augment, aug_seed), labels, lr);
        },
        [](const SupervisedState& s) { return to_checkpoint(s); });
    return state;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_gradients(ParameterSet<float>&, double);
template double clip_gradients(ParameterSet<double>&, double);

}  // namespace mte
