#pragma once

// Schedules, AdamW, the self-distillation train step, the pretraining and
// supervised loops, and training checkpoints (resumable at epoch boundaries).

#include <functional>
#include <string>

#include "mte/checkpoint.hpp"
#include "mte/config.hpp"
#include "mte/data.hpp"
#include "mte/objectives.hpp"

namespace mte {

// Half-cosine from `start` (t = 0) to `end` (t = total). t > total is clamped.
double cosine_schedule(double t, double total, double start, double end);

// Linear warmup to `peak` over `warmup` steps, then cosine decay to `final_value`.
double warmup_cosine(double t, double total, double warmup, double peak, double final_value);

template <typename T>
class AdamW {
   public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    // Updates every tensor holding a gradient; tensors without one are untouched.
    // Decoupled decay applies to matrices only (not biases, norms, tokens or prototypes).
    void step(ParameterSet<T>& params, double lr, double weight_decay);

    Index steps() const { return steps_; }
    ParameterSet<T>& first_moment() { return m_; }
    ParameterSet<T>& second_moment() { return v_; }
    const ParameterSet<T>& first_moment() const { return m_; }
    const ParameterSet<T>& second_moment() const { return v_; }
    void restore(ParameterSet<T> m, ParameterSet<T> v, Index steps);

   private:
    ParameterSet<T> m_, v_;
    Index steps_ = 0;
};

bool decays_weight(const std::string& name, Index rank);

// Parameters that exist only for the auxiliary tokens: tokens, TEN, pooler and
// their heads/classifiers. Frozen in freeze_auxiliary mode.
bool is_auxiliary_param(const std::string& name);

// Scales gradients so their global L2 norm is at most `max_norm` (0 disables);
// returns the norm before clipping.
template <typename T>
double clip_gradients(ParameterSet<T>& params, double max_norm);

struct StepMetrics {
    double loss = 0, loss_fused = 0, loss_distill = 0, grad_norm = 0;
};

struct TrainState {
    RunConfig config;
    ParameterSet<float> student;
    TeacherState<float> teacher;
    AdamW<float> optimizer;
    Index step = 0;
    Index epoch = 0;  // completed epochs
};

TrainState init_pretrain_state(const RunConfig& config);

// Head outputs for one batch of views; `need_fused` skips the auxiliary heads.
HeadOutputs<float> head_outputs(const ParameterSet<float>& params, const Tensor<float>& images,
                                const RunConfig& config, bool need_fused);

StepMetrics train_step(TrainState& state, const Tensor<float>& view_a, const Tensor<float>& view_b, double lr,
                       double ema_momentum);

Checkpoint to_checkpoint(const TrainState& state);
TrainState train_state_from_checkpoint(const Checkpoint& checkpoint);

struct SupervisedState;

struct TrainOptions {
    std::string out_dir;  // empty: no checkpoints or metric log
    bool resume = false;  // continue from <out_dir>/last.mte when it exists
    Index max_steps = 0;  // stop after this global step without checkpointing (0: run to completion)
    bool verbose = false;
    std::function<void(const TrainState&)> on_epoch_end;
    std::function<void(const SupervisedState&)> on_supervised_epoch_end;
};

Index steps_per_epoch(Index samples, Index batch_size);

TrainState pretrain(const Dataset& train, const RunConfig& config, const TrainOptions& options = {});

struct SupervisedState {
    RunConfig config;
    ParameterSet<float> params;
    AdamW<float> optimizer;
    Index step = 0;
    Index epoch = 0;
};

SupervisedState init_supervised_state(const RunConfig& config);
StepMetrics supervised_step(SupervisedState& state, const Tensor<float>& images, const std::vector<Index>& labels,
                            double lr);
Checkpoint to_checkpoint(const SupervisedState& state);

SupervisedState train_supervised(const Dataset& train, const RunConfig& config, const TrainOptions& options = {});

}  // namespace mte
