#pragma once

// Run configuration. Files hold one `key = value` pair per line ('#' starts a
// comment); the same flat keys are accepted as CLI overrides, which win.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mte/model.hpp"
#include "mte/objectives.hpp"

namespace mte {

struct TrainConfig {
    Index epochs = 30;
    Index batch_size = 32;
    double base_lr = 5e-4;  // scaled by batch_size / 256 at run time
    double final_lr = 1e-6;
    double warmup_epochs = 3;
    double weight_decay = 0.04;
    double ema_start = 0.996;
    double ema_end = 1.0;
    double center_momentum = 0.9;
    double grad_clip = 3.0;  // global norm; 0 disables
    std::uint64_t seed = 0;
    bool no_distill = false;
    bool freeze_auxiliary = false;
    Index checkpoint_every = 10;  // epochs; the final epoch is always written
    Index classes = 10;           // supervised variant
    bool shared_classifiers = false;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct AugmentConfig {
    double crop_scale_min = 0.35;
    double crop_scale_max = 1.0;
    double flip_p = 0.5;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.2;
    double grayscale_p = 0.2;

    void validate() const;
    bool operator==(const AugmentConfig&) const = default;
};

struct DataConfig {
    std::string dataset = "synthetic";  // synthetic | cifar
    Index synthetic_classes = 3;
    Index train_per_class = 200;
    Index test_per_class = 50;
    Index synthetic_size = 64;
    std::uint64_t seed = 0;  // synthetic generator; independent of the training seed
    std::string cifar_dir;
    std::vector<Index> class_filter;  // empty keeps every class
    Index per_class_cap = 0;          // 0 keeps every record

    bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    HeadConfig head;
    LossSettings loss;
    TrainConfig train;
    AugmentConfig augment;
    DataConfig data;

    void validate() const;
    DistillMode distill_mode() const;
};

using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);

// Applies every entry; unknown keys and malformed values are configuration errors.
void apply_config(RunConfig& config, const ConfigMap& values);
ConfigMap to_config_map(const RunConfig& config);
std::string to_config_text(const RunConfig& config);
std::vector<std::string> config_keys();

}  // namespace mte
