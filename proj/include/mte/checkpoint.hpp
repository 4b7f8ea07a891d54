#pragma once

// Checkpoint container: "MTECKPT1" magic, a version word, a JSON metadata block,
// then named tensors stored as (name, dtype byte, rank, dims, little-endian data).
// Tensor names carry a group prefix: "student/", "teacher/", "adam.m/", "adam.v/",
// "state/" for training checkpoints and "model/" for stripped ones.

#include <string>
#include <vector>

#include "json.hpp"
#include "mte/config.hpp"
#include "mte/model.hpp"

namespace mte {

enum class DType : unsigned char { F32 = 0, F64 = 1 };

struct StoredTensor {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::vector<double> values;  // widening float to double is exact
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<StoredTensor> tensors;

    template <typename T>
    void put(const std::string& group, const ParameterSet<T>& params);
    template <typename T>
    void put(const std::string& name, const Tensor<T>& tensor);

    bool has_group(const std::string& group) const;
    const StoredTensor& find(const std::string& name) const;

    // Tensors under `group` with the prefix removed; gradient flags set.
    template <typename T>
    ParameterSet<T> get(const std::string& group) const;
    template <typename T>
    Tensor<T> tensor(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

RunConfig checkpoint_config(const Checkpoint& checkpoint);
void set_checkpoint_config(Checkpoint& checkpoint, const RunConfig& config);

// Network weights ready for evaluation: the EMA teacher when present (the teacher
// is the evaluated network in self-distillation), else the student, else "model/".
struct LoadedModel {
    RunConfig config;
    ParameterSet<float> params;
    bool stripped = false;
    std::string kind;
};

LoadedModel load_model(const Checkpoint& checkpoint);
LoadedModel load_model(const std::string& path);

// Produces an inference-only checkpoint: auxiliary tokens, TEN, pooler, every
// projection head and all optimizer / teacher state are dropped; M = K = 0.
Checkpoint strip_checkpoint(const Checkpoint& checkpoint, StripReport* report = nullptr);

}  // namespace mte
