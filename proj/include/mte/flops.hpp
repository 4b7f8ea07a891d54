#pragma once

// Analytic multiply-accumulate counts per input image. Normalization, softmax and
// activation costs are not counted; only matrix and convolution MACs are.

#include <cstdint>

#include "mte/model.hpp"
#include "mte/objectives.hpp"

namespace mte {

enum class FlopMode { TrainForward, Inference };

struct FlopCount {
    std::uint64_t patch_embed = 0;
    std::uint64_t attention = 0;  // q/k/v/proj projections plus score and value products
    std::uint64_t mlp = 0;
    std::uint64_t ten = 0;
    std::uint64_t pooler = 0;
    std::uint64_t heads = 0;

    std::uint64_t total() const { return patch_embed + attention + mlp + ten + pooler + heads; }
};

// Inference runs the stripped network (no auxiliary tokens, TEN, pooler or heads);
// the training forward adds all of them plus the global head.
FlopCount flop_count(const ModelConfig& config, const HeadConfig& head, FlopMode mode);

}  // namespace mte
