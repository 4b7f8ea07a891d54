#pragma once

// Two-view augmentation. Every draw is keyed by (seed, sample id, epoch, view), so
// views never depend on batch composition or worker scheduling.

#include <array>
#include <cstdint>
#include <vector>

#include "mte/config.hpp"
#include "mte/data.hpp"

namespace mte {

struct ViewParams {
    double crop_x = 0, crop_y = 0, crop_w = 0, crop_h = 0;
    bool flipped = false;
    double brightness = 1, contrast = 1, saturation = 1;
    bool grayscale = false;
};

// Random resized crop -> horizontal flip -> brightness/contrast/saturation jitter ->
// random grayscale. Writes out_size x out_size x C floats into `out`.
ViewParams make_view(const float* image, Index height, Index width, Index channels, Index out_size,
                     const AugmentConfig& config, std::uint64_t seed, float* out);

std::array<std::vector<float>, 2> make_views(const Dataset& data, Index index, Index epoch, Index out_size,
                                             const AugmentConfig& config, std::uint64_t seed);

// [B, S, S, C] batch of view `view` (0 or 1) for the given dataset rows.
Tensor<float> view_batch(const Dataset& data, const std::vector<Index>& rows, Index epoch, Index view,
                         Index out_size, const AugmentConfig& config, std::uint64_t seed);

// Deterministic evaluation input: the whole image resized to out_size (no augmentation).
Tensor<float> eval_batch(const Dataset& data, const std::vector<Index>& rows, Index out_size);

}  // namespace mte
