#pragma once

// Image datasets (CIFAR-10 binary batches, procedural synthetic classes) and
// plot-ready exports of the adaptive pooling weight maps.

#include <cstdint>
#include <string>
#include <vector>

#include "mte/config.hpp"
#include "mte/model.hpp"

namespace mte {

// Images are HWC floats in [0, 1]; byte b maps to b / 255.
struct Dataset {
    Index height = 0, width = 0, channels = 3;
    std::vector<float> pixels;
    std::vector<Index> labels;
    std::vector<Index> ids;  // stable sample ids, unique within the dataset

    Index size() const { return labels.size(); }
    Index image_size() const { return height * width * channels; }
    const float* image(Index i) const { return pixels.data() + i * image_size(); }
    Index num_classes() const;
};

constexpr Index kCifarRecordBytes = 3073;

// Records are 1 label byte followed by 3 x 1024 channel-planar pixel bytes.
// Order follows (file, offset); `class_filter` (empty keeps all) relabels nothing.
Dataset load_cifar_batches(const std::vector<std::string>& paths, const std::vector<Index>& class_filter,
                           Index per_class_cap);

// Writes raw CIFAR records; `planar_pixels` holds 3072 bytes per label.
void write_cifar_batch(const std::string& path, const std::vector<std::uint8_t>& labels,
                       const std::vector<std::uint8_t>& planar_pixels);

// Procedural classes: each class owns a background hue, a grating frequency and a
// foreground shape; position, size, orientation, phase and colors jitter per image.
Dataset gen_synthetic(Index classes, Index per_class, Index image_size, std::uint64_t seed);

struct Split {
    Dataset train;
    Dataset test;
};

Split synthetic_split(Index classes, Index train_per_class, Index test_per_class, Index image_size,
                      std::uint64_t seed);

// CIFAR directory layout: data_batch_1..5.bin (train) and test_batch.bin (test).
Split load_cifar_split(const std::string& dir, const std::vector<Index>& class_filter, Index per_class_cap);

// The train/test split named by `dataset` ("synthetic" or "cifar").
Split load_split(const DataConfig& config);

// Writes one CSV per pooled-token branch per image: the sqrt(N) x sqrt(N) adaptive
// weight grid for each selected channel, followed by the k x k depthwise kernel.
// Returns the written paths. `images` is [B, H, W, C] at the model resolution.
std::vector<std::string> export_weight_maps(const ParameterSet<float>& params, const ModelConfig& config,
                                            const Tensor<float>& images, const std::vector<Index>& channels,
                                            const std::string& out_dir);

}  // namespace mte
