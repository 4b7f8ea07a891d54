#include "mte/flops.hpp"

namespace mte {

FlopCount flop_count(const ModelConfig& config, const HeadConfig& head, FlopMode mode) {
    config.validate();
    const bool train = mode == FlopMode::TrainForward;
    const std::uint64_t d = config.embed_dim, n = config.num_patches();
    const std::uint64_t hidden = d * config.mlp_ratio;
    const std::uint64_t m = train ? config.num_aux : 0;
    const std::uint64_t k = train ? config.num_pooled : 0;
    const std::uint64_t tokens = 1 + m + n;
    const std::uint64_t patch_dim = config.patch_size * config.patch_size * config.channels;

    FlopCount f;
    f.patch_embed = n * patch_dim * d;
    // q, k, v and output projections plus QK^T and PV, per block.
    f.attention = config.depth * (4 * tokens * d * d + 2 * tokens * tokens * d);
    f.mlp = config.depth * (2 * tokens * d * hidden);
    if (train && m > 0) {
        f.ten = m * d * d            // query projection
                + 2 * n * d * d      // key and value projections
                + 2 * m * n * d      // scores and weighted values
                + m * d * d          // output projection
                + 2 * m * d * hidden;  // MLP
    }
    if (train && k > 0) {
        const std::uint64_t kk = config.effective_pool_kernel();
        f.pooler = k * (n * d * d + n * kk * kk * d + n * d);
    }
    if (train) {
        const std::uint64_t per_head = d * head.hidden + head.hidden * head.hidden + head.hidden * head.bottleneck +
                                       (head.kind == BaseLossKind::Clustering ? head.bottleneck * head.prototypes : 0);
        f.heads = (1 + m + k) * per_head;
    }
    return f;
}

}  // namespace mte
