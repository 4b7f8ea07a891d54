#include "mte/model.hpp"

#include <cmath>

namespace mte {

Index ModelConfig::effective_pool_kernel() const {
    const Index g = grid();
    if (pool_kernel <= g) return pool_kernel;
    return g % 2 == 1 ? g : g - 1;
}

void ModelConfig::validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorKind::Configuration, what); };
    check(patch_size > 0 && image_size > 0 && image_size % patch_size == 0,
          "image_size " + std::to_string(image_size) + " must be a positive multiple of patch_size " +
              std::to_string(patch_size));
    check(heads > 0 && embed_dim % heads == 0,
          "embed_dim " + std::to_string(embed_dim) + " must be divisible by heads " + std::to_string(heads));
    check(depth >= 1, "depth must be at least 1");
    check(mlp_ratio >= 1, "mlp_ratio must be at least 1");
    check(channels >= 1, "channels must be at least 1");
    check(pool_kernel % 2 == 1, "pool_kernel must be odd, got " + std::to_string(pool_kernel));
}

AttentionMask build_attention_mask(Index num_aux, Index num_patches) {
    AttentionMask mask;
    mask.size = 1 + num_aux + num_patches;
    mask.allowed.assign(mask.size * mask.size, 1);
    const auto is_aux = [num_aux](Index t) { return t >= 1 && t < 1 + num_aux; };
    for (Index q = 0; q < mask.size; ++q) {
        if (is_aux(q)) continue;
        for (Index k = 0; k < mask.size; ++k)
            if (is_aux(k)) mask.allowed[q * mask.size + k] = 0;
    }
    return mask;
}

template <typename T>
Tensor<T> token_rows(const Tensor<T>& tokens, Index per_image, Index index, Index batch) {
    std::vector<Index> rows(batch);
    for (Index b = 0; b < batch; ++b) rows[b] = b * per_image + index;
    return gather_rows(tokens, rows);
}

template <typename T>
TenModule<T> TenModule<T>::view(const ParameterSet<T>& p, Index heads) {
    TenModule m;
    m.norm_q_weight = p.get("ten.norm_q.weight");
    m.norm_q_bias = p.get("ten.norm_q.bias");
    m.norm_kv_weight = p.get("ten.norm_kv.weight");
    m.norm_kv_bias = p.get("ten.norm_kv.bias");
    m.q_weight = p.get("ten.q.weight");
    m.q_bias = p.get("ten.q.bias");
    m.k_weight = p.get("ten.k.weight");
    m.k_bias = p.get("ten.k.bias");
    m.v_weight = p.get("ten.v.weight");
    m.v_bias = p.get("ten.v.bias");
    m.out_weight = p.get("ten.proj.weight");
    m.out_bias = p.get("ten.proj.bias");
    m.norm2_weight = p.get("ten.norm2.weight");
    m.norm2_bias = p.get("ten.norm2.bias");
    m.fc1_weight = p.get("ten.fc1.weight");
    m.fc1_bias = p.get("ten.fc1.bias");
    m.fc2_weight = p.get("ten.fc2.weight");
    m.fc2_bias = p.get("ten.fc2.bias");
    m.heads = heads;
    return m;
}

template <typename T>
AdaptivePooler<T> AdaptivePooler<T>::view(const ParameterSet<T>& p, const ModelConfig& config) {
    AdaptivePooler pooler;
    pooler.grid = config.grid();
    for (Index i = 0; i < config.num_pooled; ++i) {
        const std::string base = "pool." + std::to_string(i);
        pooler.branches.push_back(
            {p.get(base + ".pw.weight"), p.get(base + ".pw.bias"), p.get(base + ".dw.kernel")});
    }
    return pooler;
}

namespace {

template <typename T>
class Initializer {
   public:
    Initializer(ParameterSet<T>& params, std::uint64_t seed) : params_(params), seed_(seed) {}

    // Each tensor draws from its own stream keyed by name, so encoder weights do not
    // depend on how many auxiliary components exist.
    Tensor<T>& trunc_normal(const std::string& name, Shape shape, double stddev) {
        Tensor<T> t(std::move(shape));
        Rng rng(derive_seed(seed_, hash_name(name)));
        fill_trunc_normal(t, rng, stddev);
        return params_.add(name, std::move(t));
    }
    Tensor<T>& normal(const std::string& name, Shape shape, double stddev) {
        Tensor<T> t(std::move(shape));
        Rng rng(derive_seed(seed_, hash_name(name)));
        fill_normal(t, rng, stddev);
        return params_.add(name, std::move(t));
    }
    Tensor<T>& constant(const std::string& name, Shape shape, T value) {
        return params_.add(name, Tensor<T>(std::move(shape), value));
    }
    void linear(const std::string& name, Index in, Index out, double stddev = 0.02) {
        trunc_normal(name + ".weight", {in, out}, stddev);
        constant(name + ".bias", {out}, T(0));
    }
    void norm(const std::string& name, Index dim) {
        constant(name + ".weight", {dim}, T(1));
        constant(name + ".bias", {dim}, T(0));
    }

   private:
    ParameterSet<T>& params_;
    std::uint64_t seed_;
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& name) {
    return add_bias(matmul(x, p.get(name + ".weight")), p.get(name + ".bias"));
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const ParameterSet<T>& p, const std::string& name) {
    return layer_norm(x, p.get(name + ".weight"), p.get(name + ".bias"), T(1e-6));
}

template <typename T>
void check_finite(const Tensor<T>& x, const std::string& where) {
    for (T v : x.data())
        require(std::isfinite(v), ErrorKind::Numeric, "non-finite activation in " + where);
}

}  // namespace

template <typename T>
ParameterSet<T> init_model_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ParameterSet<T> params;
    Initializer<T> init(params, seed);
    const Index d = config.embed_dim;
    const Index patch_dim = config.patch_size * config.patch_size * config.channels;
    init.trunc_normal("patch_embed.weight", {patch_dim, d}, 1.0 / std::sqrt(static_cast<double>(patch_dim)));
    init.constant("patch_embed.bias", {d}, T(0));
    init.trunc_normal("pos_embed", {config.num_patches(), d}, 0.02);
    init.trunc_normal("cls_token", {1, d}, 0.02);
    if (config.num_aux > 0) init.trunc_normal("aux_tokens", {config.num_aux, d}, 0.02);
    for (Index i = 0; i < config.depth; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        init.norm(b + ".norm1", d);
        init.linear(b + ".attn.q", d, d);
        init.linear(b + ".attn.k", d, d);
        init.linear(b + ".attn.v", d, d);
        init.linear(b + ".attn.proj", d, d);
        init.norm(b + ".norm2", d);
        init.linear(b + ".mlp.fc1", d, d * config.mlp_ratio);
        init.linear(b + ".mlp.fc2", d * config.mlp_ratio, d);
    }
    init.norm("norm", d);
    if (config.num_aux > 0) {
        init.norm("ten.norm_q", d);
        init.norm("ten.norm_kv", d);
        init.linear("ten.q", d, d);
        init.linear("ten.k", d, d);
        init.linear("ten.v", d, d);
        init.linear("ten.proj", d, d);
        init.norm("ten.norm2", d);
        init.linear("ten.fc1", d, d * config.mlp_ratio);
        init.linear("ten.fc2", d * config.mlp_ratio, d);
    }
    const Index k = config.effective_pool_kernel();
    for (Index i = 0; i < config.num_pooled; ++i) {
        const std::string b = "pool." + std::to_string(i);
        // Unit-variance maps at init: pointwise ~ N(0, 1/D) on normed tokens, depthwise ~ N(0, 1/k^2).
        init.normal(b + ".pw.weight", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
        init.constant(b + ".pw.bias", {d}, T(0));
        init.normal(b + ".dw.kernel", {k, k, d}, 1.0 / static_cast<double>(k));
    }
    params.set_requires_grad(true);
    return params;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const ModelConfig& config) {
    require(images.rank() == 4 && images.dim(1) == config.image_size && images.dim(2) == config.image_size &&
                images.dim(3) == config.channels,
            ErrorKind::Dimension,
            "images " + shape_string(images.shape()) + " do not match model input [B," +
                std::to_string(config.image_size) + "," + std::to_string(config.image_size) + "," +
                std::to_string(config.channels) + "]");
    const Index batch = images.dim(0), g = config.grid(), p = config.patch_size, c = config.channels;
    const Index side = config.image_size;
    const Index patch_dim = p * p * c;
    Tensor<T> out(Shape{batch * g * g, patch_dim});
    for (Index b = 0; b < batch; ++b)
        for (Index gy = 0; gy < g; ++gy)
            for (Index gx = 0; gx < g; ++gx) {
                T* row = out.ptr() + ((b * g + gy) * g + gx) * patch_dim;
                for (Index py = 0; py < p; ++py)
                    for (Index px = 0; px < p; ++px)
                        for (Index ch = 0; ch < c; ++ch) {
                            const T v = images[((b * side + gy * p + py) * side + gx * p + px) * c + ch];
                            row[(py * p + px) * c + ch] = (v - T(0.5)) / T(0.25);
                        }
            }
    return out;
}

template <typename T>
Tensor<T> encode(const Tensor<T>& images, const ModelConfig& config, const ParameterSet<T>& params,
                 ForwardTrace<T>* trace) {
    config.validate();
    const Index batch = images.dim(0);
    const Index m = config.num_aux, n = config.num_patches(), tokens = config.num_tokens();
    const Index d = config.embed_dim;

    Tensor<T> embedded = linear(patchify(images, config), params, "patch_embed");
    std::vector<Index> pos_rows(batch * n);
    for (Index i = 0; i < pos_rows.size(); ++i) pos_rows[i] = i % n;
    embedded = add(embedded, gather_rows(params.get("pos_embed"), pos_rows));

    std::vector<Tensor<T>> parts{params.get("cls_token")};
    if (m > 0) parts.push_back(params.get("aux_tokens"));
    parts.push_back(embedded);
    std::vector<Index> order;
    order.reserve(batch * tokens);
    for (Index b = 0; b < batch; ++b) {
        for (Index t = 0; t < 1 + m; ++t) order.push_back(t);
        for (Index t = 0; t < n; ++t) order.push_back(1 + m + b * n + t);
    }
    Tensor<T> x = gather_rows(concat_rows(parts), order);

    std::optional<AttentionMask> mask;
    if (config.mask_auxiliary && m > 0) mask = build_attention_mask(m, n);
    const kernels::AttentionShape shape{batch, tokens, tokens, d, config.heads};

    for (Index i = 0; i < config.depth; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        const Tensor<T> h = norm(x, params, b + ".norm1");
        const Tensor<T> q = linear(h, params, b + ".attn.q");
        const Tensor<T> k = linear(h, params, b + ".attn.k");
        const Tensor<T> v = linear(h, params, b + ".attn.v");
        Tensor<T>* probs = (trace != nullptr && i + 1 == config.depth) ? &trace->last_attention : nullptr;
        const Tensor<T> a = attention(q, k, v, shape, mask ? &mask->allowed : nullptr, probs);
        x = add(x, linear(a, params, b + ".attn.proj"));
        const Tensor<T> h2 = norm(x, params, b + ".norm2");
        x = add(x, linear(gelu(linear(h2, params, b + ".mlp.fc1")), params, b + ".mlp.fc2"));
        check_finite(x, "encoder block " + std::to_string(i));
    }
    return norm(x, params, "norm");
}

template <typename T>
Tensor<T> ten_forward(const Tensor<T>& aux, const Tensor<T>& patches, const TenModule<T>& ten,
                      Index batch) {
    const Index d = patches.cols();
    if (aux.rows() == 0) return Tensor<T>(Shape{0, d});
    require(batch > 0 && aux.rows() % batch == 0 && patches.rows() % batch == 0, ErrorKind::Dimension,
            "ten_forward: token rows " + shape_string(aux.shape()) + " / " + shape_string(patches.shape()) +
                " not divisible by batch " + std::to_string(batch));
    const Index m = aux.rows() / batch, n = patches.rows() / batch;
    const Tensor<T> qn = layer_norm(aux, ten.norm_q_weight, ten.norm_q_bias, T(1e-6));
    const Tensor<T> kvn = layer_norm(patches, ten.norm_kv_weight, ten.norm_kv_bias, T(1e-6));
    const Tensor<T> q = add_bias(matmul(qn, ten.q_weight), ten.q_bias);
    const Tensor<T> k = add_bias(matmul(kvn, ten.k_weight), ten.k_bias);
    const Tensor<T> v = add_bias(matmul(kvn, ten.v_weight), ten.v_bias);
    const Tensor<T> a = attention(q, k, v, kernels::AttentionShape{batch, m, n, d, ten.heads});
    const Tensor<T> x = add(aux, add_bias(matmul(a, ten.out_weight), ten.out_bias));
    const Tensor<T> h = layer_norm(x, ten.norm2_weight, ten.norm2_bias, T(1e-6));
    const Tensor<T> hidden = gelu(add_bias(matmul(h, ten.fc1_weight), ten.fc1_bias));
    return add(x, add_bias(matmul(hidden, ten.fc2_weight), ten.fc2_bias));
}

template <typename T>
Tensor<T> adaptive_weights(const Tensor<T>& patches, const PoolerBranch<T>& branch, Index grid,
                           Index batch) {
    const Index d = patches.cols();
    require(grid * grid * batch == patches.rows(), ErrorKind::Configuration,
            "adaptive_pool: " + std::to_string(patches.rows()) + " patch rows do not form " +
                std::to_string(batch) + " square grids of side " + std::to_string(grid));
    const Tensor<T> spatial = reshape(patches, Shape{batch, grid, grid, d});
    const Tensor<T> mixed = pointwise_conv1x1(spatial, branch.pw_weight, branch.pw_bias);
    return reshape(depthwise_conv2d(mixed, branch.dw_kernel), Shape{batch * grid * grid, d});
}

template <typename T>
Tensor<T> adaptive_pool(const Tensor<T>& patches, const AdaptivePooler<T>& pooler, Index batch) {
    const Index d = patches.cols();
    const Index k = pooler.branches.size();
    if (k == 0) return Tensor<T>(Shape{0, d});
    const Index n = patches.rows() / std::max<Index>(batch, 1);
    const auto side = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(n))));
    require(side * side == n && n * batch == patches.rows(), ErrorKind::Configuration,
            "adaptive_pool: patch count " + std::to_string(n) + " is not a perfect square");
    require(side == pooler.grid, ErrorKind::Configuration,
            "adaptive_pool: grid side " + std::to_string(side) + " does not match pooler grid " +
                std::to_string(pooler.grid));
    std::vector<Tensor<T>> per_branch;
    per_branch.reserve(k);
    for (const auto& branch : pooler.branches) {
        const Tensor<T> w = adaptive_weights(patches, branch, pooler.grid, batch);
        per_branch.push_back(segment_mean_rows(mul(w, patches), batch));
    }
    std::vector<Index> order(batch * k);
    for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < k; ++i) order[b * k + i] = i * batch + b;
    return gather_rows(concat_rows(per_branch), order);
}

template <typename T>
TokenBundle<T> forward(const Tensor<T>& images, const ModelConfig& config,
                       const ParameterSet<T>& params, ForwardTrace<T>* trace) {
    const Tensor<T> z = encode(images, config, params, trace);
    const Index batch = images.dim(0);
    const Index m = config.num_aux, n = config.num_patches(), tokens = config.num_tokens();
    TokenBundle<T> bundle;
    bundle.batch = batch;
    std::vector<Index> global_rows, aux_rows, patch_rows;
    for (Index b = 0; b < batch; ++b) {
        global_rows.push_back(b * tokens);
        for (Index i = 0; i < m; ++i) aux_rows.push_back(b * tokens + 1 + i);
        for (Index i = 0; i < n; ++i) patch_rows.push_back(b * tokens + 1 + m + i);
    }
    bundle.global = gather_rows(z, global_rows);
    bundle.aux = m > 0 ? gather_rows(z, aux_rows) : Tensor<T>(Shape{0, config.embed_dim});
    bundle.patches = gather_rows(z, patch_rows);
    bundle.enhanced = m > 0 ? ten_forward(bundle.aux, bundle.patches, TenModule<T>::view(params, config.heads), batch)
                            : Tensor<T>(Shape{0, config.embed_dim});
    bundle.pooled = config.num_pooled > 0
                        ? adaptive_pool(bundle.patches, AdaptivePooler<T>::view(params, config), batch)
                        : Tensor<T>(Shape{0, config.embed_dim});
    check_finite(bundle.enhanced, "token enhancing module");
    check_finite(bundle.pooled, "adaptive pooling");
    return bundle;
}

template <typename T>
std::pair<ParameterSet<T>, ModelConfig> strip_auxiliary(const ParameterSet<T>& params,
                                                        const ModelConfig& config,
                                                        StripReport* report) {
    ParameterSet<T> stripped = params.clone();
    Index removed = 0;
    for (const char* prefix : {"aux_tokens", "ten.", "pool.", "head."}) removed += stripped.erase_prefix(prefix);
    ModelConfig out = config;
    out.num_aux = 0;
    out.num_pooled = 0;
    if (report != nullptr) {
        report->removed_scalars = removed;
        report->lossless = config.mask_auxiliary || config.num_aux == 0;
    }
    return {std::move(stripped), out};
}

#define MTE_INSTANTIATE_MODEL(T)                                                                   \
    template Tensor<T> token_rows(const Tensor<T>&, Index, Index, Index);                          \
    template struct TenModule<T>;                                                                  \
    template struct AdaptivePooler<T>;                                                             \
    template ParameterSet<T> init_model_params<T>(const ModelConfig&, std::uint64_t);              \
    template Tensor<T> patchify(const Tensor<T>&, const ModelConfig&);                             \
    template Tensor<T> encode(const Tensor<T>&, const ModelConfig&, const ParameterSet<T>&,        \
                              ForwardTrace<T>*);                                                   \
    template TokenBundle<T> forward(const Tensor<T>&, const ModelConfig&, const ParameterSet<T>&,  \
                                    ForwardTrace<T>*);                                             \
    template Tensor<T> ten_forward(const Tensor<T>&, const Tensor<T>&, const TenModule<T>&, Index); \
    template Tensor<T> adaptive_weights(const Tensor<T>&, const PoolerBranch<T>&, Index, Index);   \
    template Tensor<T> adaptive_pool(const Tensor<T>&, const AdaptivePooler<T>&, Index);           \
    template std::pair<ParameterSet<T>, ModelConfig> strip_auxiliary(                              \
        const ParameterSet<T>&, const ModelConfig&, StripReport*);

MTE_INSTANTIATE_MODEL(float)
MTE_INSTANTIATE_MODEL(double)

#undef MTE_INSTANTIATE_MODEL

}  // namespace mte
