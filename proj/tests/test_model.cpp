#include <cmath>
#include <random>

#include "doctest.h"
#include "mte/errors.hpp"
#include "mte/model.hpp"
#include "mte/params.hpp"

using namespace mte;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.embed_dim = 16;
    c.depth = 2;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.patch_size = 4;
    c.image_size = 16;
    c.num_aux = 3;
    c.num_pooled = 2;
    c.pool_kernel = 3;
    return c;
}

Tensor<float> random_images(Index batch, Index side, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor<float> t({batch, side, side, 3});
    for (float& v : t.data()) v = u(rng);
    return t;
}

// A constant shift would vanish under LayerNorm, so perturb with noise.
void perturb(Tensor<float>& t, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (float& v : t.data()) v += g(rng);
}

double max_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace

TEST_CASE("forward produces one row per token per image") {
    const ModelConfig c = small_config();
    const auto params = init_model_params<float>(c, 1);
    const auto b = forward(random_images(2, 16, 1), c, params);
    CHECK(b.global.shape() == Shape{2, 16});
    CHECK(b.aux.shape() == Shape{6, 16});
    CHECK(b.patches.shape() == Shape{32, 16});
    CHECK(b.enhanced.shape() == Shape{6, 16});
    CHECK(b.pooled.shape() == Shape{4, 16});
}

TEST_CASE("M = K = 0 yields empty auxiliary outputs") {
    ModelConfig c = small_config();
    c.num_aux = c.num_pooled = 0;
    const auto b = forward(random_images(2, 16, 2), c, init_model_params<float>(c, 1));
    CHECK(b.enhanced.rows() == 0);
    CHECK(b.pooled.rows() == 0);
    CHECK(b.global.rows() == 2);
}

TEST_CASE("attention mask layout") {
    const AttentionMask m = build_attention_mask(2, 3);
    REQUIRE(m.size == 6);
    for (Index k = 0; k < 6; ++k) {
        const bool aux_key = k == 1 || k == 2;
        CHECK(m(0, k) == !aux_key);       // global query
        CHECK(m(4, k) == !aux_key);       // patch query
        CHECK(m(1, k));                   // auxiliary queries see everything
    }
}

TEST_CASE("initialization is deterministic and seed dependent") {
    const ModelConfig c = small_config();
    CHECK(fingerprint(init_model_params<float>(c, 5)) == fingerprint(init_model_params<float>(c, 5)));
    CHECK(fingerprint(init_model_params<float>(c, 5)) != fingerprint(init_model_params<float>(c, 6)));
}

TEST_CASE("auxiliary tokens are distinct at initialization") {
    const auto params = init_model_params<float>(small_config(), 3);
    const auto& aux = params.get("aux_tokens");
    CHECK(aux.rows() == 3);
    bool distinct = false;
    for (Index c = 0; c < aux.cols(); ++c) distinct |= aux.at(0, c) != aux.at(1, c);
    CHECK(distinct);
}

TEST_CASE("with the mask on, the global token ignores the auxiliary tokens") {
    const ModelConfig c = small_config();
    auto params = init_model_params<float>(c, 4);
    const auto images = random_images(3, 16, 4);
    const auto before = forward(images, c, params);
    perturb(params.get("aux_tokens"), 12);
    const auto after = forward(images, c, params);
    CHECK(max_diff(before.global, after.global) == 0.0);
    CHECK(max_diff(before.patches, after.patches) == 0.0);
    CHECK(max_diff(before.enhanced, after.enhanced) > 0.0);
}

TEST_CASE("with the mask off, auxiliary tokens leak into the global token") {
    ModelConfig c = small_config();
    c.mask_auxiliary = false;
    auto params = init_model_params<float>(c, 4);
    const auto images = random_images(3, 16, 4);
    const auto before = forward(images, c, params);
    perturb(params.get("aux_tokens"), 12);
    CHECK(max_diff(before.global, forward(images, c, params).global) > 1e-4);
}

TEST_CASE("strip_auxiliary removes every auxiliary tensor and reports losslessness") {
    const ModelConfig c = small_config();
    const auto params = init_model_params<float>(c, 7);
    StripReport report;
    const auto [stripped, sc] = strip_auxiliary(params, c, &report);
    CHECK(sc.num_aux == 0);
    CHECK(sc.num_pooled == 0);
    CHECK(report.lossless);
    CHECK(report.removed_scalars == params.scalar_count() - stripped.scalar_count());
    for (const auto& [name, t] : stripped.entries()) {
        CHECK(name.rfind("aux_tokens", 0) != 0);
        CHECK(name.rfind("ten.", 0) != 0);
        CHECK(name.rfind("pool.", 0) != 0);
        CHECK(params.get(name).data().size() == t.data().size());
    }
    const auto images = random_images(2, 16, 8);
    CHECK(max_diff(forward(images, c, params).global, forward(images, sc, stripped).global) <= 1e-6);

    ModelConfig off = c;
    off.mask_auxiliary = false;
    StripReport off_report;
    strip_auxiliary(init_model_params<float>(off, 7), off, &off_report);
    CHECK_FALSE(off_report.lossless);
}

TEST_CASE("patchify normalizes and orders patch pixels row-major") {
    ModelConfig c = small_config();
    c.image_size = 8;
    Tensor<double> img({1, 8, 8, 3});
    for (Index i = 0; i < img.size(); ++i) img[i] = double(i % 7) / 7.0;
    const auto p = patchify(img, c);
    CHECK(p.shape() == Shape{4, 48});
    // Patch 1 is the top-right 4x4 block; its first pixel is image pixel (0, 4).
    CHECK(p.at(1, 0) == doctest::Approx((img[(0 * 8 + 4) * 3] - 0.5) / 0.25));
    CHECK(p.at(2, 3) == doctest::Approx((img[(4 * 8 + 1) * 3] - 0.5) / 0.25));
}

TEST_CASE("adaptive pooling with identity weights is the patch mean") {
    ModelConfig c = small_config();
    c.pool_kernel = 1;
    const Index d = c.embed_dim, n = c.num_patches(), batch = 2;
    PoolerBranch<double> br{Tensor<double>({d, d}), Tensor<double>({d}, 0.0), Tensor<double>({1, 1, d}, 1.0)};
    for (Index i = 0; i < d; ++i) br.pw_weight.at(i, i) = 1.0;
    AdaptivePooler<double> pooler{{br}, c.grid()};
    std::mt19937 rng(9);
    std::normal_distribution<double> g;
    Tensor<double> patches({batch * n, d});
    for (double& v : patches.data()) v = g(rng);
    // W = z_p, so T_p = mean(z_p * z_p).
    const auto out = adaptive_pool(patches, pooler, batch);
    for (Index b = 0; b < batch; ++b)
        for (Index ch = 0; ch < d; ++ch) {
            double s = 0;
            for (Index i = 0; i < n; ++i) s += patches.at(b * n + i, ch) * patches.at(b * n + i, ch);
            CHECK(out.at(b, ch) == doctest::Approx(s / n).epsilon(1e-12));
        }
}

TEST_CASE("pool kernel wider than the grid is clamped to an odd extent") {
    ModelConfig c = small_config();
    c.pool_kernel = 11;
    CHECK(c.effective_pool_kernel() == 3);
    c.image_size = 32;
    CHECK(c.effective_pool_kernel() == 7);
}

TEST_CASE("invalid configurations are rejected") {
    ModelConfig c = small_config();
    c.image_size = 18;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
}
