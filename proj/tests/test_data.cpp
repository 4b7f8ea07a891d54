#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mte/augment.hpp"
#include "mte/data.hpp"
#include "mte/errors.hpp"
#include "mte/eval.hpp"

using namespace mte;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mte_unit_tests";
    fs::create_directories(dir);
    return dir / name;
}

std::vector<std::uint8_t> random_bytes(Index n, unsigned seed) {
    std::mt19937 rng(seed);
    std::vector<std::uint8_t> v(n);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng() & 0xff);
    return v;
}

// Mean absolute difference between horizontally adjacent pixels: grows with the
// class grating frequency.
double edge_energy(const Dataset& d, Index i) {
    const float* img = d.image(i);
    double s = 0;
    for (Index y = 0; y < d.height; ++y)
        for (Index x = 0; x + 1 < d.width; ++x)
            for (Index c = 0; c < 3; ++c)
                s += std::abs(img[(y * d.width + x + 1) * 3 + c] - img[(y * d.width + x) * 3 + c]);
    return s / double(d.height * (d.width - 1) * 3);
}

}  // namespace

TEST_CASE("CIFAR records round-trip bit-exactly") {
    const auto path = scratch("roundtrip.bin").string();
    const std::vector<std::uint8_t> labels{4, 0, 9};
    const auto pixels = random_bytes(3 * 3072, 1);
    write_cifar_batch(path, labels, pixels);
    CHECK(fs::file_size(path) == 3 * kCifarRecordBytes);
    const Dataset d = load_cifar_batches({path}, {}, 0);
    REQUIRE(d.size() == 3);
    CHECK(d.height == 32);
    CHECK(d.channels == 3);
    for (Index r = 0; r < 3; ++r) {
        CHECK(d.labels[r] == labels[r]);
        CHECK(d.ids[r] == r);
        // Planar bytes -> HWC floats; b / 255 inverts exactly back to the byte.
        for (Index p = 0; p < 1024; ++p)
            for (Index c = 0; c < 3; ++c)
                CHECK(std::lround(d.image(r)[p * 3 + c] * 255.0f) == pixels[r * 3072 + c * 1024 + p]);
    }
}

TEST_CASE("byte normalization maps 0 to 0 and 255 to 1 exactly") {
    const auto path = scratch("extremes.bin").string();
    std::vector<std::uint8_t> pixels(3072, 0);
    pixels[1] = 255;
    write_cifar_batch(path, {1}, pixels);
    const Dataset d = load_cifar_batches({path}, {}, 0);
    CHECK(d.pixels[0] == 0.0f);
    CHECK(d.pixels[3] == 1.0f);
}

TEST_CASE("class filter and cap") {
    const auto path = scratch("filter.bin").string();
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 40; ++i) labels.push_back(static_cast<std::uint8_t>(i % 4));
    write_cifar_batch(path, labels, random_bytes(40 * 3072, 2));
    const Dataset d = load_cifar_batches({path}, {0, 1}, 5);
    CHECK(d.size() == 10);
    for (Index y : d.labels) CHECK(y <= 1);
    // Deterministic (file, offset) ordering.
    CHECK(d.ids == std::vector<Index>{0, 1, 4, 5, 8, 9, 12, 13, 16, 17});
}

TEST_CASE("malformed CIFAR files are format errors") {
    const auto short_path = scratch("short.bin").string();
    {
        std::ofstream out(short_path, std::ios::binary);
        out << std::string(3000, 'x');
    }
    try {
        load_cifar_batches({short_path}, {}, 0);
        FAIL("expected a format error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Format);
    }
    const auto label_path = scratch("label.bin").string();
    write_cifar_batch(label_path, {10}, std::vector<std::uint8_t>(3072, 0));
    CHECK_THROWS_AS(load_cifar_batches({label_path}, {}, 0), Error);
}

TEST_CASE("synthetic generator is deterministic, balanced and in range") {
    const Dataset a = gen_synthetic(3, 10, 32, 5), b = gen_synthetic(3, 10, 32, 5);
    CHECK(a.pixels == b.pixels);
    CHECK(a.pixels != gen_synthetic(3, 10, 32, 6).pixels);
    CHECK(a.size() == 30);
    for (Index c = 0; c < 3; ++c) CHECK(std::count(a.labels.begin(), a.labels.end(), c) == 10);
    for (float v : a.pixels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK_THROWS_AS(gen_synthetic(1, 10, 32, 5), Error);
}

TEST_CASE("synthetic classes are separated in edge energy (effect size > 1)") {
    const Dataset d = gen_synthetic(3, 100, 64, 11);
    std::vector<std::vector<double>> by_class(3);
    for (Index i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(edge_energy(d, i));
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    auto var = [&](const std::vector<double>& v) {
        const double m = mean(v);
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return s / (v.size() - 1);
    };
    for (Index a = 0; a < 3; ++a)
        for (Index b = a + 1; b < 3; ++b) {
            const double pooled = std::sqrt(0.5 * (var(by_class[a]) + var(by_class[b])));
            const double effect = std::abs(mean(by_class[a]) - mean(by_class[b])) / pooled;
            INFO("classes " << a << " vs " << b);
            CHECK(effect > 1.0);
        }
}

TEST_CASE("raw-pixel k-NN on the synthetic set is learnable but not trivial") {
    const Split s = synthetic_split(3, 200, 50, 64, 0);
    auto raw = [](const Dataset& d) {
        FeatureMatrix m;
        m.rows = d.size();
        m.cols = d.image_size();
        m.values.assign(d.pixels.begin(), d.pixels.end());
        m.labels = d.labels;
        return m;
    };
    const double acc = knn_classify(raw(s.train), raw(s.test));
    CHECK(acc >= 0.6);
    CHECK(acc < 0.95);
}

TEST_CASE("augmented views are deterministic per seed and stay in range") {
    const Dataset d = gen_synthetic(2, 2, 64, 1);
    AugmentConfig cfg;
    std::vector<float> a(32 * 32 * 3), b(a.size()), c(a.size());
    make_view(d.image(0), 64, 64, 3, 32, cfg, 42, a.data());
    make_view(d.image(0), 64, 64, 3, 32, cfg, 42, b.data());
    make_view(d.image(0), 64, 64, 3, 32, cfg, 43, c.data());
    CHECK(a == b);
    CHECK(a != c);
    for (float v : a) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    std::vector<float> big(128 * 128 * 3);
    CHECK_THROWS_AS(make_view(d.image(0), 64, 64, 3, 128, cfg, 1, big.data()), Error);
}

TEST_CASE("exported weight maps equal the internal adaptive weights") {
    ModelConfig mc;
    mc.embed_dim = 8;
    mc.depth = 1;
    mc.heads = 2;
    mc.patch_size = 4;
    mc.image_size = 16;
    mc.num_aux = 1;
    mc.num_pooled = 3;
    mc.pool_kernel = 3;
    const auto params = init_model_params<float>(mc, 3);
    const Dataset d = gen_synthetic(2, 1, 16, 2);
    const Tensor<float> images = eval_batch(d, {0, 1}, 16);
    const auto dir = scratch("weights").string();
    fs::remove_all(dir);
    const auto files = export_weight_maps(params, mc, images, {0, 5}, dir);
    CHECK(files.size() == 2 * 3);  // K files per image

    NoGradScope<float> ng;
    const auto bundle = forward(images, mc, params);
    const auto pooler = AdaptivePooler<float>::view(params, mc);
    for (Index branch = 0; branch < 3; ++branch) {
        const auto w = adaptive_weights(bundle.patches, pooler.branches[branch], 4, 2);
        for (Index img = 0; img < 2; ++img) {
            std::ifstream in(fs::path(dir) / ("image" + std::to_string(img) + "_branch" + std::to_string(branch) + ".csv"));
            std::string line;
            for (Index c : {0, 5}) {
                std::getline(in, line);
                CHECK(line == "# weight_map channel " + std::to_string(c));
                for (Index y = 0; y < 4; ++y) {
                    std::getline(in, line);
                    std::stringstream ss(line);
                    std::string cell;
                    Index x = 0;
                    for (; std::getline(ss, cell, ','); ++x)
                        CHECK(std::stof(cell) == w[((img * 4 + y) * 4 + x) * 8 + c]);
                    CHECK(x == 4);  // sqrt(N) x sqrt(N) grid
                }
                std::getline(in, line);
                CHECK(line == "# kernel channel " + std::to_string(c));
                for (Index y = 0; y < 3; ++y) std::getline(in, line);
            }
        }
    }
    mc.num_pooled = 0;
    CHECK_THROWS_AS(export_weight_maps(init_model_params<float>(mc, 3), mc, images, {0}, dir), Error);
}
