#include "mte/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>

namespace mte {

Index Dataset::num_classes() const {
    Index n = 0;
    for (Index y : labels) n = std::max(n, y + 1);
    return n;
}

Dataset load_cifar_batches(const std::vector<std::string>& paths, const std::vector<Index>& class_filter,
                           Index per_class_cap) {
    Dataset out;
    out.height = out.width = 32;
    out.channels = 3;
    std::map<Index, Index> taken;
    Index id = 0;
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary);
        require(in.good(), ErrorKind::Data, "cannot open CIFAR batch '" + path + "'");
        std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        require(buf.size() % kCifarRecordBytes == 0, ErrorKind::Format,
                "CIFAR batch '" + path + "' has " + std::to_string(buf.size()) +
                    " bytes, not a multiple of " + std::to_string(kCifarRecordBytes));
        const Index records = buf.size() / kCifarRecordBytes;
        for (Index r = 0; r < records; ++r, ++id) {
            const std::uint8_t* rec = buf.data() + r * kCifarRecordBytes;
            const Index label = rec[0];
            require(label <= 9, ErrorKind::Format,
                    "CIFAR batch '" + path + "' record " + std::to_string(r) + " has label byte " +
                        std::to_string(label));
            if (!class_filter.empty() &&
                std::find(class_filter.begin(), class_filter.end(), label) == class_filter.end())
                continue;
            if (per_class_cap > 0 && taken[label] >= per_class_cap) continue;
            ++taken[label];
            for (Index p = 0; p < 1024; ++p)
                for (Index c = 0; c < 3; ++c) out.pixels.push_back(static_cast<float>(rec[1 + c * 1024 + p]) / 255.0f);
            out.labels.push_back(label);
            out.ids.push_back(id);
        }
    }
    return out;
}

void write_cifar_batch(const std::string& path, const std::vector<std::uint8_t>& labels,
                       const std::vector<std::uint8_t>& planar_pixels) {
    require(planar_pixels.size() == labels.size() * 3072, ErrorKind::Dimension,
            "write_cifar_batch: pixel bytes do not match label count");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Data, "cannot write '" + path + "'");
    for (Index r = 0; r < labels.size(); ++r) {
        out.put(static_cast<char>(labels[r]));
        out.write(reinterpret_cast<const char*>(planar_pixels.data() + r * 3072), 3072);
    }
}

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double x = h * 6.0;
    const int sector = static_cast<int>(x) % 6;
    const double f = x - std::floor(x);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

// Signed inside test for the class shape in its own rotated unit frame.
bool inside_shape(Index kind, double u, double v) {
    switch (kind % 4) {
        case 0: return u * u + v * v <= 1.0;
        case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
        case 2: return v >= -0.5 && v <= 1.0 && std::abs(u) <= (1.0 - v) * 0.75;
        default: {
            const double r = std::sqrt(u * u + v * v);
            return r <= 1.0 && r >= 0.6;
        }
    }
}

void render_synthetic(Index cls, Index classes, Index size, std::uint64_t seed, float* out) {
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    std::normal_distribution<double> noise(0.0, 0.06);

    // Hue only loosely tracks the class so raw pixels do not saturate k-NN.
    const double bg_hue = static_cast<double>(cls) / static_cast<double>(classes) + uni(-0.3, 0.3);
    const Rgb bg = hsv(bg_hue, uni(0.2, 0.7), uni(0.3, 0.8));
    // Geometric spacing keeps class frequencies apart under random-resized-crop
    // rescaling (up to 1/sqrt(crop_scale_min)).
    const double ratio = std::pow(6.0, 1.0 / static_cast<double>(classes - 1));
    const double freq = 2.0 * std::pow(ratio, static_cast<double>(cls)) * uni(0.92, 1.08);
    const double theta = uni(-0.3, 0.3);
    const double phase = uni(0.0, 2.0 * std::numbers::pi);
    // The shape is a lighter or darker tint of the background, so colour carries no
    // more instance identity than the background already does.
    const double tint = unit(rng) < 0.5 ? uni(-0.35, -0.2) : uni(0.2, 0.35);
    const Rgb fg{bg.r + tint, bg.g + tint, bg.b + tint};
    const double s = static_cast<double>(size);
    const double cx = uni(0.3, 0.7) * s, cy = uni(0.3, 0.7) * s;
    const double radius = uni(0.15, 0.28) * s;
    const double rot = uni(0.0, 2.0 * std::numbers::pi);
    const double cr = std::cos(rot), sr = std::sin(rot);
    const double ct = std::cos(theta), st = std::sin(theta);

    for (Index y = 0; y < size; ++y)
        for (Index x = 0; x < size; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            const double wave = 0.2 * std::sin(2.0 * std::numbers::pi * freq * (px * ct + py * st) / s + phase);
            const double dx = (px - cx) / radius, dy = (py - cy) / radius;
            const bool in = inside_shape(cls, dx * cr + dy * sr, -dx * sr + dy * cr);
            const Rgb c = in ? fg : Rgb{bg.r + wave, bg.g + wave, bg.b + wave};
            float* dst = out + (y * size + x) * 3;
            dst[0] = static_cast<float>(std::clamp(c.r + noise(rng), 0.0, 1.0));
            dst[1] = static_cast<float>(std::clamp(c.g + noise(rng), 0.0, 1.0));
            dst[2] = static_cast<float>(std::clamp(c.b + noise(rng), 0.0, 1.0));
        }
}

}  // namespace

Dataset gen_synthetic(Index classes, Index per_class, Index image_size, std::uint64_t seed) {
    require(classes >= 2, ErrorKind::Parameter, "gen_synthetic needs at least 2 classes");
    require(image_size >= 8, ErrorKind::Parameter, "gen_synthetic image_size must be at least 8");
    Dataset out;
    out.height = out.width = image_size;
    out.channels = 3;
    const Index n = classes * per_class;
    out.pixels.resize(n * out.image_size());
    // Interleave classes so any prefix of the dataset is balanced.
    for (Index i = 0; i < n; ++i) {
        const Index cls = i % classes;
        render_synthetic(cls, classes, image_size, derive_seed(seed, i), out.pixels.data() + i * out.image_size());
        out.labels.push_back(cls);
        out.ids.push_back(i);
    }
    return out;
}

Split synthetic_split(Index classes, Index train_per_class, Index test_per_class, Index image_size,
                      std::uint64_t seed) {
    return {gen_synthetic(classes, train_per_class, image_size, derive_seed(seed, 0x7261696e)),
            gen_synthetic(classes, test_per_class, image_size, derive_seed(seed, 0x74657374))};
}

Split load_cifar_split(const std::string& dir, const std::vector<Index>& class_filter, Index per_class_cap) {
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back((std::filesystem::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string());
    return {load_cifar_batches(train_files, class_filter, per_class_cap),
            load_cifar_batches({(std::filesystem::path(dir) / "test_batch.bin").string()}, class_filter, 0)};
}

Split load_split(const DataConfig& config) {
    if (config.dataset == "synthetic")
        return synthetic_split(config.synthetic_classes, config.train_per_class, config.test_per_class,
                               config.synthetic_size, config.seed);
    if (config.dataset == "cifar") {
        require(!config.cifar_dir.empty(), ErrorKind::Configuration, "dataset = cifar needs cifar_dir");
        return load_cifar_split(config.cifar_dir, config.class_filter, config.per_class_cap);
    }
    fail(ErrorKind::Configuration, "unknown dataset '" + config.dataset + "' (expected synthetic or cifar)");
}

std::vector<std::string> export_weight_maps(const ParameterSet<float>& params, const ModelConfig& config,
                                            const Tensor<float>& images, const std::vector<Index>& channels,
                                            const std::string& out_dir) {
    require(config.num_pooled > 0 && params.contains("pool.0.dw.kernel"), ErrorKind::Usage,
            "export_weight_maps needs an unstripped checkpoint with adaptive pooling");
    for (Index c : channels)
        require(c < config.embed_dim, ErrorKind::Parameter,
                "channel " + std::to_string(c) + " out of range for embed_dim " + std::to_string(config.embed_dim));
    NoGradScope<float> no_grad;
    const Index batch = images.dim(0), g = config.grid(), d = config.embed_dim;
    const TokenBundle<float> bundle = forward(images, config, params);
    const AdaptivePooler<float> pooler = AdaptivePooler<float>::view(params, config);
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;
    for (Index i = 0; i < pooler.branches.size(); ++i) {
        const Tensor<float> w = adaptive_weights(bundle.patches, pooler.branches[i], g, batch);
        const Tensor<float>& kernel = pooler.branches[i].dw_kernel;
        const Index k = kernel.dim(0);
        for (Index b = 0; b < batch; ++b) {
            const std::string path = (std::filesystem::path(out_dir) /
                                      ("image" + std::to_string(b) + "_branch" + std::to_string(i) + ".csv"))
                                         .string();
            std::ofstream out(path);
            require(out.good(), ErrorKind::Data, "cannot write '" + path + "'");
            out.precision(9);
            for (Index c : channels) {
                out << "# weight_map channel " << c << "\n";
                for (Index y = 0; y < g; ++y)
                    for (Index x = 0; x < g; ++x)
                        out << w[((b * g + y) * g + x) * d + c] << (x + 1 == g ? "\n" : ",");
                out << "# kernel channel " << c << "\n";
                for (Index y = 0; y < k; ++y)
                    for (Index x = 0; x < k; ++x) out << kernel[(y * k + x) * d + c] << (x + 1 == k ? "\n" : ",");
            }
            written.push_back(path);
        }
    }
    return written;
}

}  // namespace mte
