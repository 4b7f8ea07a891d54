#include "mte/augment.hpp"

#include <algorithm>
#include <cmath>

namespace mte {

namespace {

// Bilinear sample of the crop [x0, x0+w) x [y0, y0+h) onto an out x out grid.
void resize_crop(const float* image, Index height, Index width, Index channels, double x0, double y0, double w,
                 double h, Index out, bool flip, float* dst) {
    for (Index oy = 0; oy < out; ++oy)
        for (Index ox = 0; ox < out; ++ox) {
            const Index sx_index = flip ? out - 1 - ox : ox;
            const double sy = y0 + (static_cast<double>(oy) + 0.5) * h / static_cast<double>(out) - 0.5;
            const double sx = x0 + (static_cast<double>(sx_index) + 0.5) * w / static_cast<double>(out) - 0.5;
            const double fy = std::clamp(sy, 0.0, static_cast<double>(height - 1));
            const double fx = std::clamp(sx, 0.0, static_cast<double>(width - 1));
            const auto y_lo = static_cast<Index>(fy), x_lo = static_cast<Index>(fx);
            const Index y_hi = std::min(y_lo + 1, height - 1), x_hi = std::min(x_lo + 1, width - 1);
            const double ty = fy - static_cast<double>(y_lo), tx = fx - static_cast<double>(x_lo);
            for (Index c = 0; c < channels; ++c) {
                auto at = [&](Index y, Index x) { return static_cast<double>(image[(y * width + x) * channels + c]); };
                const double top = at(y_lo, x_lo) * (1 - tx) + at(y_lo, x_hi) * tx;
                const double bottom = at(y_hi, x_lo) * (1 - tx) + at(y_hi, x_hi) * tx;
                dst[(oy * out + ox) * channels + c] = static_cast<float>(top * (1 - ty) + bottom * ty);
            }
        }
}

double luma(const float* px, Index channels) {
    if (channels < 3) return px[0];
    return 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
}

}  // namespace

ViewParams make_view(const float* image, Index height, Index width, Index channels, Index out_size,
                     const AugmentConfig& config, std::uint64_t seed, float* out) {
    require(height >= out_size && width >= out_size, ErrorKind::Data,
            "image " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than the view size " +
                std::to_string(out_size));
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    ViewParams p;

    const double area = static_cast<double>(height * width);
    const double hd = static_cast<double>(height), wd = static_cast<double>(width);
    // Up to 10 attempts at a crop with the drawn scale and aspect ratio; fall back to the full image.
    p.crop_w = wd;
    p.crop_h = hd;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * uni(config.crop_scale_min, config.crop_scale_max);
        const double ratio = std::exp(uni(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
        const double w = std::sqrt(target * ratio), h = std::sqrt(target / ratio);
        if (w <= wd && h <= hd) {
            p.crop_w = w;
            p.crop_h = h;
            break;
        }
    }
    p.crop_x = uni(0.0, wd - p.crop_w);
    p.crop_y = uni(0.0, hd - p.crop_h);
    p.flipped = unit(rng) < config.flip_p;
    p.brightness = uni(1 - config.brightness, 1 + config.brightness);
    p.contrast = uni(1 - config.contrast, 1 + config.contrast);
    p.saturation = uni(1 - config.saturation, 1 + config.saturation);
    p.grayscale = unit(rng) < config.grayscale_p;

    resize_crop(image, height, width, channels, p.crop_x, p.crop_y, p.crop_w, p.crop_h, out_size, p.flipped, out);
    const Index pixels = out_size * out_size;
    for (Index i = 0; i < pixels * channels; ++i)
        out[i] = static_cast<float>(std::clamp(out[i] * p.brightness, 0.0, 1.0));
    double mean_luma = 0;
    for (Index i = 0; i < pixels; ++i) mean_luma += luma(out + i * channels, channels);
    mean_luma /= static_cast<double>(pixels);
    for (Index i = 0; i < pixels * channels; ++i)
        out[i] = static_cast<float>(std::clamp(mean_luma + (out[i] - mean_luma) * p.contrast, 0.0, 1.0));
    for (Index i = 0; i < pixels; ++i) {
        float* px = out + i * channels;
        const double l = luma(px, channels);
        const double s = p.grayscale ? 0.0 : p.saturation;
        for (Index c = 0; c < channels; ++c) px[c] = static_cast<float>(std::clamp(l + (px[c] - l) * s, 0.0, 1.0));
    }
    return p;
}

std::array<std::vector<float>, 2> make_views(const Dataset& data, Index index, Index epoch, Index out_size,
                                             const AugmentConfig& config, std::uint64_t seed) {
    std::array<std::vector<float>, 2> views;
    for (Index v = 0; v < 2; ++v) {
        views[v].resize(out_size * out_size * data.channels);
        make_view(data.image(index), data.height, data.width, data.channels, out_size, config,
                  derive_seed(seed, data.ids[index], epoch, v), views[v].data());
    }
    return views;
}

Tensor<float> view_batch(const Dataset& data, const std::vector<Index>& rows, Index epoch, Index view,
                         Index out_size, const AugmentConfig& config, std::uint64_t seed) {
    const Index per = out_size * out_size * data.channels;
    Tensor<float> out(Shape{rows.size(), out_size, out_size, data.channels});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows.size()); ++i) {
        const Index r = rows[i];
        make_view(data.image(r), data.height, data.width, data.channels, out_size, config,
                  derive_seed(seed, data.ids[r], epoch, view), out.ptr() + i * per);
    }
    return out;
}

Tensor<float> eval_batch(const Dataset& data, const std::vector<Index>& rows, Index out_size) {
    const Index per = out_size * out_size * data.channels;
    Tensor<float> out(Shape{rows.size(), out_size, out_size, data.channels});
    for (Index i = 0; i < rows.size(); ++i) {
        const Index r = rows[i];
        if (data.height == out_size && data.width == out_size) {
            std::copy(data.image(r), data.image(r) + per, out.ptr() + i * per);
        } else {
            resize_crop(data.image(r), data.height, data.width, data.channels, 0.0, 0.0,
                        static_cast<double>(data.width), static_cast<double>(data.height), out_size, false,
                        out.ptr() + i * per);
        }
    }
    return out;
}

}  // namespace mte
