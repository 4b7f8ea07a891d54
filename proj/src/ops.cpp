#include "mte/ops.hpp"

#include <cmath>
#include <initializer_list>
#include <sstream>

namespace mte {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (Index i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Index shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (active_tape<T>() == nullptr) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& out,
            std::function<void()> backward) {
    out.set_requires_grad(true);
    active_tape<T>()->record(op, std::move(inputs), out, std::move(backward));
}

void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    require(a == b, ErrorKind::Dimension,
            std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

struct AxisSplit {
    Index outer = 1;
    Index length = 1;
    Index inner = 1;
};

AxisSplit split_axis(const Shape& shape, Index axis) {
    require(axis < shape.size(), ErrorKind::Dimension,
            "axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
    AxisSplit s;
    for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
    s.length = shape[axis];
    for (Index i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorKind::Dimension,
            "matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out(Shape{m, n});
    kernels::gemm(m, k, n, a.ptr(), b.ptr(), out.ptr(), false);
    if (should_record<T>({&a, &b})) {
        record<T>("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                std::vector<T> bt(n * k);
                kernels::transpose(k, n, b.ptr(), bt.data());
                kernels::gemm(m, n, k, g, bt.data(), a.grad_buffer().data(), true);
            }
            if (b.requires_grad()) {
                std::vector<T> at(k * m);
                kernels::transpose(m, k, a.ptr(), at.data());
                kernels::gemm(k, m, n, at.data(), g, b.grad_buffer().data(), true);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require(a.rank() == 2, ErrorKind::Dimension, "transpose: expected matrix, got " + shape_string(a.shape()));
    const Index r = a.dim(0), c = a.dim(1);
    Tensor<T> out(Shape{c, r});
    kernels::transpose(r, c, a.ptr(), out.ptr());
    if (should_record<T>({&a})) {
        record<T>("transpose", {a}, out, [a, out, r, c]() mutable {
            std::vector<T> back(r * c);
            kernels::transpose(c, r, out.grad().data(), back.data());
            auto da = a.grad_buffer();
            for (Index i = 0; i < back.size(); ++i) da[i] += back[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    for (Index i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    if (should_record<T>({&a, &b})) {
        record<T>("add", {a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto da = a.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (b.requires_grad()) {
                auto db = b.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) db[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    for (Index i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    if (should_record<T>({&a, &b})) {
        record<T>("sub", {a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto da = a.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (b.requires_grad()) {
                auto db = b.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) db[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (Index i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    if (should_record<T>({&a, &b})) {
        record<T>("mul", {a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto da = a.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                auto db = b.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require(bias.rank() == 1 && x.rank() >= 1 && x.cols() == bias.size(), ErrorKind::Dimension,
            "add_bias: bias " + shape_string(bias.shape()) + " does not match trailing extent of " +
                shape_string(x.shape()));
    const Index rows = x.rows(), cols = x.cols();
    Tensor<T> out(x.shape());
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
    if (should_record<T>({&x, &bias})) {
        record<T>("add_bias", {x, bias}, out, [x, bias, out, rows, cols]() mutable {
            auto g = out.grad();
            if (x.requires_grad()) {
                auto dx = x.grad_buffer();
                for (Index i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto db = bias.grad_buffer();
                for (Index r = 0; r < rows; ++r)
                    for (Index c = 0; c < cols; ++c) db[c] += g[r * cols + c];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out(x.shape());
    for (Index i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    if (should_record<T>({&x})) {
        record<T>("scale", {x}, out, [x, out, factor]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = 0;
    for (T v : x.data()) total += v;
    Tensor<T> out = Tensor<T>::scalar(total);
    if (should_record<T>({&x})) {
        record<T>("sum", {x}, out, [x, out]() mutable {
            const T g = out.grad()[0];
            for (T& d : x.grad_buffer()) d += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    require(x.size() > 0, ErrorKind::Dimension, "mean of empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, Index axis, T temperature) {
    require(temperature > T(0), ErrorKind::Parameter,
            "softmax: temperature must be positive, got " + std::to_string(temperature));
    const AxisSplit s = split_axis(x.shape(), axis);
    const T inv_t = T(1) / temperature;
    Tensor<T> out(x.shape());
    if (s.inner == 1) {
        kernels::softmax_rows(s.outer, s.length, x.ptr(), out.ptr(), inv_t);
    } else {
        for (Index o = 0; o < s.outer; ++o)
            for (Index in = 0; in < s.inner; ++in) {
                const Index base = o * s.length * s.inner + in;
                T peak = -std::numeric_limits<T>::infinity();
                for (Index l = 0; l < s.length; ++l) peak = std::max(peak, x[base + l * s.inner] * inv_t);
                T total = 0;
                for (Index l = 0; l < s.length; ++l) {
                    out[base + l * s.inner] = std::exp(x[base + l * s.inner] * inv_t - peak);
                    total += out[base + l * s.inner];
                }
                for (Index l = 0; l < s.length; ++l) out[base + l * s.inner] /= total;
            }
    }
    if (should_record<T>({&x})) {
        record<T>("softmax", {x}, out, [x, out, s, inv_t]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index o = 0; o < s.outer; ++o)
                for (Index in = 0; in < s.inner; ++in) {
                    const Index base = o * s.length * s.inner + in;
                    T dot = 0;
                    for (Index l = 0; l < s.length; ++l) dot += g[base + l * s.inner] * out[base + l * s.inner];
                    for (Index l = 0; l < s.length; ++l) {
                        const Index i = base + l * s.inner;
                        dx[i] += out[i] * (g[i] - dot) * inv_t;
                    }
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax_axis(const Tensor<T>& x, Index axis, T temperature) {
    require(temperature > T(0), ErrorKind::Parameter,
            "log_softmax: temperature must be positive, got " + std::to_string(temperature));
    const AxisSplit s = split_axis(x.shape(), axis);
    const T inv_t = T(1) / temperature;
    Tensor<T> out(x.shape());
    if (s.inner == 1) {
        kernels::log_softmax_rows(s.outer, s.length, x.ptr(), out.ptr(), inv_t);
    } else {
        for (Index o = 0; o < s.outer; ++o)
            for (Index in = 0; in < s.inner; ++in) {
                const Index base = o * s.length * s.inner + in;
                T peak = -std::numeric_limits<T>::infinity();
                for (Index l = 0; l < s.length; ++l) peak = std::max(peak, x[base + l * s.inner] * inv_t);
                T total = 0;
                for (Index l = 0; l < s.length; ++l) total += std::exp(x[base + l * s.inner] * inv_t - peak);
                const T lse = std::log(total) + peak;
                for (Index l = 0; l < s.length; ++l)
                    out[base + l * s.inner] = x[base + l * s.inner] * inv_t - lse;
            }
    }
    if (should_record<T>({&x})) {
        record<T>("log_softmax", {x}, out, [x, out, s, inv_t]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index o = 0; o < s.outer; ++o)
                for (Index in = 0; in < s.inner; ++in) {
                    const Index base = o * s.length * s.inner + in;
                    T gsum = 0;
                    for (Index l = 0; l < s.length; ++l) gsum += g[base + l * s.inner];
                    for (Index l = 0; l < s.length; ++l) {
                        const Index i = base + l * s.inner;
                        dx[i] += (g[i] - std::exp(out[i]) * gsum) * inv_t;
                    }
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require(eps > T(0), ErrorKind::Parameter, "layer_norm: eps must be positive");
    require(x.rank() >= 1 && gamma.rank() == 1 && beta.rank() == 1 && x.cols() == gamma.size() &&
                gamma.size() == beta.size(),
            ErrorKind::Dimension,
            "layer_norm: input " + shape_string(x.shape()) + " with gamma " +
                shape_string(gamma.shape()) + " and beta " + shape_string(beta.shape()));
    const Index rows = x.rows(), cols = x.cols();
    Tensor<T> out(x.shape());
    Tensor<T> mu(Shape{rows});
    Tensor<T> rstd(Shape{rows});
    kernels::layer_norm_rows(rows, cols, x.ptr(), gamma.ptr(), beta.ptr(), eps, out.ptr(), mu.ptr(), rstd.ptr());
    if (should_record<T>({&x, &gamma, &beta})) {
        record<T>("layer_norm", {x, gamma, beta}, out, [x, gamma, beta, out, mu, rstd, rows, cols]() mutable {
            kernels::layer_norm_rows_backward(
                rows, cols, x.ptr(), gamma.ptr(), mu.ptr(), rstd.ptr(), out.grad().data(),
                x.requires_grad() ? x.grad_buffer().data() : nullptr,
                gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr,
                beta.requires_grad() ? beta.grad_buffer().data() : nullptr);
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    kernels::gelu(x.size(), x.ptr(), out.ptr());
    if (should_record<T>({&x})) {
        record<T>("gelu", {x}, out, [x, out]() mutable {
            kernels::gelu_backward(x.size(), x.ptr(), out.grad().data(), x.grad_buffer().data());
        });
    }
    return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel) {
    require(x.rank() == 3 || x.rank() == 4, ErrorKind::Dimension,
            "depthwise_conv2d: expected [H,W,D] or [B,H,W,D], got " + shape_string(x.shape()));
    require(kernel.rank() == 3 && kernel.dim(0) == kernel.dim(1), ErrorKind::Dimension,
            "depthwise_conv2d: kernel must be [k,k,D], got " + shape_string(kernel.shape()));
    const Index k = kernel.dim(0);
    require(k % 2 == 1, ErrorKind::Parameter,
            "depthwise_conv2d: kernel extent must be odd, got " + std::to_string(k));
    const Index batch = x.rank() == 4 ? x.dim(0) : 1;
    const Index off = x.rank() == 4 ? 1 : 0;
    const Index h = x.dim(off), w = x.dim(off + 1), d = x.dim(off + 2);
    require(kernel.dim(2) == d, ErrorKind::Dimension,
            "depthwise_conv2d: kernel " + shape_string(kernel.shape()) + " vs input " + shape_string(x.shape()));
    Tensor<T> out(x.shape());
    kernels::depthwise_conv2d(batch, h, w, d, k, x.ptr(), kernel.ptr(), out.ptr());
    if (should_record<T>({&x, &kernel})) {
        record<T>("depthwise_conv2d", {x, kernel}, out, [x, kernel, out, batch, h, w, d, k]() mutable {
            kernels::depthwise_conv2d_backward(
                batch, h, w, d, k, x.ptr(), kernel.ptr(), out.grad().data(),
                x.requires_grad() ? x.grad_buffer().data() : nullptr,
                kernel.requires_grad() ? kernel.grad_buffer().data() : nullptr);
        });
    }
    return out;
}

template <typename T>
Tensor<T> pointwise_conv1x1(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require(x.rank() >= 1 && weight.rank() == 2 && weight.dim(0) == x.cols() && bias.rank() == 1 &&
                bias.size() == weight.dim(1),
            ErrorKind::Dimension,
            "pointwise_conv1x1: input " + shape_string(x.shape()) + ", weight " +
                shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()));
    Shape out_shape = x.shape();
    out_shape.back() = weight.dim(1);
    const Tensor<T> flat = reshape(x, Shape{x.rows(), x.cols()});
    return reshape(add_bias(matmul(flat, weight), bias), out_shape);
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
    return Tensor<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(shape_numel(shape) == x.size(), ErrorKind::Dimension,
            "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
    if (should_record<T>({&x})) {
        record<T>("reshape", {x}, out, [x, out]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index i = 0; i < g.size(); ++i) dx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<Index>& rows) {
    const Index cols = x.cols();
    const Index available = x.rows();
    Tensor<T> out(Shape{rows.size(), cols});
    for (Index i = 0; i < rows.size(); ++i) {
        require(rows[i] < available, ErrorKind::Dimension,
                "gather_rows: row " + std::to_string(rows[i]) + " out of range for " + shape_string(x.shape()));
        std::copy_n(x.ptr() + rows[i] * cols, cols, out.ptr() + i * cols);
    }
    if (should_record<T>({&x})) {
        record<T>("gather_rows", {x}, out, [x, out, rows, cols]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index i = 0; i < rows.size(); ++i)
                for (Index c = 0; c < cols; ++c) dx[rows[i] * cols + c] += g[i * cols + c];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), ErrorKind::Dimension, "concat_rows: nothing to concatenate");
    const Index cols = parts.front().cols();
    Index total = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        require(p.cols() == cols, ErrorKind::Dimension,
                "concat_rows: trailing extent mismatch " + shape_string(p.shape()) + " vs " +
                    shape_string(parts.front().shape()));
        total += p.rows();
        any_grad = any_grad || p.requires_grad();
    }
    Tensor<T> out(Shape{total, cols});
    Index offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.ptr() + offset);
        offset += p.size();
    }
    if (active_tape<T>() != nullptr && any_grad) {
        record<T>("concat_rows", parts, out, [parts, out]() mutable {
            auto g = out.grad();
            Index at = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    auto dp = p.grad_buffer();
                    for (Index i = 0; i < dp.size(); ++i) dp[i] += g[at + i];
                }
                at += p.size();
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> segment_mean_rows(const Tensor<T>& x, Index groups) {
    require(groups > 0 && x.rows() % groups == 0, ErrorKind::Dimension,
            "segment_mean_rows: " + shape_string(x.shape()) + " not divisible into " +
                std::to_string(groups) + " groups");
    const Index n = x.rows() / groups, cols = x.cols();
    const T inv = T(1) / static_cast<T>(n);
    Tensor<T> out(Shape{groups, cols});
    for (Index g = 0; g < groups; ++g)
        for (Index r = 0; r < n; ++r)
            for (Index c = 0; c < cols; ++c) out[g * cols + c] += x[(g * n + r) * cols + c];
    for (T& v : out.data()) v *= inv;
    if (should_record<T>({&x})) {
        record<T>("segment_mean_rows", {x}, out, [x, out, groups, n, cols, inv]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index gi = 0; gi < groups; ++gi)
                for (Index r = 0; r < n; ++r)
                    for (Index c = 0; c < cols; ++c) dx[(gi * n + r) * cols + c] += g[gi * cols + c] * inv;
        });
    }
    return out;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
    const Index rows = x.rows(), cols = x.cols();
    Tensor<T> out(x.shape());
    Tensor<T> norms(Shape{rows});
    for (Index r = 0; r < rows; ++r) {
        T sq = 0;
        for (Index c = 0; c < cols; ++c) sq += x[r * cols + c] * x[r * cols + c];
        norms[r] = std::max(std::sqrt(sq), eps);
        for (Index c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / norms[r];
    }
    if (should_record<T>({&x})) {
        record<T>("l2_normalize_rows", {x}, out, [x, out, norms, rows, cols, eps]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index r = 0; r < rows; ++r) {
                if (norms[r] <= eps) {
                    for (Index c = 0; c < cols; ++c) dx[r * cols + c] += g[r * cols + c] / eps;
                    continue;
                }
                T dot = 0;
                for (Index c = 0; c < cols; ++c) dot += out[r * cols + c] * g[r * cols + c];
                for (Index c = 0; c < cols; ++c)
                    dx[r * cols + c] += (g[r * cols + c] - out[r * cols + c] * dot) / norms[r];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> pick_cols(const Tensor<T>& x, const std::vector<Index>& cols) {
    const Index rows = x.rows(), width = x.cols();
    require(cols.size() == rows, ErrorKind::Dimension,
            "pick_cols: " + std::to_string(cols.size()) + " indices for " + shape_string(x.shape()));
    Tensor<T> out(Shape{rows});
    for (Index r = 0; r < rows; ++r) {
        require(cols[r] < width, ErrorKind::Parameter,
                "pick_cols: column " + std::to_string(cols[r]) + " out of range " + std::to_string(width));
        out[r] = x[r * width + cols[r]];
    }
    if (should_record<T>({&x})) {
        record<T>("pick_cols", {x}, out, [x, out, cols, width]() mutable {
            auto g = out.grad();
            auto dx = x.grad_buffer();
            for (Index r = 0; r < cols.size(); ++r) dx[r * width + cols[r]] += g[r];
        });
    }
    return out;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const kernels::AttentionShape& s, const std::vector<unsigned char>* allowed,
                    Tensor<T>* probs_out) {
    require(s.heads > 0 && s.dim % s.heads == 0, ErrorKind::Configuration,
            "attention: dim " + std::to_string(s.dim) + " not divisible by " + std::to_string(s.heads) + " heads");
    const Shape qs{s.batch * s.q_tokens, s.dim};
    const Shape ks{s.batch * s.kv_tokens, s.dim};
    check_same_shape(q.shape(), qs, "attention(q)");
    check_same_shape(k.shape(), ks, "attention(k)");
    check_same_shape(v.shape(), ks, "attention(v)");
    if (allowed != nullptr)
        require(allowed->size() == s.q_tokens * s.kv_tokens, ErrorKind::Dimension,
                "attention: mask has " + std::to_string(allowed->size()) + " entries, expected " +
                    std::to_string(s.q_tokens * s.kv_tokens));
    Tensor<T> probs(Shape{s.batch, s.heads, s.q_tokens, s.kv_tokens});
    Tensor<T> out(qs);
    kernels::attention(s, q.ptr(), k.ptr(), v.ptr(), allowed ? allowed->data() : nullptr, probs.ptr(), out.ptr());
    if (probs_out != nullptr) *probs_out = probs;
    if (should_record<T>({&q, &k, &v})) {
        record<T>("attention", {q, k, v}, out, [q, k, v, out, probs, s]() mutable {
            std::vector<T> dq(q.size()), dk(k.size()), dv(v.size());
            kernels::attention_backward(s, q.ptr(), k.ptr(), v.ptr(), probs.ptr(), out.grad().data(),
                                        dq.data(), dk.data(), dv.data());
            auto add_into = [](const Tensor<T>& t, const std::vector<T>& d) {
                if (!t.requires_grad()) return;
                auto g = t.grad_buffer();
                for (Index i = 0; i < d.size(); ++i) g[i] += d[i];
            };
            add_into(q, dq);
            add_into(k, dk);
            add_into(v, dv);
        });
    }
    return out;
}

#define MTE_INSTANTIATE_OPS(T)                                                                    \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> transpose(const Tensor<T>&);                                               \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> scale(const Tensor<T>&, T);                                                \
    template Tensor<T> sum(const Tensor<T>&);                                                     \
    template Tensor<T> mean(const Tensor<T>&);                                                    \
    template Tensor<T> softmax_axis(const Tensor<T>&, Index, T);                                  \
    template Tensor<T> log_softmax_axis(const Tensor<T>&, Index, T);                              \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
    template Tensor<T> gelu(const Tensor<T>&);                                                    \
    template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> pointwise_conv1x1(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
    template Tensor<T> stop_gradient(const Tensor<T>&);                                           \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
    template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<Index>&);                  \
    template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                \
    template Tensor<T> segment_mean_rows(const Tensor<T>&, Index);                                \
    template Tensor<T> l2_normalize_rows(const Tensor<T>&, T);                                    \
    template Tensor<T> pick_cols(const Tensor<T>&, const std::vector<Index>&);                    \
    template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                 const kernels::AttentionShape&, const std::vector<unsigned char>*, \
                                 Tensor<T>*);

MTE_INSTANTIATE_OPS(float)
MTE_INSTANTIATE_OPS(double)

#undef MTE_INSTANTIATE_OPS

}  // namespace mte
