#include "mte/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mte::kernels {

namespace {

// Below this much work the fork/join cost dominates.
constexpr Index kParallelGrain = 1 << 14;

template <typename T>
constexpr T kGeluScale = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
template <typename T>
constexpr T kGeluCubic = static_cast<T>(0.044715);

}  // namespace

void set_num_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

template <typename T>
void gemm(Index m, Index k, Index n, const T* a, const T* b, T* c, bool accumulate) {
    const bool parallel = m * k * n >= kParallelGrain && m > 1;
#pragma omp parallel for schedule(static) if (parallel)
    for (Index i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + i * k;
        for (Index p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void transpose(Index rows, Index cols, const T* in, T* out) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) out[j * rows + i] = in[i * cols + j];
}

template <typename T>
void softmax_rows(Index rows, Index cols, const T* in, T* out, T inv_temperature) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (Index r = 0; r < rows; ++r) {
        const T* x = in + r * cols;
        T* y = out + r * cols;
        T peak = -std::numeric_limits<T>::infinity();
        for (Index c = 0; c < cols; ++c) peak = std::max(peak, x[c] * inv_temperature);
        T total = 0;
        for (Index c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] * inv_temperature - peak);
            total += y[c];
        }
        for (Index c = 0; c < cols; ++c) y[c] /= total;
    }
}

template <typename T>
void log_softmax_rows(Index rows, Index cols, const T* in, T* out, T inv_temperature) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (Index r = 0; r < rows; ++r) {
        const T* x = in + r * cols;
        T* y = out + r * cols;
        T peak = -std::numeric_limits<T>::infinity();
        for (Index c = 0; c < cols; ++c) peak = std::max(peak, x[c] * inv_temperature);
        T total = 0;
        for (Index c = 0; c < cols; ++c) total += std::exp(x[c] * inv_temperature - peak);
        const T log_total = std::log(total) + peak;
        for (Index c = 0; c < cols; ++c) y[c] = x[c] * inv_temperature - log_total;
    }
}

template <typename T>
void layer_norm_rows(Index rows, Index cols, const T* in, const T* gamma, const T* beta, T eps,
                     T* out, T* mean, T* rstd) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelGrain)
    for (Index r = 0; r < rows; ++r) {
        const T* x = in + r * cols;
        T* y = out + r * cols;
        T mu = 0;
        for (Index c = 0; c < cols; ++c) mu += x[c];
        mu /= static_cast<T>(cols);
        T var = 0;
        for (Index c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= static_cast<T>(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        for (Index c = 0; c < cols; ++c) y[c] = (x[c] - mu) * inv * gamma[c] + beta[c];
        mean[r] = mu;
        rstd[r] = inv;
    }
}

template <typename T>
void layer_norm_rows_backward(Index rows, Index cols, const T* in, const T* gamma, const T* mean,
                              const T* rstd, const T* grad_out, T* grad_in, T* grad_gamma,
                              T* grad_beta) {
    const bool parallel = rows * cols >= kParallelGrain;
    if (grad_in != nullptr) {
#pragma omp parallel for schedule(static) if (parallel)
        for (Index r = 0; r < rows; ++r) {
            const T* x = in + r * cols;
            const T* g = grad_out + r * cols;
            T* dx = grad_in + r * cols;
            T sum_dxhat = 0;
            T sum_dxhat_xhat = 0;
            for (Index c = 0; c < cols; ++c) {
                const T xhat = (x[c] - mean[r]) * rstd[r];
                const T dxhat = g[c] * gamma[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            const T inv_n = T(1) / static_cast<T>(cols);
            for (Index c = 0; c < cols; ++c) {
                const T xhat = (x[c] - mean[r]) * rstd[r];
                const T dxhat = g[c] * gamma[c];
                dx[c] += rstd[r] * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
            }
        }
    }
    if (grad_gamma != nullptr || grad_beta != nullptr) {
#pragma omp parallel for schedule(static) if (parallel)
        for (Index c = 0; c < cols; ++c) {
            T dg = 0;
            T db = 0;
            for (Index r = 0; r < rows; ++r) {
                const T xhat = (in[r * cols + c] - mean[r]) * rstd[r];
                dg += grad_out[r * cols + c] * xhat;
                db += grad_out[r * cols + c];
            }
            if (grad_gamma != nullptr) grad_gamma[c] += dg;
            if (grad_beta != nullptr) grad_beta[c] += db;
        }
    }
}

template <typename T>
void gelu(Index n, const T* in, T* out) {
#pragma omp parallel for schedule(static) if (n >= kParallelGrain)
    for (Index i = 0; i < n; ++i) {
        const T x = in[i];
        const T u = kGeluScale<T> * (x + kGeluCubic<T> * x * x * x);
        out[i] = T(0.5) * x * (T(1) + std::tanh(u));
    }
}

template <typename T>
void gelu_backward(Index n, const T* in, const T* grad_out, T* grad_in) {
#pragma omp parallel for schedule(static) if (n >= kParallelGrain)
    for (Index i = 0; i < n; ++i) {
        const T x = in[i];
        const T u = kGeluScale<T> * (x + kGeluCubic<T> * x * x * x);
        const T th = std::tanh(u);
        const T du = kGeluScale<T> * (T(1) + T(3) * kGeluCubic<T> * x * x);
        const T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
        grad_in[i] += grad_out[i] * d;
    }
}

template <typename T>
void depthwise_conv2d(Index batch, Index height, Index width, Index channels, Index k,
                      const T* in, const T* kernel, T* out) {
    const long r = static_cast<long>(k / 2);
    const long h = static_cast<long>(height);
    const long w = static_cast<long>(width);
    const Index rows = batch * height;
    const bool parallel = rows * width * channels * k * k >= kParallelGrain;
#pragma omp parallel for schedule(static) if (parallel)
    for (Index row = 0; row < rows; ++row) {
        const Index b = row / height;
        const long y = static_cast<long>(row % height);
        for (long x = 0; x < w; ++x) {
            T* o = out + ((b * height + y) * width + x) * channels;
            std::fill(o, o + channels, T(0));
            for (long ky = 0; ky < static_cast<long>(k); ++ky) {
                const long iy = y + ky - r;
                if (iy < 0 || iy >= h) continue;
                for (long kx = 0; kx < static_cast<long>(k); ++kx) {
                    const long ix = x + kx - r;
                    if (ix < 0 || ix >= w) continue;
                    const T* src = in + ((b * height + iy) * width + ix) * channels;
                    const T* kw = kernel + (ky * static_cast<long>(k) + kx) * channels;
                    for (Index c = 0; c < channels; ++c) o[c] += kw[c] * src[c];
                }
            }
        }
    }
}

template <typename T>
void depthwise_conv2d_backward(Index batch, Index height, Index width, Index channels, Index k,
                               const T* in, const T* kernel, const T* grad_out, T* grad_in,
                               T* grad_kernel) {
    const long r = static_cast<long>(k / 2);
    const long h = static_cast<long>(height);
    const long w = static_cast<long>(width);
    const long kk = static_cast<long>(k);
    const bool parallel = batch * height * width * channels * k * k >= kParallelGrain;
    if (grad_in != nullptr) {
        const Index rows = batch * height;
#pragma omp parallel for schedule(static) if (parallel)
        for (Index row = 0; row < rows; ++row) {
            const Index b = row / height;
            const long iy = static_cast<long>(row % height);
            for (long ix = 0; ix < w; ++ix) {
                T* di = grad_in + ((b * height + iy) * width + ix) * channels;
                for (long ky = 0; ky < kk; ++ky) {
                    const long y = iy - ky + r;
                    if (y < 0 || y >= h) continue;
                    for (long kx = 0; kx < kk; ++kx) {
                        const long x = ix - kx + r;
                        if (x < 0 || x >= w) continue;
                        const T* g = grad_out + ((b * height + y) * width + x) * channels;
                        const T* kw = kernel + (ky * kk + kx) * channels;
                        for (Index c = 0; c < channels; ++c) di[c] += kw[c] * g[c];
                    }
                }
            }
        }
    }
    if (grad_kernel != nullptr) {
#pragma omp parallel for schedule(static) if (parallel)
        for (long tap = 0; tap < kk * kk; ++tap) {
            const long ky = tap / kk;
            const long kx = tap % kk;
            T* dk = grad_kernel + tap * static_cast<long>(channels);
            for (Index b = 0; b < batch; ++b)
                for (long y = 0; y < h; ++y) {
                    const long iy = y + ky - r;
                    if (iy < 0 || iy >= h) continue;
                    for (long x = 0; x < w; ++x) {
                        const long ix = x + kx - r;
                        if (ix < 0 || ix >= w) continue;
                        const T* g = grad_out + ((b * height + y) * width + x) * channels;
                        const T* src = in + ((b * height + iy) * width + ix) * channels;
                        for (Index c = 0; c < channels; ++c) dk[c] += g[c] * src[c];
                    }
                }
        }
    }
}

namespace {

template <typename T>
void attention_one(const AttentionShape& s, Index b, Index hd, const T* q, const T* k, const T* v,
                   const unsigned char* allowed, T* probs, T* out) {
    const Index dh = s.dim / s.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const Index off = hd * dh;
    T* p = probs + (b * s.heads + hd) * s.q_tokens * s.kv_tokens;
    for (Index i = 0; i < s.q_tokens; ++i) {
        const T* qi = q + (b * s.q_tokens + i) * s.dim + off;
        T* prow = p + i * s.kv_tokens;
        T peak = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < s.kv_tokens; ++j) {
            if (allowed != nullptr && allowed[i * s.kv_tokens + j] == 0) {
                prow[j] = -std::numeric_limits<T>::infinity();
                continue;
            }
            const T* kj = k + (b * s.kv_tokens + j) * s.dim + off;
            T dot = 0;
            for (Index d = 0; d < dh; ++d) dot += qi[d] * kj[d];
            prow[j] = dot * scale;
            peak = std::max(peak, prow[j]);
        }
        T total = 0;
        for (Index j = 0; j < s.kv_tokens; ++j) {
            prow[j] = std::isinf(prow[j]) && prow[j] < 0 ? T(0) : std::exp(prow[j] - peak);
            total += prow[j];
        }
        for (Index j = 0; j < s.kv_tokens; ++j) prow[j] /= total;
        T* oi = out + (b * s.q_tokens + i) * s.dim + off;
        std::fill(oi, oi + dh, T(0));
        for (Index j = 0; j < s.kv_tokens; ++j) {
            if (prow[j] == T(0)) continue;
            const T* vj = v + (b * s.kv_tokens + j) * s.dim + off;
            for (Index d = 0; d < dh; ++d) oi[d] += prow[j] * vj[d];
        }
    }
}

}  // namespace

template <typename T>
void attention(const AttentionShape& s, const T* q, const T* k, const T* v,
               const unsigned char* allowed, T* probs, T* out) {
    const Index pairs = s.batch * s.heads;
    const bool parallel = pairs > 1 && s.batch * s.q_tokens * s.kv_tokens * s.dim >= kParallelGrain;
#pragma omp parallel for schedule(static) if (parallel)
    for (Index pair = 0; pair < pairs; ++pair)
        attention_one(s, pair / s.heads, pair % s.heads, q, k, v, allowed, probs, out);
}

template <typename T>
void attention_backward(const AttentionShape& s, const T* q, const T* k, const T* v,
                        const T* probs, const T* grad_out, T* grad_q, T* grad_k, T* grad_v) {
    const Index dh = s.dim / s.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const Index pairs = s.batch * s.heads;
    const bool parallel = pairs > 1 && s.batch * s.q_tokens * s.kv_tokens * s.dim >= kParallelGrain;
#pragma omp parallel for schedule(static) if (parallel)
    for (Index pair = 0; pair < pairs; ++pair) {
        const Index b = pair / s.heads;
        const Index off = (pair % s.heads) * dh;
        const T* p = probs + pair * s.q_tokens * s.kv_tokens;
        std::vector<T> dscore(s.kv_tokens);
        for (Index i = 0; i < s.q_tokens; ++i) {
            const T* go = grad_out + (b * s.q_tokens + i) * s.dim + off;
            const T* prow = p + i * s.kv_tokens;
            T weighted = 0;
            for (Index j = 0; j < s.kv_tokens; ++j) {
                if (prow[j] == T(0)) {
                    dscore[j] = 0;
                    continue;
                }
                const T* vj = v + (b * s.kv_tokens + j) * s.dim + off;
                T dp = 0;
                for (Index d = 0; d < dh; ++d) dp += go[d] * vj[d];
                dscore[j] = dp;
                weighted += prow[j] * dp;
            }
            for (Index j = 0; j < s.kv_tokens; ++j) dscore[j] = prow[j] * (dscore[j] - weighted) * scale;

            const T* qi = q + (b * s.q_tokens + i) * s.dim + off;
            T* dqi = grad_q + (b * s.q_tokens + i) * s.dim + off;
            for (Index j = 0; j < s.kv_tokens; ++j) {
                if (prow[j] == T(0)) continue;
                const T* kj = k + (b * s.kv_tokens + j) * s.dim + off;
                T* dkj = grad_k + (b * s.kv_tokens + j) * s.dim + off;
                T* dvj = grad_v + (b * s.kv_tokens + j) * s.dim + off;
                for (Index d = 0; d < dh; ++d) {
                    dqi[d] += dscore[j] * kj[d];
                    dkj[d] += dscore[j] * qi[d];
                    dvj[d] += prow[j] * go[d];
                }
            }
        }
    }
}

namespace reference {

template <typename T>
void gemm(Index m, Index k, Index n, const T* a, const T* b, T* c, bool accumulate) {
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (Index p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
}

template <typename T>
void softmax_rows(Index rows, Index cols, const T* in, T* out, T inv_temperature) {
    for (Index r = 0; r < rows; ++r) {
        T peak = -std::numeric_limits<T>::infinity();
        for (Index c = 0; c < cols; ++c) peak = std::max(peak, in[r * cols + c] * inv_temperature);
        T total = 0;
        for (Index c = 0; c < cols; ++c) total += std::exp(in[r * cols + c] * inv_temperature - peak);
        for (Index c = 0; c < cols; ++c)
            out[r * cols + c] = std::exp(in[r * cols + c] * inv_temperature - peak) / total;
    }
}

template <typename T>
void layer_norm_rows(Index rows, Index cols, const T* in, const T* gamma, const T* beta, T eps,
                     T* out, T* mean, T* rstd) {
    for (Index r = 0; r < rows; ++r) {
        T mu = 0;
        for (Index c = 0; c < cols; ++c) mu += in[r * cols + c];
        mu /= static_cast<T>(cols);
        T var = 0;
        for (Index c = 0; c < cols; ++c) var += (in[r * cols + c] - mu) * (in[r * cols + c] - mu);
        var /= static_cast<T>(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        for (Index c = 0; c < cols; ++c)
            out[r * cols + c] = (in[r * cols + c] - mu) * inv * gamma[c] + beta[c];
        mean[r] = mu;
        rstd[r] = inv;
    }
}

template <typename T>
void gelu(Index n, const T* in, T* out) {
    for (Index i = 0; i < n; ++i) {
        const T x = in[i];
        out[i] = T(0.5) * x * (T(1) + std::tanh(kGeluScale<T> * (x + kGeluCubic<T> * x * x * x)));
    }
}

template <typename T>
void depthwise_conv2d(Index batch, Index height, Index width, Index channels, Index k,
                      const T* in, const T* kernel, T* out) {
    const long r = static_cast<long>(k / 2);
    for (Index b = 0; b < batch; ++b)
        for (long y = 0; y < static_cast<long>(height); ++y)
            for (long x = 0; x < static_cast<long>(width); ++x)
                for (Index c = 0; c < channels; ++c) {
                    T acc = 0;
                    for (long ky = 0; ky < static_cast<long>(k); ++ky)
                        for (long kx = 0; kx < static_cast<long>(k); ++kx) {
                            const long iy = y + ky - r;
                            const long ix = x + kx - r;
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(height) ||
                                ix >= static_cast<long>(width))
                                continue;
                            acc += kernel[(ky * static_cast<long>(k) + kx) * channels + c] *
                                   in[((b * height + iy) * width + ix) * channels + c];
                        }
                    out[((b * height + y) * width + x) * channels + c] = acc;
                }
}

template <typename T>
void attention(const AttentionShape& s, const T* q, const T* k, const T* v,
               const unsigned char* allowed, T* probs, T* out) {
    for (Index b = 0; b < s.batch; ++b)
        for (Index hd = 0; hd < s.heads; ++hd) attention_one(s, b, hd, q, k, v, allowed, probs, out);
}

}  // namespace reference

#define MTE_INSTANTIATE_KERNELS(T)                                                               \
    template void gemm<T>(Index, Index, Index, const T*, const T*, T*, bool);                     \
    template void transpose<T>(Index, Index, const T*, T*);                                      \
    template void softmax_rows<T>(Index, Index, const T*, T*, T);                                \
    template void log_softmax_rows<T>(Index, Index, const T*, T*, T);                            \
    template void layer_norm_rows<T>(Index, Index, const T*, const T*, const T*, T, T*, T*, T*); \
    template void layer_norm_rows_backward<T>(Index, Index, const T*, const T*, const T*,        \
                                              const T*, const T*, T*, T*, T*);                   \
    template void gelu<T>(Index, const T*, T*);                                                  \
    template void gelu_backward<T>(Index, const T*, const T*, T*);                               \
    template void depthwise_conv2d<T>(Index, Index, Index, Index, Index, const T*, const T*, T*); \
    template void depthwise_conv2d_backward<T>(Index, Index, Index, Index, Index, const T*,      \
                                               const T*, const T*, T*, T*);                      \
    template void attention<T>(const AttentionShape&, const T*, const T*, const T*,              \
                               const unsigned char*, T*, T*);                                    \
    template void attention_backward<T>(const AttentionShape&, const T*, const T*, const T*,     \
                                        const T*, const T*, T*, T*, T*);                         \
    template void reference::gemm<T>(Index, Index, Index, const T*, const T*, T*, bool);          \
    template void reference::softmax_rows<T>(Index, Index, const T*, T*, T);                     \
    template void reference::layer_norm_rows<T>(Index, Index, const T*, const T*, const T*, T,   \
                                                T*, T*, T*);                                     \
    template void reference::gelu<T>(Index, const T*, T*);                                       \
    template void reference::depthwise_conv2d<T>(Index, Index, Index, Index, Index, const T*,    \
                                                 const T*, T*);                                  \
    template void reference::attention<T>(const AttentionShape&, const T*, const T*, const T*,   \
                                          const unsigned char*, T*, T*);

MTE_INSTANTIATE_KERNELS(float)
MTE_INSTANTIATE_KERNELS(double)

#undef MTE_INSTANTIATE_KERNELS

}  // namespace mte::kernels
