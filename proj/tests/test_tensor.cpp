#include <cmath>
#include <random>

#include "doctest.h"
#include "mte/errors.hpp"
#include "mte/gradcheck.hpp"
#include "mte/kernels.hpp"
#include "mte/ops.hpp"

using namespace mte;

namespace {

std::vector<double> random_values(Index n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return v;
}

Tensor<double> random_tensor(Shape shape, unsigned seed) {
    const Index n = shape_numel(shape);
    return Tensor<double>(std::move(shape), random_values(n, seed));
}

}  // namespace

TEST_CASE("gemm matches a direct triple loop") {
    const Index m = 5, k = 7, n = 3;
    const auto a = random_values(m * k, 1), b = random_values(k * n, 2);
    std::vector<double> c(m * n);
    kernels::gemm(m, k, n, a.data(), b.data(), c.data(), false);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) {
            double s = 0;
            for (Index p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-14));
        }
}

TEST_CASE("parallel kernels are bit-identical to the serial references at any thread count") {
    const int saved = kernels::num_threads();
    for (int threads : {1, 3}) {
        kernels::set_num_threads(threads);
        const Index m = 33, k = 17, n = 29;
        const auto a = random_values(m * k, 3), b = random_values(k * n, 4);
        std::vector<double> c1(m * n), c2(m * n);
        kernels::gemm(m, k, n, a.data(), b.data(), c1.data(), false);
        kernels::reference::gemm(m, k, n, a.data(), b.data(), c2.data(), false);
        CHECK(c1 == c2);

        std::vector<double> s1(m * k), s2(m * k);
        kernels::softmax_rows(m, k, a.data(), s1.data(), 2.0);
        kernels::reference::softmax_rows(m, k, a.data(), s2.data(), 2.0);
        CHECK(s1 == s2);

        const auto gamma = random_values(k, 5), beta = random_values(k, 6);
        std::vector<double> l1(m * k), l2(m * k), mu1(m), mu2(m), r1(m), r2(m);
        kernels::layer_norm_rows(m, k, a.data(), gamma.data(), beta.data(), 1e-6, l1.data(), mu1.data(), r1.data());
        kernels::reference::layer_norm_rows(m, k, a.data(), gamma.data(), beta.data(), 1e-6, l2.data(), mu2.data(),
                                            r2.data());
        CHECK(l1 == l2);

        std::vector<double> g1(m * k), g2(m * k);
        kernels::gelu(m * k, a.data(), g1.data());
        kernels::reference::gelu(m * k, a.data(), g2.data());
        CHECK(g1 == g2);

        const auto img = random_values(2 * 5 * 5 * 4, 7), ker = random_values(3 * 3 * 4, 8);
        std::vector<double> d1(img.size()), d2(img.size());
        kernels::depthwise_conv2d(2, 5, 5, 4, 3, img.data(), ker.data(), d1.data());
        kernels::reference::depthwise_conv2d(2, 5, 5, 4, 3, img.data(), ker.data(), d2.data());
        CHECK(d1 == d2);

        kernels::AttentionShape s{2, 5, 5, 8, 2};
        const auto q = random_values(10 * 8, 9), kk = random_values(10 * 8, 10), v = random_values(10 * 8, 11);
        std::vector<double> p1(2 * 2 * 25), p2(p1.size()), o1(80), o2(80);
        kernels::attention(s, q.data(), kk.data(), v.data(), nullptr, p1.data(), o1.data());
        kernels::reference::attention(s, q.data(), kk.data(), v.data(), nullptr, p2.data(), o2.data());
        CHECK(o1 == o2);
        CHECK(p1 == p2);
    }
    kernels::set_num_threads(saved);
}

TEST_CASE("softmax and log_softmax agree and respect the temperature") {
    const auto x = random_tensor({3, 4}, 12);
    const auto s = softmax_axis(x, 1, 0.5);
    const auto l = log_softmax_axis(x, 1, 0.5);
    for (Index r = 0; r < 3; ++r) {
        double total = 0, z = 0;
        for (Index c = 0; c < 4; ++c) z += std::exp(x.at(r, c) / 0.5);
        for (Index c = 0; c < 4; ++c) {
            total += s.at(r, c);
            CHECK(s.at(r, c) == doctest::Approx(std::exp(x.at(r, c) / 0.5) / z).epsilon(1e-12));
            CHECK(std::log(s.at(r, c)) == doctest::Approx(l.at(r, c)).epsilon(1e-12));
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
    const auto x = random_tensor({4, 16}, 13);
    const Tensor<double> gamma({16}, 1.0), beta({16}, 0.0);
    const auto y = layer_norm(x, gamma, beta, 1e-12);
    for (Index r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (Index c = 0; c < 16; ++c) mean += y.at(r, c) / 16;
        for (Index c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 16;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("depthwise convolution matches a zero-padded loop oracle") {
    const auto x = random_tensor({1, 4, 5, 2}, 14);
    const auto k = random_tensor({3, 3, 2}, 15);
    const auto y = depthwise_conv2d(x, k);
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 5; ++j)
            for (Index c = 0; c < 2; ++c) {
                double s = 0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int ii = int(i) + di, jj = int(j) + dj;
                        if (ii < 0 || jj < 0 || ii >= 4 || jj >= 5) continue;
                        s += x[(ii * 5 + jj) * 2 + c] * k[((di + 1) * 3 + (dj + 1)) * 2 + c];
                    }
                CHECK(y[(i * 5 + j) * 2 + c] == doctest::Approx(s).epsilon(1e-13));
            }
}

TEST_CASE("masked attention ignores the values of masked keys") {
    kernels::AttentionShape s{1, 3, 3, 4, 1};
    const auto q = random_tensor({3, 4}, 16), k = random_tensor({3, 4}, 17);
    auto v = random_tensor({3, 4}, 18);
    const std::vector<unsigned char> allowed{1, 0, 1, 1, 1, 1, 1, 0, 1};
    const auto before = attention(q, k, v, s, &allowed);
    for (Index c = 0; c < 4; ++c) v.at(1, c) += 100.0;
    const auto after = attention(q, k, v, s, &allowed);
    for (Index c = 0; c < 4; ++c) {
        CHECK(before.at(0, c) == after.at(0, c));
        CHECK(before.at(2, c) == after.at(2, c));
        CHECK(before.at(1, c) != after.at(1, c));
    }
}

TEST_CASE("stop_gradient passes values and blocks gradients") {
    auto x = random_tensor({2, 3}, 19);
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto y = sum(add(stop_gradient(x), scale(x, 2.0)));
    tape.backward(y);
    for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("gradient check accepts a correct gradient and rejects a wrong one") {
    const auto x = random_tensor({3}, 20);
    const auto ok = check_gradients([x] { return sum(mul(x, x)); }, {{"x", x}});
    CHECK(ok.passed(1e-6));
    // stop_gradient makes the analytic gradient half the true one.
    const auto bad = check_gradients([x] { return sum(mul(stop_gradient(x), x)); }, {{"x", x}});
    CHECK_FALSE(bad.passed(1e-3));
}

TEST_CASE("shape errors carry the dimension kind") {
    const Tensor<double> a({2, 3}), b({2, 3});
    try {
        matmul(a, b);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Dimension);
        CHECK(exit_code(e.kind()) != 0);
    }
}

TEST_CASE("exit codes follow the CLI contract") {
    CHECK(exit_code(ErrorKind::Usage) == 2);
    CHECK(exit_code(ErrorKind::Data) == 3);
    CHECK(exit_code(ErrorKind::Format) == 3);
    CHECK(exit_code(ErrorKind::Numeric) == 4);
}
