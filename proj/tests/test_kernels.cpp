#include <cmath>

#include "doctest.h"
#include "shield/mat.hpp"
#include "shield/rng.hpp"

using namespace shield;

TEST_CASE("silu fixed points") {
    CHECK(silu(0.0) == 0.0);
    // High-precision references evaluated with a 30-digit arithmetic oracle.
    CHECK(std::abs(silu(1.0) - 0.731058578630004879251159241822) < 1e-12);
    CHECK(std::abs(silu(10.0) - 9.99954602131297565605495223767) < 1e-4);
    CHECK(std::isfinite(silu(700.0)));
    CHECK(std::isfinite(silu(-700.0)));
}

TEST_CASE("softmax basics") {
    auto s = softmax_stable({0.0, 0.0});
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-12));

    s = softmax_stable({1.0, 2.0, 3.0});
    CHECK(std::abs(s[0] - 0.090030573170380457) < 1e-5);
    CHECK(std::abs(s[1] - 0.244728471054797652) < 1e-5);
    CHECK(std::abs(s[2] - 0.665240955774821889) < 1e-5);

    CHECK_THROWS_WITH_AS(softmax_stable({}), "empty logits", std::invalid_argument);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    Rng rng(42);
    for (int it = 0; it < 50; ++it) {
        const int n = 1 + int(rng.below(8));
        std::vector<double> v(n);
        for (auto& x : v) x = rng.uniform_sym(5.0);
        const auto s = softmax_stable(v);
        double sum = 0.0;
        for (double x : s) sum += x;
        CHECK(std::abs(sum - 1.0) <= 1e-12);
        for (double x : s) CHECK(x >= 0.0);

        const double c = rng.uniform_sym(50.0);
        auto shifted = v;
        for (auto& x : shifted) x += c;
        const auto s2 = softmax_stable(shifted);
        for (int i = 0; i < n; ++i) CHECK(std::abs(s[i] - s2[i]) < 1e-12);
    }
}

TEST_CASE("cross entropy") {
    // Uniform logits over vocab 4 -> ln 4, any target.
    for (int t = 0; t < 4; ++t)
        CHECK(std::abs(cross_entropy({0.3, 0.3, 0.3, 0.3}, t) -
                       1.38629436111989061883446424292) < 1e-12);
    // Dominant target logit -> loss approaches 0.
    CHECK(cross_entropy({500.0, 0.0, 0.0}, 0) < 1e-12);
    CHECK(std::abs(cross_entropy({1.0, 2.0, 3.0}, 0) - 2.40760596444438030448291990454) < 1e-4);
    CHECK(cross_entropy({1.0, 2.0, 3.0}, 1) >= 0.0);
    CHECK_THROWS_AS(cross_entropy({1.0, 2.0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy({1.0, 2.0}, -1), std::invalid_argument);
}

TEST_CASE("matmul variants agree with naive triple loop") {
    Rng rng(7);
    for (int it = 0; it < 20; ++it) {
        const int m = 1 + int(rng.below(6));
        const int k = 1 + int(rng.below(6));
        const int n = 1 + int(rng.below(6));
        Mat a(m, k), b(k, n);
        for (auto& v : a.data) v = rng.uniform_sym(2.0);
        for (auto& v : b.data) v = rng.uniform_sym(2.0);
        const Mat c = matmul(a, b);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
                CHECK(std::abs(c.at(i, j) - s) < 1e-12);
            }

        Mat bt(n, k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < n; ++j) bt.at(j, i) = b.at(i, j);
        const Mat c2 = matmul_nt(a, bt);
        Mat at(k, m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j) at.at(j, i) = a.at(i, j);
        const Mat c3 = matmul_tn(at, b);
        for (size_t i = 0; i < c.data.size(); ++i) {
            CHECK(std::abs(c.data[i] - c2.data[i]) < 1e-12);
            CHECK(std::abs(c.data[i] - c3.data[i]) < 1e-12);
        }
    }
}

TEST_CASE("kernels are bit-deterministic") {
    Rng rng(99);
    Mat a(5, 4), b(4, 6);
    for (auto& v : a.data) v = rng.uniform_sym(3.0);
    for (auto& v : b.data) v = rng.uniform_sym(3.0);
    const Mat c1 = matmul(a, b);
    const Mat c2 = matmul(a, b);
    for (size_t i = 0; i < c1.data.size(); ++i) CHECK(c1.data[i] == c2.data[i]);

    std::vector<double> v{0.1, -2.0, 3.5};
    const auto s1 = softmax_stable(v);
    const auto s2 = softmax_stable(v);
    for (size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == s2[i]);
}

TEST_CASE("rng is reproducible and forks diverge") {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    bool differs = false;
    Rng a2(123);
    for (int i = 0; i < 100; ++i)
        if (a2.next_u64() != c.next_u64()) differs = true;
    CHECK(differs);

    Rng base(5);
    Rng f1 = base.fork(1);
    Rng base2(5);
    Rng f2 = base2.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
}
