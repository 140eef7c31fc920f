#include <doctest.h>

#include "blockcache/tensor.hpp"

using namespace bc;

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.rank() == 3);
    t.at({1, 2, 3}) = 7.0f;
    CHECK(t.data[23] == 7.0f);
    CHECK(t.at({0, 0, 0}) == 0.0f);
    CHECK(t.shape_str() == "[2,3,4]");
    CHECK_THROWS(t.reshaped({5, 5}));
    Tensor r = t.reshaped({6, 4});
    CHECK(r.at({5, 3}) == 7.0f);
}

TEST_CASE("l1 helpers") {
    Tensor a({4}, {1.0f, -2.0f, 0.0f, 3.0f});
    Tensor b({4}, {1.0f, -1.0f, 1.0f, 3.0f});
    CHECK(l1_norm(a) == doctest::Approx(6.0f));
    CHECK(l1_distance(a, b) == doctest::Approx(2.0f));
    CHECK(max_abs_diff(a, b) == doctest::Approx(1.0f));
    Tensor c({3});
    CHECK_THROWS(l1_distance(a, c));
}

TEST_CASE("rng streams are pure functions of (seed, counter)") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(124);
    int diff = 0;
    Rng a2(123);
    for (int i = 0; i < 100; ++i)
        if (a2.next_u64() != c.next_u64()) ++diff;
    CHECK(diff > 90);
}

TEST_CASE("rng uniform and normal moments") {
    Rng r(7);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        double u = r.next_uniform();
        CHECK(u > 0.0);
        CHECK(u <= 1.0);
        s += u;
        s2 += u * u;
    }
    CHECK(s / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(s2 / n - (s / n) * (s / n) == doctest::Approx(1.0 / 12.0).epsilon(0.02));

    Rng g(8);
    double m = 0, v = 0, m4 = 0;
    for (int i = 0; i < n; ++i) {
        double x = g.normal();
        m += x;
        v += x * x;
        m4 += x * x * x * x;
    }
    m /= n;
    v = v / n - m * m;
    CHECK(m == doctest::Approx(0.0).epsilon(1).scale(0.02));
    CHECK(v == doctest::Approx(1.0).epsilon(0.02));
    CHECK(m4 / n == doctest::Approx(3.0).epsilon(0.05));  // Gaussian kurtosis
}

TEST_CASE("fnv1a and hex64 known values") {
    // classic fnv-1a vectors
    CHECK(fnv1a(std::string("")) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a(std::string("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(hex64(0x1234abcdULL) == "000000001234abcd");
    CHECK(fnv1a(std::string("abc")) != fnv1a(std::string("acb")));
}

TEST_CASE("tensor checksum is shape- and content-sensitive") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({4}, {1, 2, 3, 4});
    Tensor c({2, 2}, {1, 2, 3, 5});
    CHECK(tensor_checksum(a) != tensor_checksum(b));
    CHECK(tensor_checksum(a) != tensor_checksum(c));
    CHECK(tensor_checksum(a) == tensor_checksum(Tensor({2, 2}, {1, 2, 3, 4})));
}
