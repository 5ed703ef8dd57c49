#include <cmath>
#include <set>
#include <vector>

#include "camscope/rng.hpp"
#include "camscope/tensor.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace camscope;

TEST_CASE("Grid3 layout is x-fastest") {
    Grid3<int> g(2, 3, 4);
    CHECK_EQ(g.size(), std::size_t(24));
    CHECK_EQ(g.idx(1, 0, 0), std::size_t(1));
    CHECK_EQ(g.idx(0, 1, 0), std::size_t(2));
    CHECK_EQ(g.idx(0, 0, 1), std::size_t(6));
    g.at(1, 2, 3) = 42;
    CHECK_EQ(g.v[1 + 2 * (2 + 3 * 3)], 42);
    CHECK_THROWS_AS(Grid3<int>(-1, 2, 2), std::invalid_argument);
}

TEST_CASE("Tensor4 layout keeps channels contiguous") {
    Tensor4 t(3, 2, 2, 2);
    CHECK_EQ(t.voxels(), std::size_t(8));
    CHECK_EQ(t.idx(1, 0, 0, 0), std::size_t(8));
    CHECK_EQ(t.idx(0, 1, 1, 1), std::size_t(7));
    t.at(2, 1, 0, 1) = 5.0;
    CHECK_EQ(t.channel(2)[1 + 2 * 2], 5.0);
}

TEST_CASE("fnv1a64 matches published vectors") {
    CHECK_EQ(fnv1a64(nullptr, 0), 0xcbf29ce484222325ULL);
    CHECK_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cULL);
    CHECK_EQ(fnv1a64("foobar", 6), 0x85944171f73967e8ULL);
}

TEST_CASE("Rng determinism and ranges") {
    Rng a(123), b(123), c(124);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 1000; ++i) {
        const double ua = a.uniform();
        all_equal = all_equal && ua == b.uniform();
        any_diff = any_diff || ua != c.uniform();
        CHECK(ua >= 0.0);
        CHECK(ua < 1.0);
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("Rng uniform_int covers inclusive bounds") {
    Rng r(7);
    std::set<int> seen;
    for (int i = 0; i < 500; ++i) {
        const int v = r.uniform_int(2, 5);
        CHECK(v >= 2);
        CHECK(v <= 5);
        seen.insert(v);
    }
    CHECK_EQ(seen.size(), std::size_t(4));
}

TEST_CASE("Rng normal has sane moments") {
    Rng r(99);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 0.05);
}

TEST_CASE("derive_seed separates streams") {
    CHECK_EQ(derive_seed(1, 5), derive_seed(1, 5));
    CHECK_NE(derive_seed(1, 5), derive_seed(1, 6));
    CHECK_NE(derive_seed(1, 5), derive_seed(2, 5));
    CHECK_NE(derive_seed(1, "weights"), derive_seed(1, "bias"));
    CHECK_EQ(derive_seed(3, "x"), derive_seed(3, "x"));
}

TEST_CASE("resample_trilinear identity and constants") {
    VolumeD v(4, 3, 2);
    Rng r(11);
    ts::fill_uniform(v, r);
    const VolumeD same = resample_trilinear(v, 4, 3, 2);
    CHECK_EQ(same.v, v.v);

    VolumeD k(5, 5, 5, 2.5);
    const VolumeD up = resample_trilinear(k, 9, 7, 3);
    for (double x : up.v) CHECK_EQ(x, 2.5);
}

TEST_CASE("resample_trilinear 8->4 ramp closed form") {
    // center alignment maps target x to source 2x + 0.5, so a unit ramp
    // samples at 0.5, 2.5, 4.5, 6.5
    VolumeD v(8, 1, 1);
    for (int x = 0; x < 8; ++x) v.at(x, 0, 0) = x;
    const VolumeD out = resample_trilinear(v, 4, 1, 1);
    REQUIRE_EQ(out.nx, 4);
    for (int x = 0; x < 4; ++x) CHECK(out.at(x, 0, 0) == doctest::Approx(2.0 * x + 0.5).epsilon(1e-12));
}

TEST_CASE("resample_trilinear stays within input range") {
    Rng r(21);
    for (int trial = 0; trial < 10; ++trial) {
        VolumeD v(r.uniform_int(1, 6), r.uniform_int(1, 6), r.uniform_int(1, 6));
        ts::fill_uniform(v, r, -3.0, 3.0);
        double lo = v.v[0], hi = v.v[0];
        for (double x : v.v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        const VolumeD out =
            resample_trilinear(v, r.uniform_int(1, 9), r.uniform_int(1, 9), r.uniform_int(1, 9));
        for (double x : out.v) {
            CHECK(x >= lo - 1e-12);
            CHECK(x <= hi + 1e-12);
        }
    }
    CHECK_THROWS_AS(resample_trilinear(VolumeD(), 2, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(resample_trilinear(VolumeD(2, 2, 2), 0, 2, 2), std::invalid_argument);
}

TEST_CASE("volume/tensor conversions round-trip") {
    VolumeD v(3, 2, 4);
    Rng r(5);
    ts::fill_uniform(v, r);
    const Tensor4 t = volume_to_tensor(v);
    CHECK_EQ(t.c, 1);
    CHECK_EQ(t.nx, 3);
    CHECK_EQ(t.v, v.v);
    const VolumeD back = tensor_channel_to_volume(t, 0);
    CHECK_EQ(back.v, v.v);

    VolumeF f(2, 2, 2);
    ts::fill_uniform(f, r);
    CHECK_EQ(to_float(to_double(f)).v, f.v);
}
