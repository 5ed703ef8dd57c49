#include <algorithm>
#include <cmath>
#include <filesystem>

#include "camscope/cam.hpp"
#include "camscope/model.hpp"
#include "camscope/rng.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace camscope;

namespace {

bool thresholded_values(const VolumeD& m, double tau) {
    return std::all_of(m.v.begin(), m.v.end(),
                       [&](double x) { return x == 0.0 || (x > tau && x <= 1.0); });
}

}  // namespace

TEST_CASE("map source layer is the last conv of the 3D encoder") {
    CHECK_EQ(select_layer(), cam_layer_name());
    CHECK_EQ(select_layer(), "enc3d.stage2.conv");

    Model m(ts::micro_config(0, 2));
    m.init_params();
    VolumeD v(32, 32, 16);
    Rng rng(9);
    ts::fill_uniform(v, rng);
    const Tensor4& layer = m.forward(v).get(select_layer());
    CHECK_EQ(layer.c, 8);
    CHECK_EQ(layer.nx, 4);
    CHECK_EQ(layer.ny, 4);
    CHECK_EQ(layer.nz, 2);
    for (double x : layer.v) CHECK(x >= 0.0);  // post-ReLU activations
}

TEST_CASE("neuron importance averages only positive gradients") {
    Tensor4 g(2, 2, 1, 1);
    g.at(0, 0, 0, 0) = 1.0;
    g.at(0, 1, 0, 0) = -1.0;  // clipped
    g.at(1, 0, 0, 0) = 3.0;
    g.at(1, 1, 0, 0) = 1.0;
    const auto alpha = neuron_importance(g);
    REQUIRE_EQ(alpha.size(), std::size_t(2));
    CHECK_EQ(alpha[0], 0.5);
    CHECK_EQ(alpha[1], 2.0);

    Tensor4 neg(3, 2, 2, 2, -0.25);
    for (double a : neuron_importance(neg)) CHECK_EQ(a, 0.0);

    CHECK_THROWS_AS(neuron_importance(Tensor4()), std::invalid_argument);
}

TEST_CASE("activation map is the rectified weighted channel sum") {
    Tensor4 v(2, 2, 1, 1);
    v.at(0, 0, 0, 0) = 3.0;
    v.at(0, 1, 0, 0) = 1.0;
    v.at(1, 0, 0, 0) = -2.0;
    v.at(1, 1, 0, 0) = 0.5;
    const VolumeD s = activation_map({1.0, 2.0}, v);
    CHECK_EQ(s.at(0, 0, 0), 0.0);  // 3 - 4 rectifies to zero
    CHECK_EQ(s.at(1, 0, 0), 2.0);  // 1 + 1

    // zero importances annihilate the map regardless of activations
    const VolumeD z = activation_map({0.0, 0.0}, v);
    for (double x : z.v) CHECK_EQ(x, 0.0);

    CHECK_THROWS_AS(activation_map({1.0}, v), std::invalid_argument);
}

TEST_CASE("all-negative gradients annihilate the map end to end") {
    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor4 grads(3, 3, 2, 2), acts(3, 3, 2, 2);
        ts::fill_uniform(grads, rng, -2.0, -0.01);
        ts::fill_uniform(acts, rng, 0.0, 5.0);
        const VolumeD s = activation_map(neuron_importance(grads), acts);
        for (double x : s.v) CHECK_EQ(x, 0.0);
        const VolumeD f = finalize_map(s, {6, 4, 4});
        for (double x : f.v) CHECK_EQ(x, 0.0);
    }
}

TEST_CASE("finalize: normalize, cut at the threshold, keep zeros") {
    VolumeD s(2, 1, 1);
    s.at(0, 0, 0) = 5.0;
    s.at(1, 0, 0) = 0.4;  // 0.08 after normalization, below the 0.1 cut
    const VolumeD f = finalize_map(s, {2, 1, 1});
    CHECK_EQ(f.at(0, 0, 0), 1.0);
    CHECK_EQ(f.at(1, 0, 0), 0.0);

    const VolumeD u = finalize_map(VolumeD(3, 2, 1, 0.7), {3, 2, 1});
    for (double x : u.v) CHECK_EQ(x, 1.0);  // uniform map normalizes to one

    const VolumeD z = finalize_map(VolumeD(3, 2, 1), {3, 2, 1});
    for (double x : z.v) CHECK_EQ(x, 0.0);  // empty support stays empty

    CHECK_THROWS_AS(finalize_map(s, {2, 1, 1}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(finalize_map(s, {2, 1, 1}, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(finalize_map(VolumeD(), {2, 1, 1}), std::invalid_argument);
    CHECK_NOTHROW(finalize_map(s, {2, 1, 1}, 0.0));
}

TEST_CASE("finalized values stay in {0} or (threshold, 1]") {
    Rng rng(33);
    for (int trial = 0; trial < 100; ++trial) {
        VolumeD s(5, 4, 3);
        ts::fill_uniform(s, rng, 0.0, 3.0);
        for (double& x : s.v)
            if (rng.bernoulli(0.3)) x = 0.0;
        const double tau = trial % 2 ? 0.1 : rng.uniform(0.0, 0.9);
        const VolumeD same = finalize_map(s, {5, 4, 3}, tau);
        CHECK(thresholded_values(same, tau));
        const VolumeD up = finalize_map(s, {10, 8, 6}, tau);  // resampled path
        CHECK_EQ(up.nx, 10);
        CHECK(thresholded_values(up, tau));
    }
}

TEST_CASE("finalized map ignores positive scaling of the raw map") {
    Rng rng(34);
    for (int trial = 0; trial < 100; ++trial) {
        VolumeD s(4, 3, 3);
        ts::fill_uniform(s, rng, 0.0, 2.0);
        const VolumeD base = finalize_map(s, {8, 6, 6});
        VolumeD pow2 = s;
        for (double& x : pow2.v) x *= 8.0;
        CHECK_EQ(finalize_map(pow2, {8, 6, 6}).v, base.v);  // exact: power-of-two scale
        VolumeD odd = s;
        for (double& x : odd.v) x *= 3.7;
        const VolumeD near = finalize_map(odd, {8, 6, 6});
        for (std::size_t i = 0; i < base.v.size(); ++i)
            CHECK(std::abs(near.v[i] - base.v[i]) < 1e-9);
    }
}

TEST_CASE("compute_cam yields a rectified map at input scale") {
    Model m(ts::micro_config(1, 41));
    m.init_params();
    VolumeD v(32, 32, 16);
    Rng rng(42);
    ts::fill_uniform(v, rng);
    const FeatureStack st = m.forward(v);
    const CamResult cam = compute_cam(m, st, 1);
    REQUIRE_EQ(cam.alpha.size(), std::size_t(8));
    for (double a : cam.alpha) CHECK(a >= 0.0);
    CHECK_EQ(cam.raw.nx, 4);
    CHECK_EQ(cam.raw.ny, 4);
    CHECK_EQ(cam.raw.nz, 2);
    for (double x : cam.raw.v) CHECK(x >= 0.0);
    CHECK_EQ(cam.map.nx, 32);
    CHECK_EQ(cam.map.ny, 32);
    CHECK_EQ(cam.map.nz, 16);
    CHECK(thresholded_values(cam.map, 0.1));
    CHECK_THROWS_AS(compute_cam(m, st, 3), std::invalid_argument);
}

TEST_CASE("png writer round-trips through the decoder") {
    const auto dir = ts::make_temp_dir("png");
    std::vector<unsigned char> rgb(5 * 4 * 3);
    Rng rng(55);
    for (auto& b : rgb) b = static_cast<unsigned char>(rng.uniform_int(0, 255));
    write_rgb_png(dir / "img.png", 5, 4, rgb);

    const auto bytes = ts::read_bytes(dir / "img.png");
    REQUIRE(bytes.size() > 8);
    CHECK_EQ(bytes[0], 0x89);
    CHECK_EQ(bytes[1], 'P');

    const ts::DecodedPng img = ts::decode_stored_png(dir / "img.png");
    CHECK_EQ(img.width, 5);
    CHECK_EQ(img.height, 4);
    CHECK_EQ(img.rgb, rgb);

    CHECK_THROWS_AS(write_rgb_png(dir / "bad.png", 4, 4, rgb), std::invalid_argument);
}

TEST_CASE("overlay export: slice selection") {
    const auto dir = ts::make_temp_dir("overlay_slices");
    VolumeF ct(8, 6, 4);
    Rng rng(66);
    ts::fill_uniform(ct, rng);

    // empty map: only the middle slice
    auto written = write_overlay_slices(dir, "caseA", ct, VolumeD(8, 6, 4));
    REQUIRE_EQ(written.size(), std::size_t(1));
    CHECK_EQ(written[0].filename().string(), "caseA_z002.png");

    // support on z = 1 and z = 3 only
    VolumeD map(8, 6, 4);
    map.at(2, 3, 1) = 0.9;
    map.at(5, 1, 3) = 0.4;
    written = write_overlay_slices(dir, "caseB", ct, map);
    REQUIRE_EQ(written.size(), std::size_t(2));
    CHECK_EQ(written[0].filename().string(), "caseB_z001.png");
    CHECK_EQ(written[1].filename().string(), "caseB_z003.png");
    for (const auto& p : written) CHECK(std::filesystem::exists(p));

    CHECK_THROWS_AS(write_overlay_slices(dir, "caseC", ct, VolumeD(8, 6, 5)),
                    std::invalid_argument);
    CHECK_THROWS_AS(write_overlay_slices(dir, "caseC", ct, map, 1.5), std::invalid_argument);
}

TEST_CASE("overlay export: pixel values") {
    const auto dir = ts::make_temp_dir("overlay_pixels");
    VolumeF ct(6, 5, 3);
    Rng rng(67);
    ts::fill_uniform(ct, rng, -1.2, 1.2);  // includes values outside the window
    VolumeD map(6, 5, 3);
    map.at(1, 2, 1) = 1.0;
    map.at(4, 3, 1) = 0.5;

    // blend 0: the overlay collapses to the grayscale base image
    auto written = write_overlay_slices(dir, "gray", ct, map, 0.0);
    REQUIRE_EQ(written.size(), std::size_t(1));
    ts::DecodedPng img = ts::decode_stored_png(written[0]);
    REQUIRE_EQ(img.width, 6);
    REQUIRE_EQ(img.height, 5);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 6; ++x) {
            const double g01 = std::clamp((ct.at(x, y, 1) + 1.0) * 0.5, 0.0, 1.0);
            const auto gray = static_cast<unsigned char>(std::lround(255.0 * g01));
            const unsigned char* px = &img.rgb[(std::size_t(y) * 6 + x) * 3];
            CHECK_EQ(px[0], gray);
            CHECK_EQ(px[1], gray);
            CHECK_EQ(px[2], gray);
        }

    // full blend: active pixels turn warm (red up, blue down), inactive stay gray
    written = write_overlay_slices(dir, "warm", ct, map, 1.0);
    img = ts::decode_stored_png(written[0]);
    const unsigned char* hot = &img.rgb[(std::size_t(2) * 6 + 1) * 3];
    CHECK_EQ(hot[0], 255);
    CHECK_EQ(hot[2], 0);
    const unsigned char* half = &img.rgb[(std::size_t(3) * 6 + 4) * 3];
    CHECK(half[0] > half[2]);
    const double g00 = std::clamp((ct.at(0, 0, 1) + 1.0) * 0.5, 0.0, 1.0);
    const auto gray00 = static_cast<unsigned char>(std::lround(255.0 * g00));
    CHECK_EQ(img.rgb[0], gray00);
    CHECK_EQ(img.rgb[1], gray00);
    CHECK_EQ(img.rgb[2], gray00);
}
