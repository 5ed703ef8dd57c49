#include <filesystem>
#include <fstream>
#include <string>

#include "camscope/errors.hpp"
#include "camscope/volume_store.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace camscope;
namespace fs = std::filesystem;

namespace {

VolumeMeta ramp_meta(const std::string& case_id) {
    VolumeMeta m;
    m.shape = {5, 4, 3};
    m.spacing_mm = {0.7, 0.7, 1.25};
    m.value_kind = ValueKind::hounsfield;
    m.case_id = case_id;
    m.label = 1;
    return m;
}

VolumeF ramp_volume() {
    VolumeF v(5, 4, 3);
    for (std::size_t i = 0; i < v.size(); ++i)
        v.v[i] = -1000.0f + 13.25f * static_cast<float>(i);
    v.at(0, 0, 0) = -0.0f;
    v.at(1, 0, 0) = 1e-38f;  // subnormal-ish edge, must survive bit-exactly
    return v;
}

}  // namespace

TEST_CASE("value kind and enum strings round-trip") {
    for (auto k : {ValueKind::hounsfield, ValueKind::normalized, ValueKind::mask,
                   ValueKind::heatmap})
        CHECK_EQ(value_kind_from_string(to_string(k)), k);
    CHECK_THROWS_AS(value_kind_from_string("velocity"), FormatError);

    for (auto l : {Lobe::LUL, Lobe::LLL, Lobe::RUL, Lobe::RML, Lobe::RLL})
        CHECK_EQ(lobe_from_string(to_string(l)), l);
    CHECK_THROWS_AS(lobe_from_string("LML"), FormatError);

    for (auto k : {LesionKind::ggo, LesionKind::consolidation})
        CHECK_EQ(lesion_kind_from_string(to_string(k)), k);
}

TEST_CASE("volume round-trip is bit exact") {
    const auto dir = ts::make_temp_dir("store_roundtrip");
    const VolumeF v = ramp_volume();
    const VolumeMeta m = ramp_meta("case_0001");
    write_volume(v, m, dir / "case_0001");

    const auto [rv, rm] = read_volume(dir / "case_0001");
    CHECK_EQ(rv.v, v.v);  // float bit pattern equality via operator==
    CHECK_EQ(rm.shape, m.shape);
    CHECK_EQ(rm.spacing_mm, m.spacing_mm);
    CHECK_EQ(rm.value_kind, m.value_kind);
    CHECK_EQ(rm.case_id, m.case_id);
    REQUIRE(rm.label.has_value());
    CHECK_EQ(*rm.label, 1);
}

TEST_CASE("write_volume rejects shape mismatch") {
    const auto dir = ts::make_temp_dir("store_mismatch");
    VolumeMeta m = ramp_meta("bad");
    m.shape = {4, 4, 3};
    CHECK_THROWS_AS(write_volume(ramp_volume(), m, dir / "bad"), std::invalid_argument);
}

TEST_CASE("truncated payload is a format error") {
    const auto dir = ts::make_temp_dir("store_truncated");
    write_volume(ramp_volume(), ramp_meta("t"), dir / "t");
    fs::resize_file(dir / "t.f32raw", fs::file_size(dir / "t.f32raw") - 6);
    CHECK_THROWS_AS(read_volume(dir / "t"), FormatError);
}

TEST_CASE("unknown value_kind in sidecar is a format error") {
    const auto dir = ts::make_temp_dir("store_kind");
    write_volume(ramp_volume(), ramp_meta("k"), dir / "k");

    auto j = nlohmann::json::parse(std::ifstream(dir / "k.meta.json"));
    j["value_kind"] = "velocity";
    std::ofstream(dir / "k.meta.json") << j.dump(2) << "\n";

    CHECK_THROWS_AS(read_volume(dir / "k"), FormatError);
}

TEST_CASE("missing sidecar or payload is a format error") {
    const auto dir = ts::make_temp_dir("store_missing");
    CHECK_THROWS_AS(read_volume(dir / "nope"), FormatError);

    write_volume(ramp_volume(), ramp_meta("p"), dir / "p");
    fs::remove(dir / "p.f32raw");
    CHECK_THROWS_AS(read_volume(dir / "p"), FormatError);
}

TEST_CASE("empty manifest round-trips") {
    const auto dir = ts::make_temp_dir("manifest_empty");
    DatasetManifest m;
    m.split = "val";
    m.seed = 99;
    write_manifest(m, dir / "manifest_val.json");
    const DatasetManifest r = read_manifest(dir / "manifest_val.json");
    CHECK_EQ(r.split, "val");
    CHECK_EQ(r.seed, std::uint64_t(99));
    CHECK(r.entries.empty());
    CHECK_EQ(r.base_dir, dir);
}

TEST_CASE("large manifest round-trips") {
    const auto dir = ts::make_temp_dir("manifest_large");
    DatasetManifest m;
    m.split = "train";
    m.seed = 12345;
    for (int i = 0; i < 964; ++i) {
        ManifestEntry e;
        e.case_id = "case_" + std::to_string(i);
        e.volume = e.case_id + "_ct";
        e.mask = e.case_id + "_mask";
        e.label = i % 2;
        if (e.label == 1) {
            LesionAnnotation l;
            l.lobe = static_cast<Lobe>(i % kNumLobes);
            l.center = {i % 40, (i * 7) % 40, (i * 3) % 20};
            l.radii = {2.0 + i % 5, 3.0, 2.5};
            l.kind = i % 3 == 0 ? LesionKind::consolidation : LesionKind::ggo;
            e.lesions.push_back(l);
        }
        m.entries.push_back(e);
    }
    write_manifest(m, dir / "manifest_train.json");
    const DatasetManifest r = read_manifest(dir / "manifest_train.json", /*check_paths=*/false);
    REQUIRE_EQ(r.entries.size(), std::size_t(964));
    for (std::size_t i = 0; i < r.entries.size(); ++i) {
        CHECK_EQ(r.entries[i].case_id, m.entries[i].case_id);
        CHECK_EQ(r.entries[i].volume, m.entries[i].volume);
        CHECK_EQ(r.entries[i].label, m.entries[i].label);
        REQUIRE_EQ(r.entries[i].lesions.size(), m.entries[i].lesions.size());
        if (!r.entries[i].lesions.empty()) {
            CHECK_EQ(r.entries[i].lesions[0].lobe, m.entries[i].lesions[0].lobe);
            CHECK_EQ(r.entries[i].lesions[0].center, m.entries[i].lesions[0].center);
            CHECK_EQ(r.entries[i].lesions[0].radii, m.entries[i].lesions[0].radii);
            CHECK_EQ(r.entries[i].lesions[0].kind, m.entries[i].lesions[0].kind);
        }
    }
}

TEST_CASE("duplicate case_id is rejected on write and read") {
    const auto dir = ts::make_temp_dir("manifest_dup");
    DatasetManifest m;
    m.split = "test";
    ManifestEntry e;
    e.case_id = "twin";
    e.volume = "twin_ct";
    e.mask = "twin_mask";
    m.entries = {e, e};
    CHECK_THROWS_AS(write_manifest(m, dir / "manifest_test.json"), std::invalid_argument);

    nlohmann::json entry{{"case_id", "twin"}, {"volume", "twin_ct"}, {"mask", "twin_mask"},
                         {"label", 0},        {"lesions", nlohmann::json::array()}};
    nlohmann::json j{{"split", "test"}, {"seed", 0}, {"entries", {entry, entry}}};
    std::ofstream(dir / "hand.json") << j.dump(2);
    CHECK_THROWS_AS(read_manifest(dir / "hand.json", /*check_paths=*/false),
                    std::invalid_argument);
}

TEST_CASE("manifest read validates schema") {
    const auto dir = ts::make_temp_dir("manifest_schema");
    std::ofstream(dir / "garbled.json") << "{ not json";
    CHECK_THROWS_AS(read_manifest(dir / "garbled.json"), FormatError);

    nlohmann::json j{{"split", "holdout"}, {"seed", 0}, {"entries", nlohmann::json::array()}};
    std::ofstream(dir / "split.json") << j.dump(2);
    CHECK_THROWS_AS(read_manifest(dir / "split.json"), FormatError);

    CHECK_THROWS_AS(read_manifest(dir / "absent.json"), FormatError);
}

TEST_CASE("check_paths flags dangling volume references") {
    const auto dir = ts::make_temp_dir("manifest_paths");
    DatasetManifest m;
    m.split = "train";
    ManifestEntry e;
    e.case_id = "c0";
    e.volume = "c0_ct";
    e.mask = "c0_mask";
    m.entries = {e};
    write_manifest(m, dir / "manifest_train.json");
    CHECK_THROWS_AS(read_manifest(dir / "manifest_train.json"), FormatError);
    CHECK_NOTHROW(read_manifest(dir / "manifest_train.json", /*check_paths=*/false));

    VolumeMeta vm;
    vm.shape = {2, 2, 2};
    vm.case_id = "c0";
    write_volume(VolumeF(2, 2, 2), vm, dir / "c0_ct");
    vm.value_kind = ValueKind::mask;
    write_volume(VolumeF(2, 2, 2), vm, dir / "c0_mask");
    CHECK_NOTHROW(read_manifest(dir / "manifest_train.json"));
}
