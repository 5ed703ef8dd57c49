#pragma once
#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "camscope/tensor.hpp"

namespace camscope {

// ---------------------------------------------------------------------------
// On-disk layout: <stem>.f32raw (little-endian binary32, x-fastest) plus
// <stem>.meta.json sidecar. Manifests are plain JSON. Reads are bit-exact.
// ---------------------------------------------------------------------------

enum class ValueKind { hounsfield, normalized, mask, heatmap };

std::string to_string(ValueKind k);
ValueKind value_kind_from_string(const std::string& s);  // FormatError on unknown

struct VolumeMeta {
    std::array<int, 3> shape{0, 0, 0};            // voxels, (x,y,z)
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    ValueKind value_kind = ValueKind::hounsfield;
    std::string case_id;
    std::optional<int> label;  // {0,1}; present only for classification cases

    void validate() const;  // throws std::invalid_argument
};

enum class Lobe { LUL, LLL, RUL, RML, RLL };
constexpr int kNumLobes = 5;

std::string to_string(Lobe l);
Lobe lobe_from_string(const std::string& s);

enum class LesionKind { ggo, consolidation };

std::string to_string(LesionKind k);
LesionKind lesion_kind_from_string(const std::string& s);

struct LesionAnnotation {
    Lobe lobe = Lobe::LUL;
    std::array<int, 3> center{0, 0, 0};     // voxel coordinates
    std::array<double, 3> radii{1, 1, 1};   // voxels, > 0
    LesionKind kind = LesionKind::ggo;
};

struct ManifestEntry {
    std::string case_id;
    std::string volume;  // path stem, relative to the manifest directory
    std::string mask;    // path stem, relative to the manifest directory
    int label = 0;
    std::vector<LesionAnnotation> lesions;
};

struct DatasetManifest {
    std::string split;  // train | val | test | all
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> entries;

    // directory the manifest was loaded from; entry paths resolve against it
    std::filesystem::path base_dir;

    std::filesystem::path volume_stem(const ManifestEntry& e) const { return base_dir / e.volume; }
    std::filesystem::path mask_stem(const ManifestEntry& e) const { return base_dir / e.mask; }
};

// Writes <stem>.f32raw + <stem>.meta.json. Throws std::invalid_argument when
// the tensor shape disagrees with meta.shape, IoError when a file cannot be
// written.
void write_volume(const VolumeF& data, const VolumeMeta& meta,
                  const std::filesystem::path& stem);

// Returns exactly the stored values. FormatError on a missing sidecar or
// payload, a payload whose byte count disagrees with the sidecar shape, or an
// unknown value_kind.
std::pair<VolumeF, VolumeMeta> read_volume(const std::filesystem::path& stem);

// Duplicate case_id is rejected on both write and read. check_paths verifies
// that every referenced payload exists next to the manifest.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path, bool check_paths = true);

}  // namespace camscope
