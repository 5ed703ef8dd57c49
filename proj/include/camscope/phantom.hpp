#pragma once
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "camscope/tensor.hpp"
#include "camscope/volume_store.hpp"

namespace camscope {

// ---------------------------------------------------------------------------
// Synthetic annotated lung phantoms. Axis semantics used throughout:
//   x: patient right -> left  (the right lung sits at low x)
//   y: anterior -> posterior  (posterior = high y)
//   z: inferior -> superior   (upper lobes = high z)
// Lungs are two axis-aligned ellipsoids with cosine-ramped boundaries;
// lesions are smaller ellipsoids placed analytically inside them, so lesion
// support is contained in the mask by construction.
// ---------------------------------------------------------------------------

struct PhantomSpec {
    std::array<int, 3> volume_shape{96, 96, 48};
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    int n_typical = 0;
    int n_nontypical = 0;
    std::array<int, 2> lesion_count_range{1, 4};
    std::array<double, 2> lesion_radius_range_mm{4.0, 10.0};
    double noise_sigma = 40.0;  // H.U.
    double train_frac = 0.64;
    double val_frac = 0.16;
    std::uint64_t seed = 0;

    void validate() const;
};

PhantomSpec phantom_spec_from_json(const std::string& text);
PhantomSpec phantom_spec_from_json_file(const std::filesystem::path& path);
void phantom_spec_to_json_file(const PhantomSpec& spec, const std::filesystem::path& path);

struct PhantomCase {
    VolumeF volume;  // H.U.
    VolumeF mask;    // {0,1}
    int label = 0;   // 1 iff lesions non-empty
    std::vector<LesionAnnotation> lesions;
};

// Voxel labels: 0 = outside, 1..5 = Lobe enum value + 1.
using LobeMap = Grid3<std::uint8_t>;
constexpr std::uint8_t lobe_label(Lobe l) { return static_cast<std::uint8_t>(l) + 1; }

// Splits the two mask components by axial planes: left lung into halves at
// its centroid, right lung into near-equal slice-count thirds of its
// z-extent. Requires a non-empty mask with exactly two components.
LobeMap lobe_partition(const VolumeF& mask);

// Deterministic in (spec.seed, case_index). Lesions favour posterior and
// inferior placement with probability 0.7.
PhantomCase generate_case(const PhantomSpec& spec, int case_index, int label);

struct GeneratedDataset {
    DatasetManifest train, val, test;
    std::filesystem::path out_dir;
};

// Writes every case via the volume store plus manifest_{train,val,test}.json
// and a combined manifest.json (split = "all").
GeneratedDataset generate_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir);

// Order-independent content digest of all dataset files under a directory.
std::uint64_t dataset_digest(const std::filesystem::path& dir);

}  // namespace camscope
