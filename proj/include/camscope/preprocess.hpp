#pragma once
#include <array>

#include "camscope/tensor.hpp"
#include "camscope/volume_store.hpp"

namespace camscope {

// Radiological display window. Values at level map to 0, the interval
// [level - width/2, level + width/2] maps linearly onto [-1,1], everything
// outside is clamped. Defaults are the lung window.
struct WindowSetting {
    double level = -550.0;  // H.U.
    double width = 1500.0;  // H.U., > 0

    void validate() const;
};

struct LungVolume {
    VolumeF data;     // every voxel in [-1,1]; exactly 0 outside the mask
    VolumeMeta meta;  // value_kind == normalized
};

// Monotone, range-bounded windowing. Throws std::invalid_argument on a
// non-finite voxel.
VolumeF apply_lung_window(const VolumeF& ct, const WindowSetting& w = {});

// Element-wise gating; mask values must be exactly 0 or 1.
LungVolume apply_mask(const VolumeF& v_hat, const VolumeF& mask, const VolumeMeta& src_meta);

// Trilinear, voxel-center aligned. min/max of the output never leave the
// input's range.
LungVolume resample(const LungVolume& v, const std::array<int, 3>& target_shape);

// window -> mask -> resample, the fixed pipeline order. Masking precedes
// resampling so the lung boundary is gated before any interpolation.
LungVolume preprocess_case(const VolumeF& ct, const VolumeF& mask, const VolumeMeta& ct_meta,
                           const std::array<int, 3>& target_shape, const WindowSetting& w = {});

}  // namespace camscope
