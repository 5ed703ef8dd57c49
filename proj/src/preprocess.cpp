#include "camscope/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace camscope {

void WindowSetting::validate() const {
    if (!(width > 0)) throw std::invalid_argument("WindowSetting: width must be > 0");
    if (!std::isfinite(level) || !std::isfinite(width))
        throw std::invalid_argument("WindowSetting: non-finite window");
}

VolumeF apply_lung_window(const VolumeF& ct, const WindowSetting& w) {
    w.validate();
    VolumeF out(ct.nx, ct.ny, ct.nz);
    const double scale = 2.0 / w.width;
    for (std::size_t i = 0; i < ct.v.size(); ++i) {
        const float hu = ct.v[i];
        if (!std::isfinite(hu))
            throw std::invalid_argument("apply_lung_window: non-finite H.U. value");
        const double t = (static_cast<double>(hu) - w.level) * scale;
        out.v[i] = static_cast<float>(std::clamp(t, -1.0, 1.0));
    }
    return out;
}

LungVolume apply_mask(const VolumeF& v_hat, const VolumeF& mask, const VolumeMeta& src_meta) {
    if (!v_hat.same_shape(mask))
        throw std::invalid_argument("apply_mask: shape mismatch between volume and mask");
    LungVolume out;
    out.data = VolumeF(v_hat.nx, v_hat.ny, v_hat.nz);
    for (std::size_t i = 0; i < v_hat.v.size(); ++i) {
        const float m = mask.v[i];
        if (m != 0.0f && m != 1.0f)
            throw std::invalid_argument("apply_mask: mask value outside {0,1}");
        out.data.v[i] = m == 1.0f ? v_hat.v[i] : 0.0f;
    }
    out.meta = src_meta;
    out.meta.value_kind = ValueKind::normalized;
    return out;
}

LungVolume resample(const LungVolume& v, const std::array<int, 3>& target_shape) {
    LungVolume out;
    out.data = resample_trilinear(v.data, target_shape[0], target_shape[1], target_shape[2]);
    out.meta = v.meta;
    // keep the physical extent: spacing scales with the shape change
    for (int d = 0; d < 3; ++d) {
        const int src = d == 0 ? v.data.nx : d == 1 ? v.data.ny : v.data.nz;
        out.meta.spacing_mm[d] = v.meta.spacing_mm[d] * src / target_shape[d];
        out.meta.shape[d] = target_shape[d];
    }
    return out;
}

LungVolume preprocess_case(const VolumeF& ct, const VolumeF& mask, const VolumeMeta& ct_meta,
                           const std::array<int, 3>& target_shape, const WindowSetting& w) {
    LungVolume gated = apply_mask(apply_lung_window(ct, w), mask, ct_meta);
    if (gated.data.nx == target_shape[0] && gated.data.ny == target_shape[1] &&
        gated.data.nz == target_shape[2])
        return gated;
    return resample(gated, target_shape);
}

}  // namespace camscope
