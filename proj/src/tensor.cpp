#include "camscope/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace camscope {

namespace {

// source coordinate of target voxel center i under center alignment
inline double src_coord(int i, int n_src, int n_tgt) {
    return (static_cast<double>(i) + 0.5) * n_src / n_tgt - 0.5;
}

struct LinTap {
    int lo, hi;
    double w_hi;  // weight of hi sample; lo gets 1 - w_hi
};

inline LinTap make_tap(int i, int n_src, int n_tgt) {
    double s = src_coord(i, n_src, n_tgt);
    s = std::clamp(s, 0.0, static_cast<double>(n_src - 1));
    int lo = static_cast<int>(std::floor(s));
    int hi = std::min(lo + 1, n_src - 1);
    return {lo, hi, s - lo};
}

}  // namespace

template <typename T>
Grid3<T> resample_trilinear(const Grid3<T>& src, int tx, int ty, int tz) {
    if (src.empty()) throw std::invalid_argument("resample_trilinear: empty input");
    if (tx < 1 || ty < 1 || tz < 1)
        throw std::invalid_argument("resample_trilinear: target shape must be >= 1");

    std::vector<LinTap> xt(tx), yt(ty), zt(tz);
    for (int i = 0; i < tx; ++i) xt[i] = make_tap(i, src.nx, tx);
    for (int i = 0; i < ty; ++i) yt[i] = make_tap(i, src.ny, ty);
    for (int i = 0; i < tz; ++i) zt[i] = make_tap(i, src.nz, tz);

    Grid3<T> out(tx, ty, tz);
    for (int z = 0; z < tz; ++z) {
        const LinTap& tzp = zt[z];
        for (int y = 0; y < ty; ++y) {
            const LinTap& typ = yt[y];
            for (int x = 0; x < tx; ++x) {
                const LinTap& txp = xt[x];
                double c00 = (1.0 - txp.w_hi) * src.at(txp.lo, typ.lo, tzp.lo) +
                             txp.w_hi * src.at(txp.hi, typ.lo, tzp.lo);
                double c10 = (1.0 - txp.w_hi) * src.at(txp.lo, typ.hi, tzp.lo) +
                             txp.w_hi * src.at(txp.hi, typ.hi, tzp.lo);
                double c01 = (1.0 - txp.w_hi) * src.at(txp.lo, typ.lo, tzp.hi) +
                             txp.w_hi * src.at(txp.hi, typ.lo, tzp.hi);
                double c11 = (1.0 - txp.w_hi) * src.at(txp.lo, typ.hi, tzp.hi) +
                             txp.w_hi * src.at(txp.hi, typ.hi, tzp.hi);
                double c0 = (1.0 - typ.w_hi) * c00 + typ.w_hi * c10;
                double c1 = (1.0 - typ.w_hi) * c01 + typ.w_hi * c11;
                out.at(x, y, z) = static_cast<T>((1.0 - tzp.w_hi) * c0 + tzp.w_hi * c1);
            }
        }
    }
    return out;
}

template Grid3<float> resample_trilinear(const Grid3<float>&, int, int, int);
template Grid3<double> resample_trilinear(const Grid3<double>&, int, int, int);

VolumeD to_double(const VolumeF& v) {
    VolumeD out(v.nx, v.ny, v.nz);
    std::copy(v.v.begin(), v.v.end(), out.v.begin());
    return out;
}

VolumeF to_float(const VolumeD& v) {
    VolumeF out(v.nx, v.ny, v.nz);
    for (std::size_t i = 0; i < v.v.size(); ++i) out.v[i] = static_cast<float>(v.v[i]);
    return out;
}

Tensor4 volume_to_tensor(const VolumeD& v) {
    Tensor4 t(1, v.nx, v.ny, v.nz);
    t.v = v.v;
    return t;
}

VolumeD tensor_channel_to_volume(const Tensor4& t, int ch) {
    VolumeD out(t.nx, t.ny, t.nz);
    const double* p = t.channel(ch);
    std::copy(p, p + t.voxels(), out.v.begin());
    return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace camscope
