#pragma once
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace camscope {

// ---------------------------------------------------------------------------
// Axis convention (repo-wide): volumes are indexed (x,y,z) with x fastest in
// memory, i.e. flat index = x + nx*(y + ny*z). Feature tensors add a channel
// axis that is slowest, so every channel is a contiguous x-fastest volume.
// ---------------------------------------------------------------------------

template <typename T>
struct Grid3 {
    int nx = 0, ny = 0, nz = 0;
    std::vector<T> v;

    Grid3() = default;
    Grid3(int nx_, int ny_, int nz_, T fill = T{})
        : nx(nx_), ny(ny_), nz(nz_) {
        if (nx_ < 0 || ny_ < 0 || nz_ < 0)
            throw std::invalid_argument("Grid3: negative dimension");
        v.assign(static_cast<std::size_t>(nx_) * ny_ * nz_, fill);
    }

    std::size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    std::size_t idx(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) +
                                               static_cast<std::size_t>(ny) * z);
    }
    T& at(int x, int y, int z) { return v[idx(x, y, z)]; }
    const T& at(int x, int y, int z) const { return v[idx(x, y, z)]; }

    bool same_shape(const Grid3& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz;
    }
};

using VolumeF = Grid3<float>;   // on-disk payloads, H.U. volumes, masks
using VolumeD = Grid3<double>;  // model inputs, heatmaps

// 4D feature tensor (C, W, H, D), channel slowest.
struct Tensor4 {
    int c = 0, nx = 0, ny = 0, nz = 0;
    std::vector<double> v;

    Tensor4() = default;
    Tensor4(int c_, int nx_, int ny_, int nz_, double fill = 0.0)
        : c(c_), nx(nx_), ny(ny_), nz(nz_) {
        if (c_ < 0 || nx_ < 0 || ny_ < 0 || nz_ < 0)
            throw std::invalid_argument("Tensor4: negative dimension");
        v.assign(static_cast<std::size_t>(c_) * nx_ * ny_ * nz_, fill);
    }

    std::size_t size() const { return v.size(); }
    std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }

    std::size_t idx(int ch, int x, int y, int z) const {
        return (static_cast<std::size_t>(ch) * nz + z) * ny * nx +
               static_cast<std::size_t>(y) * nx + x;
    }
    double& at(int ch, int x, int y, int z) { return v[idx(ch, x, y, z)]; }
    const double& at(int ch, int x, int y, int z) const { return v[idx(ch, x, y, z)]; }

    double* channel(int ch) { return v.data() + static_cast<std::size_t>(ch) * voxels(); }
    const double* channel(int ch) const {
        return v.data() + static_cast<std::size_t>(ch) * voxels();
    }

    bool same_shape(const Tensor4& o) const {
        return c == o.c && nx == o.nx && ny == o.ny && nz == o.nz;
    }
};

// Trilinear resampling with voxel-center alignment and edge clamping.
// Output values never leave [min(v), max(v)]. Throws on empty input or a
// non-positive target shape.
template <typename T>
Grid3<T> resample_trilinear(const Grid3<T>& src, int tx, int ty, int tz);

VolumeD to_double(const VolumeF& v);
VolumeF to_float(const VolumeD& v);

Tensor4 volume_to_tensor(const VolumeD& v);  // single-channel view copy
VolumeD tensor_channel_to_volume(const Tensor4& t, int ch);

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace camscope
