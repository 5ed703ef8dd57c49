#include "camscope/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace camscope {

void Conv2dParams::resize(int ic, int oc) {
    in_ch = ic;
    out_ch = oc;
    w.assign(static_cast<std::size_t>(oc) * ic * 9, 0.0);
    b.assign(oc, 0.0);
}

void Conv3dParams::resize(int ic, int oc, int k, int dil) {
    if (k != 1 && k != 3) throw std::invalid_argument("conv3d: kernel size must be 1 or 3");
    in_ch = ic;
    out_ch = oc;
    ksize = k;
    dilation = dil;
    w.assign(static_cast<std::size_t>(oc) * ic * k * k * k, 0.0);
    b.assign(oc, 0.0);
}

Tensor4 conv2d_slice_forward(const Tensor4& in, const Conv2dParams& p, int stride) {
    if (in.c != p.in_ch) throw std::invalid_argument("conv2d: channel mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (in.nx % stride != 0 || in.ny % stride != 0)
        throw std::invalid_argument("conv2d: in-plane dims must divide by stride");
    const int ow = in.nx / stride, oh = in.ny / stride;
    Tensor4 out(p.out_ch, ow, oh, in.nz);
    for (int oc = 0; oc < p.out_ch; ++oc) {
        double* och = out.channel(oc);
        const double bias = p.b[oc];
        for (std::size_t i = 0; i < out.voxels(); ++i) och[i] = bias;
        for (int ic = 0; ic < p.in_ch; ++ic) {
            for (int s = 0; s < in.nz; ++s) {
                for (int oy = 0; oy < oh; ++oy) {
                    double* orow = &out.at(oc, 0, oy, s);
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= in.ny) continue;
                        const double* irow = &in.at(ic, 0, iy, s);
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wv = p.wt(oc, ic, ky, kx);
                            const int off = kx - 1;
                            // valid ox: 0 <= ox*stride + off <= nx-1
                            int lo = 0;
                            while (lo * stride + off < 0) ++lo;
                            int hi = ow - 1;
                            while (hi >= 0 && hi * stride + off > in.nx - 1) --hi;
                            for (int ox = lo; ox <= hi; ++ox)
                                orow[ox] += wv * irow[ox * stride + off];
                        }
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_slice_backward(const Tensor4& in, const Tensor4& gout, const Conv2dParams& p,
                           int stride, Tensor4& gin, Conv2dParams& gp) {
    const int ow = gout.nx, oh = gout.ny;
    if (!gin.same_shape(in)) throw std::invalid_argument("conv2d backward: gin shape");
    for (int oc = 0; oc < p.out_ch; ++oc) {
        const double* gch = gout.channel(oc);
        double acc = 0.0;
        for (std::size_t i = 0; i < gout.voxels(); ++i) acc += gch[i];
        gp.b[oc] += acc;
        for (int ic = 0; ic < p.in_ch; ++ic) {
            for (int s = 0; s < in.nz; ++s) {
                for (int oy = 0; oy < oh; ++oy) {
                    const double* grow = &gout.at(oc, 0, oy, s);
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= in.ny) continue;
                        const double* irow = &in.at(ic, 0, iy, s);
                        double* girow = &gin.at(ic, 0, iy, s);
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wv = p.wt(oc, ic, ky, kx);
                            double& gw = gp.wt(oc, ic, ky, kx);
                            const int off = kx - 1;
                            int lo = 0;
                            while (lo * stride + off < 0) ++lo;
                            int hi = ow - 1;
                            while (hi >= 0 && hi * stride + off > in.nx - 1) --hi;
                            double wacc = 0.0;
                            for (int ox = lo; ox <= hi; ++ox) {
                                const double g = grow[ox];
                                wacc += g * irow[ox * stride + off];
                                girow[ox * stride + off] += wv * g;
                            }
                            gw += wacc;
                        }
                    }
                }
            }
        }
    }
}

Tensor4 conv3d_forward(const Tensor4& in, const Conv3dParams& p) {
    if (in.c != p.in_ch) throw std::invalid_argument("conv3d: channel mismatch");
    Tensor4 out(p.out_ch, in.nx, in.ny, in.nz);
    if (p.ksize == 1) {
        for (int oc = 0; oc < p.out_ch; ++oc) {
            double* och = out.channel(oc);
            const double bias = p.b[oc];
            for (std::size_t i = 0; i < out.voxels(); ++i) och[i] = bias;
            for (int ic = 0; ic < p.in_ch; ++ic) {
                const double wv = p.w[static_cast<std::size_t>(oc) * p.in_ch + ic];
                const double* ich = in.channel(ic);
                for (std::size_t i = 0; i < out.voxels(); ++i) och[i] += wv * ich[i];
            }
        }
        return out;
    }
    const int d = p.dilation;
    for (int oc = 0; oc < p.out_ch; ++oc) {
        double* och = out.channel(oc);
        const double bias = p.b[oc];
        for (std::size_t i = 0; i < out.voxels(); ++i) och[i] = bias;
        for (int ic = 0; ic < p.in_ch; ++ic) {
            for (int z = 0; z < in.nz; ++z) {
                for (int kz = 0; kz < 3; ++kz) {
                    const int iz = z + d * (kz - 1);
                    if (iz < 0 || iz >= in.nz) continue;
                    for (int y = 0; y < in.ny; ++y) {
                        double* orow = &out.at(oc, 0, y, z);
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = y + d * (ky - 1);
                            if (iy < 0 || iy >= in.ny) continue;
                            const double* irow = &in.at(ic, 0, iy, iz);
                            for (int kx = 0; kx < 3; ++kx) {
                                const double wv = p.w[p.widx(oc, ic, kz, ky, kx)];
                                const int off = d * (kx - 1);
                                const int lo = std::max(0, -off);
                                const int hi = std::min(in.nx - 1, in.nx - 1 - off);
                                for (int x = lo; x <= hi; ++x) orow[x] += wv * irow[x + off];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

void conv3d_backward(const Tensor4& in, const Tensor4& gout, const Conv3dParams& p, Tensor4& gin,
                     Conv3dParams& gp) {
    if (!gin.same_shape(in)) throw std::invalid_argument("conv3d backward: gin shape");
    if (p.ksize == 1) {
        for (int oc = 0; oc < p.out_ch; ++oc) {
            const double* gch = gout.channel(oc);
            double acc = 0.0;
            for (std::size_t i = 0; i < gout.voxels(); ++i) acc += gch[i];
            gp.b[oc] += acc;
            for (int ic = 0; ic < p.in_ch; ++ic) {
                const double wv = p.w[static_cast<std::size_t>(oc) * p.in_ch + ic];
                const double* ich = in.channel(ic);
                double* gich = gin.channel(ic);
                double wacc = 0.0;
                for (std::size_t i = 0; i < gout.voxels(); ++i) {
                    wacc += gch[i] * ich[i];
                    gich[i] += wv * gch[i];
                }
                gp.w[static_cast<std::size_t>(oc) * p.in_ch + ic] += wacc;
            }
        }
        return;
    }
    const int d = p.dilation;
    for (int oc = 0; oc < p.out_ch; ++oc) {
        const double* gch = gout.channel(oc);
        double acc = 0.0;
        for (std::size_t i = 0; i < gout.voxels(); ++i) acc += gch[i];
        gp.b[oc] += acc;
        for (int ic = 0; ic < p.in_ch; ++ic) {
            for (int z = 0; z < in.nz; ++z) {
                for (int kz = 0; kz < 3; ++kz) {
                    const int iz = z + d * (kz - 1);
                    if (iz < 0 || iz >= in.nz) continue;
                    for (int y = 0; y < in.ny; ++y) {
                        const double* grow = &gout.at(oc, 0, y, z);
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = y + d * (ky - 1);
                            if (iy < 0 || iy >= in.ny) continue;
                            const double* irow = &in.at(ic, 0, iy, iz);
                            double* girow = &gin.at(ic, 0, iy, iz);
                            for (int kx = 0; kx < 3; ++kx) {
                                const double wv = p.w[p.widx(oc, ic, kz, ky, kx)];
                                const int off = d * (kx - 1);
                                const int lo = std::max(0, -off);
                                const int hi = std::min(in.nx - 1, in.nx - 1 - off);
                                double wacc = 0.0;
                                for (int x = lo; x <= hi; ++x) {
                                    wacc += grow[x] * irow[x + off];
                                    girow[x + off] += wv * grow[x];
                                }
                                gp.w[p.widx(oc, ic, kz, ky, kx)] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
}

Tensor4 relu(const Tensor4& in) {
    Tensor4 out = in;
    for (double& x : out.v) x = std::max(0.0, x);
    return out;
}

void relu_backward(const Tensor4& act, const Tensor4& gout, Tensor4& gin) {
    if (!gin.same_shape(act)) throw std::invalid_argument("relu backward: gin shape");
    for (std::size_t i = 0; i < act.v.size(); ++i) gin.v[i] += act.v[i] > 0.0 ? gout.v[i] : 0.0;
}

Tensor4 avgpool_slices(const Tensor4& in, int factor) {
    if (factor < 1 || in.nz % factor != 0)
        throw std::invalid_argument("avgpool_slices: slice count must divide by factor");
    Tensor4 out(in.c, in.nx, in.ny, in.nz / factor);
    const double inv = 1.0 / factor;
    const std::size_t plane = static_cast<std::size_t>(in.nx) * in.ny;
    for (int c = 0; c < in.c; ++c) {
        for (int z = 0; z < out.nz; ++z) {
            double* op = &out.at(c, 0, 0, z);
            for (std::size_t i = 0; i < plane; ++i) op[i] = 0.0;
            for (int k = 0; k < factor; ++k) {
                const double* ip = &in.at(c, 0, 0, z * factor + k);
                for (std::size_t i = 0; i < plane; ++i) op[i] += ip[i];
            }
            for (std::size_t i = 0; i < plane; ++i) op[i] *= inv;
        }
    }
    return out;
}

void avgpool_slices_backward(const Tensor4& gout, int factor, Tensor4& gin) {
    if (gin.nz != gout.nz * factor || gin.c != gout.c || gin.nx != gout.nx || gin.ny != gout.ny)
        throw std::invalid_argument("avgpool_slices backward: gin shape");
    const double inv = 1.0 / factor;
    const std::size_t plane = static_cast<std::size_t>(gout.nx) * gout.ny;
    for (int c = 0; c < gout.c; ++c)
        for (int z = 0; z < gout.nz; ++z) {
            const double* gp = &gout.at(c, 0, 0, z);
            for (int k = 0; k < factor; ++k) {
                double* gi = &gin.at(c, 0, 0, z * factor + k);
                for (std::size_t i = 0; i < plane; ++i) gi[i] += gp[i] * inv;
            }
        }
}

Tensor4 mixed_pool2_forward(const Tensor4& in, double s) {
    if (in.nx % 2 || in.ny % 2 || in.nz % 2)
        throw std::invalid_argument("mixed_pool2: spatial dims must be even");
    const double lam = sigmoid(s);
    Tensor4 out(in.c, in.nx / 2, in.ny / 2, in.nz / 2);
    for (int c = 0; c < in.c; ++c)
        for (int z = 0; z < out.nz; ++z)
            for (int y = 0; y < out.ny; ++y)
                for (int x = 0; x < out.nx; ++x) {
                    double mx = -std::numeric_limits<double>::infinity();
                    double sum = 0.0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const double v = in.at(c, 2 * x + dx, 2 * y + dy, 2 * z + dz);
                                sum += v;
                                if (v > mx) mx = v;
                            }
                    out.at(c, x, y, z) = lam * mx + (1.0 - lam) * sum * 0.125;
                }
    return out;
}

void mixed_pool2_backward(const Tensor4& in, const Tensor4& gout, double s, Tensor4& gin,
                          double& gs) {
    if (!gin.same_shape(in)) throw std::invalid_argument("mixed_pool2 backward: gin shape");
    const double lam = sigmoid(s);
    const double dlam = lam * (1.0 - lam);
    for (int c = 0; c < gout.c; ++c)
        for (int z = 0; z < gout.nz; ++z)
            for (int y = 0; y < gout.ny; ++y)
                for (int x = 0; x < gout.nx; ++x) {
                    double mx = -std::numeric_limits<double>::infinity();
                    int ax = 0, ay = 0, az = 0;
                    double sum = 0.0;
                    // scan order fixes the winner on ties (first maximum)
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const double v = in.at(c, 2 * x + dx, 2 * y + dy, 2 * z + dz);
                                sum += v;
                                if (v > mx) {
                                    mx = v;
                                    ax = 2 * x + dx;
                                    ay = 2 * y + dy;
                                    az = 2 * z + dz;
                                }
                            }
                    const double g = gout.at(c, x, y, z);
                    gin.at(c, ax, ay, az) += lam * g;
                    const double ga = (1.0 - lam) * g * 0.125;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                gin.at(c, 2 * x + dx, 2 * y + dy, 2 * z + dz) += ga;
                    gs += g * dlam * (mx - sum * 0.125);
                }
}

std::string to_string(Orientation o) {
    switch (o) {
        case Orientation::axial: return "ax";
        case Orientation::coronal: return "cor";
        case Orientation::sagittal: return "sag";
    }
    throw std::invalid_argument("bad orientation");
}

VolumeD permute_volume(const VolumeD& v, Orientation o) {
    switch (o) {
        case Orientation::axial: return v;
        case Orientation::coronal: {
            VolumeD p(v.nx, v.nz, v.ny);
            for (int s = 0; s < p.nz; ++s)
                for (int b = 0; b < p.ny; ++b)
                    for (int a = 0; a < p.nx; ++a) p.at(a, b, s) = v.at(a, s, b);
            return p;
        }
        case Orientation::sagittal: {
            VolumeD p(v.ny, v.nz, v.nx);
            for (int s = 0; s < p.nz; ++s)
                for (int b = 0; b < p.ny; ++b)
                    for (int a = 0; a < p.nx; ++a) p.at(a, b, s) = v.at(s, a, b);
            return p;
        }
    }
    throw std::invalid_argument("bad orientation");
}

Tensor4 unpermute_features(const Tensor4& enc, Orientation o) {
    switch (o) {
        case Orientation::axial: return enc;
        case Orientation::coronal: {
            Tensor4 out(enc.c, enc.nx, enc.nz, enc.ny);
            for (int c = 0; c < out.c; ++c)
                for (int z = 0; z < out.nz; ++z)
                    for (int y = 0; y < out.ny; ++y)
                        for (int x = 0; x < out.nx; ++x) out.at(c, x, y, z) = enc.at(c, x, z, y);
            return out;
        }
        case Orientation::sagittal: {
            Tensor4 out(enc.c, enc.nz, enc.nx, enc.ny);
            for (int c = 0; c < out.c; ++c)
                for (int z = 0; z < out.nz; ++z)
                    for (int y = 0; y < out.ny; ++y)
                        for (int x = 0; x < out.nx; ++x) out.at(c, x, y, z) = enc.at(c, y, z, x);
            return out;
        }
    }
    throw std::invalid_argument("bad orientation");
}

Tensor4 permute_features(const Tensor4& common, Orientation o) {
    switch (o) {
        case Orientation::axial: return common;
        case Orientation::coronal: {
            Tensor4 enc(common.c, common.nx, common.nz, common.ny);
            for (int c = 0; c < enc.c; ++c)
                for (int s = 0; s < enc.nz; ++s)
                    for (int b = 0; b < enc.ny; ++b)
                        for (int a = 0; a < enc.nx; ++a) enc.at(c, a, b, s) = common.at(c, a, s, b);
            return enc;
        }
        case Orientation::sagittal: {
            Tensor4 enc(common.c, common.ny, common.nz, common.nx);
            for (int c = 0; c < enc.c; ++c)
                for (int s = 0; s < enc.nz; ++s)
                    for (int b = 0; b < enc.ny; ++b)
                        for (int a = 0; a < enc.nx; ++a) enc.at(c, a, b, s) = common.at(c, s, a, b);
            return enc;
        }
    }
    throw std::invalid_argument("bad orientation");
}

}  // namespace camscope
