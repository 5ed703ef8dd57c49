#pragma once
#include <cmath>
#include <string>
#include <vector>

#include "camscope/tensor.hpp"

namespace camscope {

// ---------------------------------------------------------------------------
// Plain-loop layer primitives with hand-written backward passes. All state is
// explicit; backward functions take the cached forward inputs they need and
// accumulate (+=) into the gradient buffers.
// ---------------------------------------------------------------------------

struct Conv2dParams {
    int in_ch = 0, out_ch = 0;
    std::vector<double> w;  // [oc][ic][ky][kx], 3x3
    std::vector<double> b;  // [oc]

    void resize(int ic, int oc);
    double& wt(int oc, int ic, int ky, int kx) { return w[((oc * in_ch + ic) * 3 + ky) * 3 + kx]; }
    double wt(int oc, int ic, int ky, int kx) const {
        return w[((oc * in_ch + ic) * 3 + ky) * 3 + kx];
    }
};

struct Conv3dParams {
    int in_ch = 0, out_ch = 0;
    int ksize = 3;     // 1 or 3
    int dilation = 1;  // taps at +/- dilation for ksize 3; padding keeps shape
    std::vector<double> w;  // [oc][ic][kz][ky][kx]
    std::vector<double> b;  // [oc]

    void resize(int ic, int oc, int k, int dil);
    std::size_t widx(int oc, int ic, int kz, int ky, int kx) const {
        return (((static_cast<std::size_t>(oc) * in_ch + ic) * ksize + kz) * ksize + ky) * ksize +
               kx;
    }
};

// Per-slice 2D convolution: 3x3 kernel, zero padding 1, given in-plane stride;
// slices run along the nz axis and share weights.
Tensor4 conv2d_slice_forward(const Tensor4& in, const Conv2dParams& p, int stride);
void conv2d_slice_backward(const Tensor4& in, const Tensor4& gout, const Conv2dParams& p,
                           int stride, Tensor4& gin, Conv2dParams& gp);

// 3D convolution, zero padding = dilation (shape preserving).
Tensor4 conv3d_forward(const Tensor4& in, const Conv3dParams& p);
void conv3d_backward(const Tensor4& in, const Tensor4& gout, const Conv3dParams& p, Tensor4& gin,
                     Conv3dParams& gp);

Tensor4 relu(const Tensor4& in);
// act is the cached post-ReLU tensor; gradient passes where act > 0
void relu_backward(const Tensor4& act, const Tensor4& gout, Tensor4& gin);

// average pooling along the slice (nz) axis by an integral factor
Tensor4 avgpool_slices(const Tensor4& in, int factor);
void avgpool_slices_backward(const Tensor4& gout, int factor, Tensor4& gin);

// mixed pooling over 2x2x2 blocks: sigmoid(s)*max + (1-sigmoid(s))*avg.
// Throws std::invalid_argument when a spatial dim is odd.
Tensor4 mixed_pool2_forward(const Tensor4& in, double s);
void mixed_pool2_backward(const Tensor4& in, const Tensor4& gout, double s, Tensor4& gin,
                          double& gs);

enum class Orientation { axial, coronal, sagittal };
std::string to_string(Orientation o);

// Encoder-space transforms. Axial slices are (x,y) planes along z, coronal
// (x,z) planes along y, sagittal (y,z) planes along x; the permuted tensor
// always convolves in its first two axes and slices along the third.
VolumeD permute_volume(const VolumeD& v, Orientation o);
Tensor4 unpermute_features(const Tensor4& enc, Orientation o);  // encoder -> common grid
Tensor4 permute_features(const Tensor4& common, Orientation o);  // common -> encoder

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace camscope
