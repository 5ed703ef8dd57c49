#pragma once
#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "camscope/model.hpp"
#include "camscope/tensor.hpp"

namespace camscope {

// ---------------------------------------------------------------------------
// Positive-gradient activation mapping. Channel importances are spatial means
// of the ReLU'd score gradients at the chosen layer; the map is the ReLU'd
// importance-weighted channel sum, normalized by its maximum, thresholded,
// upsampled and re-thresholded.
// ---------------------------------------------------------------------------

// Source layer for the maps: last convolution output before the final pooling
// of the 3D encoder.
std::string select_layer();

// alpha_c = (1/N) * sum_x max(0, dy/dv_c(x))
std::vector<double> neuron_importance(const Tensor4& score_grads);

// S(x) = max(0, sum_c alpha_c * v_c(x))
VolumeD activation_map(const std::vector<double>& alpha, const Tensor4& v);

// normalize by the global max (all-zero stays all-zero), zero out values <=
// threshold, trilinear-upsample to target_shape, then re-threshold.
VolumeD finalize_map(const VolumeD& s, std::array<int, 3> target_shape, double threshold = 0.1);

struct CamResult {
    std::vector<double> alpha;
    VolumeD raw;  // unnormalized map at feature-grid scale
    VolumeD map;  // finalized, at model input scale
};
CamResult compute_cam(const Model& model, const FeatureStack& stack, int class_index,
                      double threshold = 0.1);

// Axial overlay PNGs: grayscale base from v_hat in [-1,1], warm tint where the
// map is active, written as <case_id>_z<index>.png. Exports every slice that
// intersects the active support, or the middle slice when the map is empty.
// Returns the written paths.
std::vector<std::filesystem::path> write_overlay_slices(const std::filesystem::path& dir,
                                                        const std::string& case_id,
                                                        const VolumeF& v_hat, const VolumeD& map,
                                                        double blend = 0.5);

// Minimal RGB PNG writer (8-bit, no compression beyond stored deflate blocks).
void write_rgb_png(const std::filesystem::path& path, int width, int height,
                   const std::vector<unsigned char>& rgb);

}  // namespace camscope
