#pragma once
#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "camscope/layers.hpp"
#include "camscope/tensor.hpp"

namespace camscope {

// ---------------------------------------------------------------------------
// 2.5D classifier: three axis-wise 2D encoders -> channel concat -> two-stage
// 3D encoder (dilated 3x3x3 conv, 1x1x1 conv, ReLU, learnable mixed pooling)
// with optional channel+spatial attention gates, global average pooling and a
// two-way affine head.
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::array<int, 3> input_shape{192, 192, 64};  // x, y, z
    int enc2d_channels = 32;   // final width of each 2D encoder
    int fused_channels = 96;   // must equal 3 * enc2d_channels
    int enc3d_channels = 256;  // width after the second 3D stage
    int mlp_reduction = 8;     // r in the channel-attention bottleneck
    int attention_blocks = 1;  // 0..6, assigned deepest-first
    int dilation_rate = 2;
    std::uint64_t seed = 0;

    static ModelConfig full();  // full scale: 192x192x64 input, 32/96/256 channels
    static ModelConfig desk();  // 96x96x48 input, 4/12/24 channels

    void validate() const;  // throws std::invalid_argument

    // the four 2D layers widen as [C/4, C/2, C, C] with strides [2,2,1,1]
    std::array<int, 4> enc2d_widths() const;
    static constexpr std::array<int, 4> enc2d_strides{2, 2, 1, 1};
    int stage1_channels() const { return enc3d_channels / 2; }
    std::array<int, 3> fused_shape() const;  // spatial dims of the concat grid
    std::array<int, 3> final_shape() const;  // spatial dims after stage 2 pooling
};

void to_json_file(const ModelConfig& cfg, const std::filesystem::path& path);
ModelConfig model_config_from_json(const std::string& text);
std::string model_config_to_json(const ModelConfig& cfg);

// Candidate gating sites ordered deepest-first; config.attention_blocks
// enables the first n of them.
struct GatingSite {
    std::string name;  // cached-tensor name of the gated input
    int channels = 0;
};
std::vector<GatingSite> gating_sites(const ModelConfig& cfg);

struct AttentionParams {
    int channels = 0, reduced = 0;
    std::vector<double> w0;  // [C][C/r], shared by both pooled branches, no bias
    std::vector<double> w1;  // [C/r][C], shared, no bias
    Conv3dParams spatial;    // 2 -> 1 channels, 3x3x3, with bias
    void resize(int c, int r);
};

struct StageParams {
    Conv3dParams dconv;   // dilated 3x3x3
    Conv3dParams pconv;   // 1x1x1
    double pool_s = 0.0;  // mixed-pooling mixing logit
};

struct ModelParams {
    std::array<std::array<Conv2dParams, 4>, 3> enc2d;  // [orientation][layer]
    StageParams stage1, stage2;
    std::array<AttentionParams, 6> attn;  // one per candidate site, always allocated
    std::vector<double> head_w;           // [2][enc3d_channels]
    std::vector<double> head_b;           // [2]
};

ModelParams make_params(const ModelConfig& cfg);  // zero-filled, right shapes

// Visits every parameter tensor in a fixed order (name, data, count).
void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, double*, std::size_t)>& fn);
void for_each_tensor(const ModelParams& p,
                     const std::function<void(const std::string&, const double*, std::size_t)>& fn);

// Per-block attention intermediates kept for inspection and tests.
struct AttentionState {
    std::string site;       // name of the gated tensor
    std::vector<double> m;  // channel attention, length C
    Tensor4 map;            // spatial attention, 1 channel
};

// Every intermediate tensor of one forward pass, keyed by layer name. 2D
// encoder activations are cached in their permuted (encoder) space; ".out"
// tensors and everything 3D live on the common grid.
struct FeatureStack {
    std::deque<std::pair<std::string, Tensor4>> tensors;  // deque: stable refs while growing
    std::map<std::string, std::size_t> index;
    std::vector<AttentionState> attention;  // deepest-first
    std::array<double, 2> logits{0.0, 0.0};
    std::array<double, 2> likelihoods{0.5, 0.5};
    int predicted = 0;

    bool has(const std::string& name) const { return index.count(name) != 0; }
    const Tensor4& get(const std::string& name) const;
    void put(const std::string& name, Tensor4 t);
};

// Free-standing pieces of the pipeline (also used by the bindings and tests).
Tensor4 fuse_concat(const Tensor4& ax, const Tensor4& cor, const Tensor4& sag);
std::vector<double> channel_attention(const Tensor4& f, const AttentionParams& ap);
Tensor4 spatial_attention(const Tensor4& fprime, const AttentionParams& ap);
Tensor4 apply_attention(const Tensor4& f, const std::vector<double>& m, const Tensor4& map);

struct ClassifyResult {
    std::array<double, 2> logits;
    std::array<double, 2> likelihoods;
    int predicted = 0;  // class 1 only when p1 > p0
};
ClassifyResult classify_features(const Tensor4& f_final, const std::vector<double>& head_w,
                                 const std::vector<double>& head_b);

class Model {
public:
    ModelConfig config;
    ModelParams params;

    explicit Model(ModelConfig cfg);
    void init_params();  // deterministic, seeded per tensor from config.seed

    // Optionally substitutes the cached tensor `name` before downstream layers
    // consume it (used by the finite-difference oracle).
    struct Override {
        std::string name;
        const Tensor4* value = nullptr;
    };
    FeatureStack forward(const VolumeD& v_hat, const Override* ov = nullptr) const;

    Tensor4 encode_2d(const VolumeD& v_hat, Orientation o) const;  // common-grid output
    Tensor4 encode_3d(const Tensor4& f_con) const;                 // both stages, no gates

    struct BackwardResult {
        ModelParams grads;
        std::deque<std::pair<std::string, Tensor4>> act_grads;
        std::map<std::string, std::size_t> index;
        const Tensor4& grad(const std::string& name) const;
        bool has(const std::string& name) const { return index.count(name) != 0; }
    };
    BackwardResult backward(const FeatureStack& stack, const std::array<double, 2>& dlogits) const;

    // d(pre-softmax logit of class_index) / d(activations of `layer`)
    Tensor4 score_gradient(const FeatureStack& stack, int class_index,
                           const std::string& layer) const;
};

// Activation-mapping source layer: the last convolution output before the
// final pooling of the 3D encoder.
std::string cam_layer_name();

struct CheckpointExtra {
    int best_epoch = 0;
    double val_accuracy = 0.0;
    std::string train_config_json;  // verbatim, may be empty
};
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointExtra& extra);
Model load_checkpoint(const std::filesystem::path& path, CheckpointExtra* extra = nullptr);

}  // namespace camscope
