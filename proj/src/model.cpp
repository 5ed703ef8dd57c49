#include "camscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

#include "camscope/errors.hpp"
#include "camscope/rng.hpp"

namespace camscope {

using nlohmann::json;

// ----------------------------------------------------------------- config ---

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.input_shape = {96, 96, 48};
    c.enc2d_channels = 4;
    c.fused_channels = 12;
    c.enc3d_channels = 24;
    c.mlp_reduction = 4;
    return c;
}

void ModelConfig::validate() const {
    for (int d : input_shape)
        if (d <= 0 || d % 16 != 0)
            throw std::invalid_argument("model config: input dims must be positive multiples of 16");
    if (enc2d_channels < 1) throw std::invalid_argument("model config: enc2d_channels must be >= 1");
    if (fused_channels != 3 * enc2d_channels)
        throw std::invalid_argument("model config: fused_channels must equal 3*enc2d_channels");
    if (enc3d_channels < 2 || enc3d_channels % 2 != 0)
        throw std::invalid_argument("model config: enc3d_channels must be even and >= 2");
    if (mlp_reduction < 1) throw std::invalid_argument("model config: mlp_reduction must be >= 1");
    if (attention_blocks < 0 || attention_blocks > 6)
        throw std::invalid_argument("model config: attention_blocks must be in [0,6]");
    if (dilation_rate < 1) throw std::invalid_argument("model config: dilation_rate must be >= 1");
    const auto sites = gating_sites(*this);
    for (int k = 0; k < attention_blocks; ++k)
        if (sites[k].channels % mlp_reduction != 0)
            throw std::invalid_argument("model config: gated channel count " +
                                        std::to_string(sites[k].channels) +
                                        " must divide by mlp_reduction");
}

std::array<int, 4> ModelConfig::enc2d_widths() const {
    const int c = enc2d_channels;
    return {std::max(1, c / 4), std::max(1, c / 2), c, c};
}

std::array<int, 3> ModelConfig::fused_shape() const {
    return {input_shape[0] / 4, input_shape[1] / 4, input_shape[2] / 4};
}

std::array<int, 3> ModelConfig::final_shape() const {
    return {input_shape[0] / 16, input_shape[1] / 16, input_shape[2] / 16};
}

std::string model_config_to_json(const ModelConfig& c) {
    json j{{"input_shape", c.input_shape},
           {"enc2d_channels", c.enc2d_channels},
           {"fused_channels", c.fused_channels},
           {"enc3d_channels", c.enc3d_channels},
           {"mlp_reduction", c.mlp_reduction},
           {"attention_blocks", c.attention_blocks},
           {"dilation_rate", c.dilation_rate},
           {"seed", c.seed}};
    return j.dump(2);
}

static ModelConfig config_from_json_obj(const json& j) {
    ModelConfig c;
    try {
        j.at("input_shape").get_to(c.input_shape);
        j.at("enc2d_channels").get_to(c.enc2d_channels);
        j.at("fused_channels").get_to(c.fused_channels);
        j.at("enc3d_channels").get_to(c.enc3d_channels);
        j.at("mlp_reduction").get_to(c.mlp_reduction);
        j.at("attention_blocks").get_to(c.attention_blocks);
        j.at("dilation_rate").get_to(c.dilation_rate);
        if (j.count("seed")) j.at("seed").get_to(c.seed);
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    return c;
}

ModelConfig model_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError("model config: invalid JSON");
    return config_from_json_obj(j);
}

void to_json_file(const ModelConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string());
    out << model_config_to_json(cfg) << "\n";
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<GatingSite> gating_sites(const ModelConfig& cfg) {
    return {{"enc3d.stage2.out", cfg.enc3d_channels}, {"enc3d.stage1.out", cfg.enc3d_channels / 2},
            {"fuse.concat", cfg.fused_channels},      {"enc2d.ax.out", cfg.enc2d_channels},
            {"enc2d.cor.out", cfg.enc2d_channels},    {"enc2d.sag.out", cfg.enc2d_channels}};
}

// ----------------------------------------------------------------- params ---

void AttentionParams::resize(int ch, int r) {
    channels = ch;
    reduced = ch / r;
    w0.assign(static_cast<std::size_t>(channels) * reduced, 0.0);
    w1.assign(static_cast<std::size_t>(reduced) * channels, 0.0);
    spatial.resize(2, 1, 3, 1);
}

ModelParams make_params(const ModelConfig& cfg) {
    ModelParams p;
    const auto widths = cfg.enc2d_widths();
    for (int o = 0; o < 3; ++o) {
        int in_ch = 1;
        for (int l = 0; l < 4; ++l) {
            p.enc2d[o][l].resize(in_ch, widths[l]);
            in_ch = widths[l];
        }
    }
    p.stage1.dconv.resize(cfg.fused_channels, cfg.stage1_channels(), 3, cfg.dilation_rate);
    p.stage1.pconv.resize(cfg.stage1_channels(), cfg.stage1_channels(), 1, 1);
    p.stage2.dconv.resize(cfg.stage1_channels(), cfg.enc3d_channels, 3, cfg.dilation_rate);
    p.stage2.pconv.resize(cfg.enc3d_channels, cfg.enc3d_channels, 1, 1);
    const auto sites = gating_sites(cfg);
    for (int k = 0; k < 6; ++k) {
        const int ch = sites[k].channels;
        const int r = ch % cfg.mlp_reduction == 0 ? cfg.mlp_reduction : 1;
        p.attn[k].resize(ch, r);
    }
    p.head_w.assign(static_cast<std::size_t>(2) * cfg.enc3d_channels, 0.0);
    p.head_b.assign(2, 0.0);
    return p;
}

namespace {
constexpr const char* kOrientNames[3] = {"ax", "cor", "sag"};

template <typename P, typename Fn>
void visit_tensors(P& p, Fn&& fn) {
    for (int o = 0; o < 3; ++o)
        for (int l = 0; l < 4; ++l) {
            auto& c = p.enc2d[o][l];
            const std::string base =
                std::string("enc2d.") + kOrientNames[o] + ".conv" + std::to_string(l + 1);
            fn(base + ".w", c.w.data(), c.w.size());
            fn(base + ".b", c.b.data(), c.b.size());
        }
    auto stage = [&](const char* nm, auto& s) {
        const std::string base = std::string("enc3d.") + nm;
        fn(base + ".dconv.w", s.dconv.w.data(), s.dconv.w.size());
        fn(base + ".dconv.b", s.dconv.b.data(), s.dconv.b.size());
        fn(base + ".pconv.w", s.pconv.w.data(), s.pconv.w.size());
        fn(base + ".pconv.b", s.pconv.b.data(), s.pconv.b.size());
        fn(base + ".pool_s", &s.pool_s, std::size_t{1});
    };
    stage("stage1", p.stage1);
    stage("stage2", p.stage2);
    for (int k = 0; k < 6; ++k) {
        auto& a = p.attn[k];
        const std::string base = "attn" + std::to_string(k);
        fn(base + ".w0", a.w0.data(), a.w0.size());
        fn(base + ".w1", a.w1.data(), a.w1.size());
        fn(base + ".spatial.w", a.spatial.w.data(), a.spatial.w.size());
        fn(base + ".spatial.b", a.spatial.b.data(), a.spatial.b.size());
    }
    fn(std::string("head.w"), p.head_w.data(), p.head_w.size());
    fn(std::string("head.b"), p.head_b.data(), p.head_b.size());
}
}  // namespace

void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, double*, std::size_t)>& fn) {
    visit_tensors(p, fn);
}

void for_each_tensor(
    const ModelParams& p,
    const std::function<void(const std::string&, const double*, std::size_t)>& fn) {
    visit_tensors(p, fn);
}

// ----------------------------------------------------------- feature stack --

const Tensor4& FeatureStack::get(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::invalid_argument("unknown layer: " + name);
    return tensors[it->second].second;
}

void FeatureStack::put(const std::string& name, Tensor4 t) {
    if (index.count(name)) throw std::invalid_argument("duplicate layer: " + name);
    index[name] = tensors.size();
    tensors.emplace_back(name, std::move(t));
}

// -------------------------------------------------------- building blocks --

Tensor4 fuse_concat(const Tensor4& ax, const Tensor4& cor, const Tensor4& sag) {
    if (ax.nx != cor.nx || ax.ny != cor.ny || ax.nz != cor.nz || ax.nx != sag.nx ||
        ax.ny != sag.ny || ax.nz != sag.nz)
        throw std::invalid_argument("fuse_concat: spatial shape mismatch");
    Tensor4 out(ax.c + cor.c + sag.c, ax.nx, ax.ny, ax.nz);
    const std::size_t n = ax.voxels();
    double* dst = out.v.data();
    std::memcpy(dst, ax.v.data(), ax.v.size() * sizeof(double));
    std::memcpy(dst + ax.v.size(), cor.v.data(), cor.v.size() * sizeof(double));
    std::memcpy(dst + ax.v.size() + cor.v.size(), sag.v.data(), sag.v.size() * sizeof(double));
    (void)n;
    return out;
}

std::vector<double> channel_attention(const Tensor4& f, const AttentionParams& ap) {
    if (f.c != ap.channels) throw std::invalid_argument("channel_attention: channel mismatch");
    const int C = ap.channels, R = ap.reduced;
    const std::size_t n = f.voxels();
    if (n == 0) throw std::invalid_argument("channel_attention: empty tensor");
    std::vector<double> a(C), b(C);
    for (int c = 0; c < C; ++c) {
        const double* ch = f.channel(c);
        double sum = 0.0, mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            sum += ch[i];
            mx = std::max(mx, ch[i]);
        }
        a[c] = sum / static_cast<double>(n);
        b[c] = mx;
    }
    auto mlp = [&](const std::vector<double>& x) {
        std::vector<double> h(R, 0.0);
        for (int c = 0; c < C; ++c)
            for (int j = 0; j < R; ++j) h[j] += ap.w0[static_cast<std::size_t>(c) * R + j] * x[c];
        for (double& v : h) v = std::max(0.0, v);
        std::vector<double> u(C, 0.0);
        for (int j = 0; j < R; ++j)
            for (int c = 0; c < C; ++c) u[c] += ap.w1[static_cast<std::size_t>(j) * C + c] * h[j];
        return u;
    };
    const auto ua = mlp(a), ub = mlp(b);
    std::vector<double> m(C);
    for (int c = 0; c < C; ++c) m[c] = sigmoid(ua[c] + ub[c]);
    return m;
}

Tensor4 spatial_attention(const Tensor4& fprime, const AttentionParams& ap) {
    const int C = fprime.c;
    if (C == 0 || fprime.voxels() == 0) throw std::invalid_argument("spatial_attention: empty");
    Tensor4 ab(2, fprime.nx, fprime.ny, fprime.nz);
    const std::size_t n = fprime.voxels();
    double* mean = ab.channel(0);
    double* mx = ab.channel(1);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = fprime.v[i], best = fprime.v[i];
        for (int c = 1; c < C; ++c) {
            const double v = fprime.channel(c)[i];
            sum += v;
            best = std::max(best, v);
        }
        mean[i] = sum / C;
        mx[i] = best;
    }
    Tensor4 out = conv3d_forward(ab, ap.spatial);
    for (double& v : out.v) v = sigmoid(v);
    return out;
}

Tensor4 apply_attention(const Tensor4& f, const std::vector<double>& m, const Tensor4& map) {
    if (static_cast<int>(m.size()) != f.c)
        throw std::invalid_argument("apply_attention: channel weights mismatch");
    if (map.c != 1 || map.nx != f.nx || map.ny != f.ny || map.nz != f.nz)
        throw std::invalid_argument("apply_attention: map shape mismatch");
    Tensor4 out(f.c, f.nx, f.ny, f.nz);
    const std::size_t n = f.voxels();
    const double* mp = map.channel(0);
    for (int c = 0; c < f.c; ++c) {
        const double* fc = f.channel(c);
        double* oc = out.channel(c);
        const double mc = m[c];
        for (std::size_t i = 0; i < n; ++i) oc[i] = mp[i] * mc * fc[i];
    }
    return out;
}

ClassifyResult classify_features(const Tensor4& f_final, const std::vector<double>& head_w,
                                 const std::vector<double>& head_b) {
    const int C = f_final.c;
    if (static_cast<int>(head_w.size()) != 2 * C || head_b.size() != 2)
        throw std::invalid_argument("classify_features: head shape mismatch");
    const std::size_t n = f_final.voxels();
    if (n == 0) throw std::invalid_argument("classify_features: empty tensor");
    ClassifyResult r;
    for (int l = 0; l < 2; ++l) {
        double acc = head_b[l];
        for (int c = 0; c < C; ++c) {
            const double* ch = f_final.channel(c);
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) sum += ch[i];
            acc += head_w[static_cast<std::size_t>(l) * C + c] * (sum / static_cast<double>(n));
        }
        r.logits[l] = acc;
    }
    const double mxl = std::max(r.logits[0], r.logits[1]);
    const double e0 = std::exp(r.logits[0] - mxl), e1 = std::exp(r.logits[1] - mxl);
    r.likelihoods = {e0 / (e0 + e1), e1 / (e0 + e1)};
    r.predicted = r.likelihoods[1] > r.likelihoods[0] ? 1 : 0;
    return r;
}

// ------------------------------------------------------------------- model --

Model::Model(ModelConfig cfg) : config(cfg) {
    config.validate();
    params = make_params(config);
}

void Model::init_params() {
    params = make_params(config);
    auto fill = [&](const std::string& name, double* w, std::size_t n, int fan_in) {
        Rng r(derive_seed(config.seed, name));
        const double lim = std::sqrt(6.0 / fan_in);
        for (std::size_t i = 0; i < n; ++i) w[i] = r.uniform(-lim, lim);
    };
    for (int o = 0; o < 3; ++o)
        for (int l = 0; l < 4; ++l) {
            auto& c = params.enc2d[o][l];
            fill(std::string("enc2d.") + kOrientNames[o] + ".conv" + std::to_string(l + 1) + ".w",
                 c.w.data(), c.w.size(), 9 * c.in_ch);
        }
    auto stage = [&](const char* nm, StageParams& s) {
        const std::string base = std::string("enc3d.") + nm;
        fill(base + ".dconv.w", s.dconv.w.data(), s.dconv.w.size(), 27 * s.dconv.in_ch);
        fill(base + ".pconv.w", s.pconv.w.data(), s.pconv.w.size(), s.pconv.in_ch);
    };
    stage("stage1", params.stage1);
    stage("stage2", params.stage2);
    for (int k = 0; k < 6; ++k) {
        auto& a = params.attn[k];
        const std::string base = "attn" + std::to_string(k);
        fill(base + ".w0", a.w0.data(), a.w0.size(), a.channels);
        fill(base + ".w1", a.w1.data(), a.w1.size(), a.reduced);
        fill(base + ".spatial.w", a.spatial.w.data(), a.spatial.w.size(), 54);
    }
    fill("head.w", params.head_w.data(), params.head_w.size(), config.enc3d_channels);
}

Tensor4 Model::encode_2d(const VolumeD& v_hat, Orientation o) const {
    const VolumeD pv = permute_volume(v_hat, o);
    Tensor4 cur(1, pv.nx, pv.ny, pv.nz);
    cur.v = pv.v;
    const int oi = static_cast<int>(o);
    for (int l = 0; l < 4; ++l)
        cur = relu(conv2d_slice_forward(cur, params.enc2d[oi][l], ModelConfig::enc2d_strides[l]));
    cur = avgpool_slices(cur, 4);
    return unpermute_features(cur, o);
}

Tensor4 Model::encode_3d(const Tensor4& f_con) const {
    Tensor4 x = conv3d_forward(f_con, params.stage1.dconv);
    x = relu(conv3d_forward(x, params.stage1.pconv));
    x = mixed_pool2_forward(x, params.stage1.pool_s);
    x = conv3d_forward(x, params.stage2.dconv);
    x = relu(conv3d_forward(x, params.stage2.pconv));
    return mixed_pool2_forward(x, params.stage2.pool_s);
}

FeatureStack Model::forward(const VolumeD& v_hat, const Override* ov) const {
    const auto& is = config.input_shape;
    if (v_hat.nx != is[0] || v_hat.ny != is[1] || v_hat.nz != is[2])
        throw std::invalid_argument("forward: input shape does not match model config");
    FeatureStack st;
    bool override_used = ov == nullptr;
    auto cache = [&](const std::string& name, Tensor4 t) -> const Tensor4& {
        if (ov && ov->name == name) {
            if (!ov->value || !ov->value->same_shape(t))
                throw std::invalid_argument("forward override: shape mismatch for " + name);
            t = *ov->value;
            override_used = true;
        }
        st.put(name, std::move(t));
        return st.get(name);
    };

    const Tensor4& input = cache("input", volume_to_tensor(v_hat));

    auto attend = [&](int k, const Tensor4& f) -> const Tensor4& {
        const auto& ap = params.attn[k];
        const std::string base = "attn" + std::to_string(k);
        Tensor4 mt(f.c, 1, 1, 1);
        mt.v = channel_attention(f, ap);
        const Tensor4& m = cache(base + ".m", std::move(mt));
        Tensor4 fp(f.c, f.nx, f.ny, f.nz);
        for (int c = 0; c < f.c; ++c) {
            const double* fc = f.channel(c);
            double* pc = fp.channel(c);
            const double mc = m.v[c];
            for (std::size_t i = 0; i < f.voxels(); ++i) pc[i] = mc * fc[i];
        }
        const Tensor4& fprime = cache(base + ".fprime", std::move(fp));
        const Tensor4& map = cache(base + ".map", spatial_attention(fprime, ap));
        Tensor4 out(f.c, f.nx, f.ny, f.nz);
        const double* mp = map.channel(0);
        for (int c = 0; c < f.c; ++c) {
            const double* pc = fprime.channel(c);
            double* oc = out.channel(c);
            for (std::size_t i = 0; i < f.voxels(); ++i) oc[i] = mp[i] * pc[i];
        }
        return cache(base + ".out", std::move(out));
    };
    auto gate = [&](int k, const Tensor4& f) -> const Tensor4& {
        return k < config.attention_blocks ? attend(k, f) : f;
    };

    const std::array<Orientation, 3> orients{Orientation::axial, Orientation::coronal,
                                             Orientation::sagittal};
    std::array<const Tensor4*, 3> gated2d{};
    for (int oi = 0; oi < 3; ++oi) {
        const Orientation o = orients[oi];
        const std::string base = std::string("enc2d.") + kOrientNames[oi];
        const VolumeD pv = permute_volume(tensor_channel_to_volume(input, 0), o);
        Tensor4 pin(1, pv.nx, pv.ny, pv.nz);
        pin.v = pv.v;
        const Tensor4* cur = &pin;
        for (int l = 0; l < 4; ++l)
            cur = &cache(base + ".conv" + std::to_string(l + 1),
                         relu(conv2d_slice_forward(*cur, params.enc2d[oi][l],
                                                   ModelConfig::enc2d_strides[l])));
        cur = &cache(base + ".pool", avgpool_slices(*cur, 4));
        cur = &cache(base + ".out", unpermute_features(*cur, o));
        gated2d[oi] = &gate(3 + oi, *cur);
    }

    const Tensor4& fcon =
        cache("fuse.concat", fuse_concat(*gated2d[0], *gated2d[1], *gated2d[2]));
    const Tensor4* x = &gate(2, fcon);

    x = &cache("enc3d.stage1.dconv", conv3d_forward(*x, params.stage1.dconv));
    x = &cache("enc3d.stage1.conv", relu(conv3d_forward(*x, params.stage1.pconv)));
    x = &cache("enc3d.stage1.out", mixed_pool2_forward(*x, params.stage1.pool_s));
    x = &gate(1, *x);
    x = &cache("enc3d.stage2.dconv", conv3d_forward(*x, params.stage2.dconv));
    x = &cache("enc3d.stage2.conv", relu(conv3d_forward(*x, params.stage2.pconv)));
    x = &cache("enc3d.stage2.out", mixed_pool2_forward(*x, params.stage2.pool_s));
    x = &gate(0, *x);

    const int C = config.enc3d_channels;
    Tensor4 pooled(C, 1, 1, 1);
    const std::size_t n = x->voxels();
    for (int c = 0; c < C; ++c) {
        const double* ch = x->channel(c);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += ch[i];
        pooled.v[c] = sum / static_cast<double>(n);
    }
    const Tensor4& pooledT = cache("head.pooled", std::move(pooled));
    Tensor4 lg(2, 1, 1, 1);
    for (int l = 0; l < 2; ++l) {
        double acc = params.head_b[l];
        for (int c = 0; c < C; ++c) acc += params.head_w[static_cast<std::size_t>(l) * C + c] * pooledT.v[c];
        lg.v[l] = acc;
    }
    const Tensor4& logitsT = cache("head.logits", std::move(lg));
    st.logits = {logitsT.v[0], logitsT.v[1]};
    const double mxl = std::max(st.logits[0], st.logits[1]);
    const double e0 = std::exp(st.logits[0] - mxl), e1 = std::exp(st.logits[1] - mxl);
    st.likelihoods = {e0 / (e0 + e1), e1 / (e0 + e1)};
    Tensor4 lik(2, 1, 1, 1);
    lik.v = {st.likelihoods[0], st.likelihoods[1]};
    cache("head.likelihoods", std::move(lik));
    st.predicted = st.likelihoods[1] > st.likelihoods[0] ? 1 : 0;

    const auto sites = gating_sites(config);
    for (int k = 0; k < config.attention_blocks; ++k) {
        AttentionState a;
        a.site = sites[k].name;
        a.m = st.get("attn" + std::to_string(k) + ".m").v;
        a.map = st.get("attn" + std::to_string(k) + ".map");
        st.attention.push_back(std::move(a));
    }
    if (!override_used)
        throw std::invalid_argument("forward override: unknown layer " + ov->name);
    return st;
}

// ----------------------------------------------------------------- backward --

const Tensor4& Model::BackwardResult::grad(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::invalid_argument("no gradient recorded for layer: " + name);
    return act_grads[it->second].second;
}

Model::BackwardResult Model::backward(const FeatureStack& st,
                                      const std::array<double, 2>& dlogits) const {
    BackwardResult R;
    R.grads = make_params(config);
    auto add_grad = [&](const std::string& name, Tensor4 g) -> const Tensor4& {
        R.index[name] = R.act_grads.size();
        R.act_grads.emplace_back(name, std::move(g));
        return R.act_grads.back().second;
    };
    const auto sites = gating_sites(config);

    // Backward through one attention block: dout is the gradient at the gated
    // output; returns the gradient at the site (pre-gate) tensor and records
    // the attention intermediates on the way.
    auto unattend = [&](int k, const Tensor4& dout) -> Tensor4 {
        const std::string base = "attn" + std::to_string(k);
        const auto& ap = params.attn[k];
        auto& gp = R.grads.attn[k];
        const Tensor4& f = st.get(sites[k].name);
        const Tensor4& fprime = st.get(base + ".fprime");
        const Tensor4& map = st.get(base + ".map");
        const std::vector<double>& m = st.get(base + ".m").v;
        const int C = f.c;
        const std::size_t n = f.voxels();
        add_grad(base + ".out", dout);

        // out = map .* fprime
        Tensor4 dmap(1, f.nx, f.ny, f.nz);
        Tensor4 dfp(C, f.nx, f.ny, f.nz);
        {
            double* dm = dmap.channel(0);
            const double* mp = map.channel(0);
            for (int c = 0; c < C; ++c) {
                const double* pc = fprime.channel(c);
                const double* dc = dout.channel(c);
                double* dpc = dfp.channel(c);
                for (std::size_t i = 0; i < n; ++i) {
                    dm[i] += pc[i] * dc[i];
                    dpc[i] = mp[i] * dc[i];
                }
            }
        }
        const Tensor4& dmapR = add_grad(base + ".map", dmap);

        // map = sigmoid(conv3d([mean_c, max_c](fprime)))
        Tensor4 dchat(1, f.nx, f.ny, f.nz);
        {
            const double* mp = map.channel(0);
            const double* dm = dmapR.channel(0);
            double* dc = dchat.channel(0);
            for (std::size_t i = 0; i < n; ++i) dc[i] = dm[i] * mp[i] * (1.0 - mp[i]);
        }
        Tensor4 ab(2, f.nx, f.ny, f.nz);
        std::vector<int> argc(n, 0);
        {
            double* mean = ab.channel(0);
            double* mx = ab.channel(1);
            for (std::size_t i = 0; i < n; ++i) {
                double sum = fprime.v[i], best = fprime.v[i];
                int bc = 0;
                for (int c = 1; c < C; ++c) {
                    const double v = fprime.channel(c)[i];
                    sum += v;
                    if (v > best) {
                        best = v;
                        bc = c;
                    }
                }
                mean[i] = sum / C;
                mx[i] = best;
                argc[i] = bc;
            }
        }
        Tensor4 dab(2, f.nx, f.ny, f.nz);
        conv3d_backward(ab, dchat, ap.spatial, dab, gp.spatial);
        {
            const double* dA = dab.channel(0);
            const double* dB = dab.channel(1);
            for (int c = 0; c < C; ++c) {
                double* dpc = dfp.channel(c);
                for (std::size_t i = 0; i < n; ++i) dpc[i] += dA[i] / C;
            }
            for (std::size_t i = 0; i < n; ++i) dfp.channel(argc[i])[i] += dB[i];
        }
        const Tensor4& dfpR = add_grad(base + ".fprime", std::move(dfp));

        // fprime = m[c] * f
        std::vector<double> dm_vec(C, 0.0);
        Tensor4 df(C, f.nx, f.ny, f.nz);
        for (int c = 0; c < C; ++c) {
            const double* fc = f.channel(c);
            const double* dpc = dfpR.channel(c);
            double* dc = df.channel(c);
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += fc[i] * dpc[i];
                dc[i] = m[c] * dpc[i];
            }
            dm_vec[c] = acc;
        }
        {
            Tensor4 dmT(C, 1, 1, 1);
            dmT.v = dm_vec;
            add_grad(base + ".m", std::move(dmT));
        }

        // m = sigmoid(W1' relu(W0' a) + W1' relu(W0' b)); shared weights
        const int Rr = ap.reduced;
        std::vector<double> a(C), b(C);
        std::vector<std::size_t> argv(C, 0);
        for (int c = 0; c < C; ++c) {
            const double* fc = f.channel(c);
            double sum = 0.0, best = -std::numeric_limits<double>::infinity();
            std::size_t bi = 0;
            for (std::size_t i = 0; i < n; ++i) {
                sum += fc[i];
                if (fc[i] > best) {
                    best = fc[i];
                    bi = i;
                }
            }
            a[c] = sum / static_cast<double>(n);
            b[c] = best;
            argv[c] = bi;
        }
        std::vector<double> du(C);
        for (int c = 0; c < C; ++c) du[c] = dm_vec[c] * m[c] * (1.0 - m[c]);
        std::vector<double> da(C, 0.0), db(C, 0.0);
        auto branch = [&](const std::vector<double>& x, std::vector<double>& dx) {
            std::vector<double> p(Rr, 0.0);
            for (int c = 0; c < C; ++c)
                for (int j = 0; j < Rr; ++j)
                    p[j] += ap.w0[static_cast<std::size_t>(c) * Rr + j] * x[c];
            std::vector<double> h(Rr);
            for (int j = 0; j < Rr; ++j) h[j] = std::max(0.0, p[j]);
            std::vector<double> dh(Rr, 0.0);
            for (int j = 0; j < Rr; ++j) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c) {
                    gp.w1[static_cast<std::size_t>(j) * C + c] += h[j] * du[c];
                    acc += ap.w1[static_cast<std::size_t>(j) * C + c] * du[c];
                }
                dh[j] = acc;
            }
            for (int j = 0; j < Rr; ++j) {
                const double dp = p[j] > 0.0 ? dh[j] : 0.0;
                for (int c = 0; c < C; ++c) {
                    gp.w0[static_cast<std::size_t>(c) * Rr + j] += x[c] * dp;
                    dx[c] += ap.w0[static_cast<std::size_t>(c) * Rr + j] * dp;
                }
            }
        };
        branch(a, da);
        branch(b, db);
        for (int c = 0; c < C; ++c) {
            double* dc = df.channel(c);
            const double inv = da[c] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) dc[i] += inv;
            dc[argv[c]] += db[c];
        }
        return df;
    };

    // head
    {
        Tensor4 dlg(2, 1, 1, 1);
        dlg.v = {dlogits[0], dlogits[1]};
        add_grad("head.logits", std::move(dlg));
    }
    const int C = config.enc3d_channels;
    const Tensor4& pooled = st.get("head.pooled");
    Tensor4 dpooled(C, 1, 1, 1);
    for (int l = 0; l < 2; ++l) {
        R.grads.head_b[l] += dlogits[l];
        for (int c = 0; c < C; ++c) {
            R.grads.head_w[static_cast<std::size_t>(l) * C + c] += dlogits[l] * pooled.v[c];
            dpooled.v[c] += dlogits[l] * params.head_w[static_cast<std::size_t>(l) * C + c];
        }
    }
    const Tensor4& dpooledR = add_grad("head.pooled", std::move(dpooled));

    const bool g0 = 0 < config.attention_blocks;
    const Tensor4& x2 = g0 ? st.get("attn0.out") : st.get("enc3d.stage2.out");
    Tensor4 dx2(x2.c, x2.nx, x2.ny, x2.nz);
    {
        const double inv = 1.0 / static_cast<double>(x2.voxels());
        for (int c = 0; c < C; ++c) {
            double* dc = dx2.channel(c);
            const double g = dpooledR.v[c] * inv;
            for (std::size_t i = 0; i < x2.voxels(); ++i) dc[i] = g;
        }
    }
    Tensor4 ds2out = g0 ? unattend(0, dx2) : std::move(dx2);
    const Tensor4& ds2outR = add_grad("enc3d.stage2.out", std::move(ds2out));

    auto stage_backward = [&](const char* nm, StageParams& gparams, const StageParams& p,
                              const Tensor4& upstream, const Tensor4& stage_in) -> Tensor4 {
        const std::string base = std::string("enc3d.") + nm;
        const Tensor4& act = st.get(base + ".conv");
        Tensor4 dact(act.c, act.nx, act.ny, act.nz);
        mixed_pool2_backward(act, upstream, p.pool_s, dact, gparams.pool_s);
        const Tensor4& dactR = add_grad(base + ".conv", std::move(dact));
        Tensor4 dpre(act.c, act.nx, act.ny, act.nz);
        relu_backward(act, dactR, dpre);
        const Tensor4& dconv_in = st.get(base + ".dconv");
        Tensor4 ddc(dconv_in.c, dconv_in.nx, dconv_in.ny, dconv_in.nz);
        conv3d_backward(dconv_in, dpre, p.pconv, ddc, gparams.pconv);
        const Tensor4& ddcR = add_grad(base + ".dconv", std::move(ddc));
        Tensor4 din(stage_in.c, stage_in.nx, stage_in.ny, stage_in.nz);
        conv3d_backward(stage_in, ddcR, p.dconv, din, gparams.dconv);
        return din;
    };

    const bool g1 = 1 < config.attention_blocks;
    const Tensor4& x1 = g1 ? st.get("attn1.out") : st.get("enc3d.stage1.out");
    Tensor4 dx1 = stage_backward("stage2", R.grads.stage2, params.stage2, ds2outR, x1);
    Tensor4 ds1out = g1 ? unattend(1, dx1) : std::move(dx1);
    const Tensor4& ds1outR = add_grad("enc3d.stage1.out", std::move(ds1out));

    const bool g2 = 2 < config.attention_blocks;
    const Tensor4& xf = g2 ? st.get("attn2.out") : st.get("fuse.concat");
    Tensor4 dxf = stage_backward("stage1", R.grads.stage1, params.stage1, ds1outR, xf);
    Tensor4 dfcon = g2 ? unattend(2, dxf) : std::move(dxf);
    const Tensor4& dfconR = add_grad("fuse.concat", std::move(dfcon));

    // split the concat and walk each 2D encoder
    const int C2 = config.enc2d_channels;
    Tensor4 dinput(1, config.input_shape[0], config.input_shape[1], config.input_shape[2]);
    for (int oi = 0; oi < 3; ++oi) {
        const Orientation o = static_cast<Orientation>(oi);
        const std::string base = std::string("enc2d.") + kOrientNames[oi];
        Tensor4 dgo(C2, dfconR.nx, dfconR.ny, dfconR.nz);
        std::memcpy(dgo.v.data(), dfconR.channel(oi * C2), dgo.v.size() * sizeof(double));
        const bool gs = 3 + oi < config.attention_blocks;
        Tensor4 dout_o = gs ? unattend(3 + oi, dgo) : std::move(dgo);
        const Tensor4& dout_oR = add_grad(base + ".out", std::move(dout_o));
        const Tensor4& dpoolR = add_grad(base + ".pool", permute_features(dout_oR, o));
        const Tensor4& conv4 = st.get(base + ".conv4");
        Tensor4 dconv4(conv4.c, conv4.nx, conv4.ny, conv4.nz);
        avgpool_slices_backward(dpoolR, 4, dconv4);
        const Tensor4* g = &add_grad(base + ".conv4", std::move(dconv4));
        const VolumeD pv = permute_volume(tensor_channel_to_volume(st.get("input"), 0), o);
        Tensor4 pin(1, pv.nx, pv.ny, pv.nz);
        pin.v = pv.v;
        for (int l = 4; l >= 1; --l) {
            const Tensor4& act = st.get(base + ".conv" + std::to_string(l));
            Tensor4 dpre(act.c, act.nx, act.ny, act.nz);
            relu_backward(act, *g, dpre);
            const Tensor4& in_l = l > 1 ? st.get(base + ".conv" + std::to_string(l - 1)) : pin;
            Tensor4 gin(in_l.c, in_l.nx, in_l.ny, in_l.nz);
            conv2d_slice_backward(in_l, dpre, params.enc2d[oi][l - 1],
                                  ModelConfig::enc2d_strides[l - 1], gin, R.grads.enc2d[oi][l - 1]);
            if (l > 1) {
                g = &add_grad(base + ".conv" + std::to_string(l - 1), std::move(gin));
            } else {
                const Tensor4 gcommon = unpermute_features(gin, o);
                for (std::size_t i = 0; i < dinput.v.size(); ++i) dinput.v[i] += gcommon.v[i];
            }
        }
    }
    add_grad("input", std::move(dinput));
    return R;
}

Tensor4 Model::score_gradient(const FeatureStack& stack, int class_index,
                              const std::string& layer) const {
    if (class_index != 0 && class_index != 1)
        throw std::invalid_argument("score_gradient: class index must be 0 or 1");
    std::array<double, 2> dl{0.0, 0.0};
    dl[class_index] = 1.0;
    const BackwardResult r = backward(stack, dl);
    return r.grad(layer);
}

std::string cam_layer_name() { return "enc3d.stage2.conv"; }

// --------------------------------------------------------------- checkpoint --

static constexpr char kCkptMagic[8] = {'C', 'A', 'M', 'S', 'C', 'K', 'P', 'T'};

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointExtra& extra) {
    json tensors = json::array();
    std::uint64_t offset = 0;
    for_each_tensor(model.params,
                    [&](const std::string& name, const double* /*d*/, std::size_t n) {
                        tensors.push_back({{"name", name}, {"count", n}, {"offset", offset}});
                        offset += n * sizeof(double);
                    });
    json header{{"format_version", 1},
                {"config", json::parse(model_config_to_json(model.config))},
                {"extra",
                 {{"best_epoch", extra.best_epoch},
                  {"val_accuracy", extra.val_accuracy},
                  {"train_config", extra.train_config_json}}},
                {"tensors", tensors}};
    const std::string htext = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string());
    out.write(kCkptMagic, sizeof(kCkptMagic));
    const std::uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for_each_tensor(model.params, [&](const std::string&, const double* d, std::size_t n) {
        out.write(reinterpret_cast<const char*>(d), static_cast<std::streamsize>(n * sizeof(double)));
    });
    if (!out) throw IoError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointExtra* extra) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw FormatError("checkpoint: bad magic in " + path.string());
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (1u << 20)) throw FormatError("checkpoint: bad header length");
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw FormatError("checkpoint: truncated header");
    json header = json::parse(htext, nullptr, false);
    if (header.is_discarded()) throw FormatError("checkpoint: header is not valid JSON");
    ModelConfig cfg;
    try {
        if (header.at("format_version").get<int>() != 1)
            throw FormatError("checkpoint: unsupported format version");
        cfg = config_from_json_obj(header.at("config"));
        if (extra) {
            const auto& e = header.at("extra");
            extra->best_epoch = e.at("best_epoch").get<int>();
            extra->val_accuracy = e.at("val_accuracy").get<double>();
            extra->train_config_json = e.at("train_config").get<std::string>();
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    Model model(cfg);
    // read tensors in the canonical order and verify the header agrees
    const json& tensors = header.at("tensors");
    std::size_t ti = 0;
    try {
        for_each_tensor(model.params, [&](const std::string& name, double* d, std::size_t n) {
            if (ti >= tensors.size()) throw FormatError("checkpoint: tensor table too short");
            const auto& t = tensors.at(ti++);
            if (t.at("name").get<std::string>() != name ||
                t.at("count").get<std::size_t>() != n)
                throw FormatError("checkpoint: tensor table mismatch at " + name);
            in.read(reinterpret_cast<char*>(d), static_cast<std::streamsize>(n * sizeof(double)));
            if (!in) throw FormatError("checkpoint: truncated payload at " + name);
        });
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    if (ti != tensors.size()) throw FormatError("checkpoint: tensor table too long");
    return model;
}

}  // namespace camscope
