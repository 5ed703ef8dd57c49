#pragma once
#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "camscope/model.hpp"
#include "camscope/rng.hpp"
#include "camscope/tensor.hpp"

namespace ts {

namespace fs = std::filesystem;

inline fs::path make_temp_dir(const std::string& suffix) {
    auto p = fs::temp_directory_path() / ("camscope_test_" + suffix);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Smallest config that satisfies the shape invariants; fast enough for
// finite-difference loops in unit tests.
inline camscope::ModelConfig micro_config(int attention_blocks = 1, std::uint64_t seed = 1) {
    camscope::ModelConfig c;
    c.input_shape = {32, 32, 16};
    c.enc2d_channels = 4;
    c.fused_channels = 12;
    c.enc3d_channels = 8;
    c.mlp_reduction = 2;
    c.attention_blocks = attention_blocks;
    c.seed = seed;
    return c;
}

inline void fill_uniform(camscope::Tensor4& t, camscope::Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
    for (double& v : t.v) v = rng.uniform(lo, hi);
}

template <typename T>
inline void fill_uniform(camscope::Grid3<T>& g, camscope::Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
    for (T& v : g.v) v = static_cast<T>(rng.uniform(lo, hi));
}

// ---------------------------------------------------------------------------
// Kink-aware central-difference gradient check for one cached layer.
//
// The logit is piecewise smooth: ReLU and the max terms of mixed and attention
// pooling put kinks in the voxel->logit map, and a central quotient whose
// interval spans a kink estimates a blend of the two one-sided slopes rather
// than any derivative. A sampled voxel is excused only when that situation is
// proven: the analytic value must equal one of the one-sided quotients at a
// 100x smaller step, i.e. it is a valid one-sided derivative at a genuine
// kink. Anything else counts toward `checked`/`worst`, so a wrong gradient
// still fails. Sampling continues until `need` smooth voxels were compared.
// ---------------------------------------------------------------------------
struct FdCheck {
    int checked = 0;    // voxels where the central oracle applied
    int kinked = 0;     // certified non-smooth, resampled
    double worst = 0.0; // worst relative error over checked voxels
};

inline FdCheck fd_check_layer(camscope::Model& model, const camscope::VolumeD& input,
                              const camscope::FeatureStack& stack, const std::string& layer,
                              camscope::Rng& pick, int need = 20) {
    const camscope::Tensor4 grad = model.score_gradient(stack, 1, layer);
    camscope::Tensor4 probe = stack.get(layer);
    const camscope::Model::Override ov{layer, &probe};
    const double base = stack.logits[1];

    auto logit_at = [&](std::size_t i, double x) {
        const double keep = probe.v[i];
        probe.v[i] = x;
        const double y = model.forward(input, &ov).logits[1];
        probe.v[i] = keep;
        return y;
    };
    auto agrees = [](double a, double b) {
        const double diff = std::abs(a - b);
        return diff < 1e-9 || diff / std::max(std::abs(a), std::abs(b)) < 1e-4;
    };

    FdCheck r;
    const double h = 1e-3;
    for (int attempt = 0; attempt < 40 * need && r.checked < need; ++attempt) {
        const std::size_t i = pick.raw() % probe.v.size();
        const double x = probe.v[i];
        const double fd = (logit_at(i, x + h) - logit_at(i, x - h)) / (2.0 * h);
        const double an = grad.v[i];
        if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;  // dead voxel
        if (!agrees(fd, an)) {
            const double hs = h / 100.0;
            const double fwd = (logit_at(i, x + hs) - base) / hs;
            const double bwd = (base - logit_at(i, x - hs)) / hs;
            if (agrees(an, fwd) || agrees(an, bwd)) {
                ++r.kinked;
                continue;
            }
        }
        r.worst = std::max(r.worst, std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)));
        ++r.checked;
    }
    return r;
}

inline std::vector<unsigned char> read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("read_bytes: cannot open " + p.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                      std::istreambuf_iterator<char>());
}

inline bool same_bytes(const fs::path& a, const fs::path& b) {
    return read_bytes(a) == read_bytes(b);
}

// Runs the installed CLI binary; returns the process exit code. `env` is an
// optional VAR=value prefix for the shell command line.
inline int run_cli(const std::string& args, const fs::path& log = {}, const std::string& env = {}) {
    std::string cmd = env.empty() ? std::string() : env + " ";
    cmd += std::string(CAMSCOPE_CLI) + " " + args;
    if (log.empty())
        cmd += " > /dev/null 2>&1";
    else
        cmd += " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (status == -1 || !WIFEXITED(status)) return -1;
    return WEXITSTATUS(status);
}

// ---------------------------------------------------------------------------
// Decoder for the repo's own PNGs (8-bit RGB, filter 0, stored deflate
// blocks); enough to assert pixel values in tests.
// ---------------------------------------------------------------------------
struct DecodedPng {
    int width = 0, height = 0;
    std::vector<unsigned char> rgb;  // 3 bytes per pixel, row-major
};

inline DecodedPng decode_stored_png(const fs::path& path) {
    const auto bytes = read_bytes(path);
    auto fail = [&](const std::string& why) -> DecodedPng {
        throw std::runtime_error("decode_stored_png " + path.string() + ": " + why);
    };
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || !std::equal(sig, sig + 8, bytes.begin())) fail("bad signature");

    auto be32 = [&](std::size_t at) {
        return (std::uint32_t(bytes[at]) << 24) | (std::uint32_t(bytes[at + 1]) << 16) |
               (std::uint32_t(bytes[at + 2]) << 8) | std::uint32_t(bytes[at + 3]);
    };

    DecodedPng out;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = be32(pos);
        const std::string type(bytes.begin() + pos + 4, bytes.begin() + pos + 8);
        const std::size_t body = pos + 8;
        if (body + len + 4 > bytes.size()) fail("truncated chunk");
        if (type == "IHDR") {
            out.width = static_cast<int>(be32(body));
            out.height = static_cast<int>(be32(body + 4));
            if (bytes[body + 8] != 8 || bytes[body + 9] != 2) fail("not 8-bit RGB");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + body, bytes.begin() + body + len);
        }
        pos = body + len + 4;  // skip CRC
        if (type == "IEND") break;
    }
    if (out.width <= 0 || out.height <= 0) fail("missing IHDR");

    // zlib stream of stored (uncompressed) deflate blocks
    if (idat.size() < 2) fail("short IDAT");
    std::vector<unsigned char> raw;
    std::size_t ip = 2;  // skip zlib header
    for (;;) {
        if (ip >= idat.size()) fail("missing final block");
        const unsigned char hdr = idat[ip++];
        if ((hdr & 0x06) != 0) fail("not a stored block");
        if (ip + 4 > idat.size()) fail("truncated block header");
        const std::size_t len = idat[ip] | (std::size_t(idat[ip + 1]) << 8);
        ip += 4;  // LEN + NLEN
        if (ip + len > idat.size()) fail("truncated block body");
        raw.insert(raw.end(), idat.begin() + ip, idat.begin() + ip + len);
        ip += len;
        if (hdr & 0x01) break;
    }

    const std::size_t stride = 1 + std::size_t(out.width) * 3;
    if (raw.size() != stride * out.height) fail("scanline size mismatch");
    out.rgb.reserve(std::size_t(out.width) * out.height * 3);
    for (int y = 0; y < out.height; ++y) {
        if (raw[std::size_t(y) * stride] != 0) fail("unexpected filter type");
        out.rgb.insert(out.rgb.end(), raw.begin() + std::size_t(y) * stride + 1,
                       raw.begin() + std::size_t(y + 1) * stride);
    }
    return out;
}

}  // namespace ts
