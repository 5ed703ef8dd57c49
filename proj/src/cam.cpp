#include "camscope/cam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "camscope/errors.hpp"

namespace camscope {

std::string select_layer() { return cam_layer_name(); }

std::vector<double> neuron_importance(const Tensor4& score_grads) {
    const std::size_t n = score_grads.voxels();
    if (score_grads.c == 0 || n == 0) throw std::invalid_argument("neuron_importance: empty");
    std::vector<double> alpha(score_grads.c);
    for (int c = 0; c < score_grads.c; ++c) {
        const double* ch = score_grads.channel(c);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += std::max(0.0, ch[i]);
        alpha[c] = acc / static_cast<double>(n);
    }
    return alpha;
}

VolumeD activation_map(const std::vector<double>& alpha, const Tensor4& v) {
    if (static_cast<int>(alpha.size()) != v.c)
        throw std::invalid_argument("activation_map: importance count must match channels");
    if (v.voxels() == 0) throw std::invalid_argument("activation_map: empty tensor");
    VolumeD s(v.nx, v.ny, v.nz);
    for (int c = 0; c < v.c; ++c) {
        const double* ch = v.channel(c);
        const double a = alpha[c];
        for (std::size_t i = 0; i < s.size(); ++i) s.v[i] += a * ch[i];
    }
    for (double& x : s.v) x = std::max(0.0, x);
    return s;
}

VolumeD finalize_map(const VolumeD& s, std::array<int, 3> target_shape, double threshold) {
    if (s.empty()) throw std::invalid_argument("finalize_map: empty map");
    if (!(threshold >= 0.0 && threshold < 1.0))
        throw std::invalid_argument("finalize_map: threshold must be in [0,1)");
    double mx = 0.0;
    for (double x : s.v) mx = std::max(mx, x);
    VolumeD h = s;
    if (mx > 0.0)
        for (double& x : h.v) x /= mx;
    else
        std::fill(h.v.begin(), h.v.end(), 0.0);
    for (double& x : h.v)
        if (x <= threshold) x = 0.0;
    if (h.nx != target_shape[0] || h.ny != target_shape[1] || h.nz != target_shape[2]) {
        h = resample_trilinear(h, target_shape[0], target_shape[1], target_shape[2]);
        for (double& x : h.v)
            if (x <= threshold) x = 0.0;
    }
    return h;
}

CamResult compute_cam(const Model& model, const FeatureStack& stack, int class_index,
                      double threshold) {
    const std::string layer = select_layer();
    CamResult r;
    r.alpha = neuron_importance(model.score_gradient(stack, class_index, layer));
    r.raw = activation_map(r.alpha, stack.get(layer));
    r.map = finalize_map(r.raw, model.config.input_shape, threshold);
    return r;
}

// ------------------------------------------------------------- png writing --

namespace {

std::uint32_t crc32_update(std::uint32_t crc, const unsigned char* p, std::size_t n) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = c & 1 ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    crc ^= 0xffffffffu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(std::vector<unsigned char>& out, const char type[4],
               const std::vector<unsigned char>& data) {
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    std::vector<unsigned char> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, crc32_update(0, body.data(), body.size()));
}

// zlib stream with stored (uncompressed) deflate blocks
std::vector<unsigned char> zlib_store(const std::vector<unsigned char>& raw) {
    std::vector<unsigned char> z{0x78, 0x01};
    std::size_t pos = 0;
    do {
        const std::size_t n = std::min<std::size_t>(raw.size() - pos, 65535);
        const bool last = pos + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<unsigned char>(n & 0xff));
        z.push_back(static_cast<unsigned char>(n >> 8));
        z.push_back(static_cast<unsigned char>(~n & 0xff));
        z.push_back(static_cast<unsigned char>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + n);
        pos += n;
    } while (pos < raw.size());
    std::uint32_t a = 1, b = 0;
    for (unsigned char c : raw) {
        a = (a + c) % 65521;
        b = (b + a) % 65521;
    }
    put_u32(z, (b << 16) | a);
    return z;
}

}  // namespace

void write_rgb_png(const std::filesystem::path& path, int width, int height,
                   const std::vector<unsigned char>& rgb) {
    if (width <= 0 || height <= 0 ||
        rgb.size() != static_cast<std::size_t>(width) * height * 3)
        throw std::invalid_argument("write_rgb_png: buffer does not match dimensions");
    std::vector<unsigned char> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<unsigned char> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(width));
    put_u32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor
    put_chunk(out, "IHDR", ihdr);
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(height) * (1 + 3 * width));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        const unsigned char* row = rgb.data() + static_cast<std::size_t>(y) * width * 3;
        raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
    }
    put_chunk(out, "IDAT", zlib_store(raw));
    put_chunk(out, "IEND", {});
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing " + path.string());
}

std::vector<std::filesystem::path> write_overlay_slices(const std::filesystem::path& dir,
                                                        const std::string& case_id,
                                                        const VolumeF& v_hat, const VolumeD& map,
                                                        double blend) {
    if (v_hat.nx != map.nx || v_hat.ny != map.ny || v_hat.nz != map.nz)
        throw std::invalid_argument("write_overlay_slices: shape mismatch");
    if (!(blend >= 0.0 && blend <= 1.0))
        throw std::invalid_argument("write_overlay_slices: blend must be in [0,1]");
    std::filesystem::create_directories(dir);
    std::vector<int> slices;
    for (int z = 0; z < map.nz; ++z) {
        bool active = false;
        for (int y = 0; y < map.ny && !active; ++y)
            for (int x = 0; x < map.nx; ++x)
                if (map.at(x, y, z) > 0.0) {
                    active = true;
                    break;
                }
        if (active) slices.push_back(z);
    }
    if (slices.empty()) slices.push_back(map.nz / 2);
    std::vector<std::filesystem::path> written;
    std::vector<unsigned char> rgb(static_cast<std::size_t>(map.nx) * map.ny * 3);
    for (int z : slices) {
        for (int y = 0; y < map.ny; ++y)
            for (int x = 0; x < map.nx; ++x) {
                const double g01 = std::clamp((v_hat.at(x, y, z) + 1.0) * 0.5, 0.0, 1.0);
                const double gray = 255.0 * g01;
                const double h = std::clamp(map.at(x, y, z), 0.0, 1.0);
                const double a = blend * h;
                const double r = (1.0 - a) * gray + a * 255.0;
                const double gr = (1.0 - a) * gray + a * 255.0 * h;
                const double b = (1.0 - a) * gray;
                unsigned char* px = &rgb[(static_cast<std::size_t>(y) * map.nx + x) * 3];
                px[0] = static_cast<unsigned char>(std::lround(r));
                px[1] = static_cast<unsigned char>(std::lround(gr));
                px[2] = static_cast<unsigned char>(std::lround(b));
            }
        char suffix[16];
        std::snprintf(suffix, sizeof(suffix), "_z%03d.png", z);
        const auto path = dir / (case_id + suffix);
        write_rgb_png(path, map.nx, map.ny, rgb);
        written.push_back(path);
    }
    return written;
}

}  // namespace camscope
