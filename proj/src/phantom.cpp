#include "camscope/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <sstream>

#include "camscope/errors.hpp"
#include "camscope/rng.hpp"
#include "json.hpp"

namespace camscope {

using nlohmann::json;

void PhantomSpec::validate() const {
    for (int d : volume_shape)
        if (d < 8) throw std::invalid_argument("PhantomSpec: volume_shape components must be >= 8");
    for (double s : spacing_mm)
        if (!(s > 0)) throw std::invalid_argument("PhantomSpec: spacing must be > 0");
    if (n_typical < 0 || n_nontypical < 0)
        throw std::invalid_argument("PhantomSpec: case counts must be >= 0");
    if (lesion_count_range[0] < 1 || lesion_count_range[1] < lesion_count_range[0])
        throw std::invalid_argument("PhantomSpec: bad lesion_count_range");
    if (!(lesion_radius_range_mm[0] > 0) ||
        lesion_radius_range_mm[1] < lesion_radius_range_mm[0])
        throw std::invalid_argument("PhantomSpec: bad lesion_radius_range_mm");
    if (noise_sigma < 0) throw std::invalid_argument("PhantomSpec: noise_sigma must be >= 0");
    if (!(train_frac >= 0) || !(val_frac >= 0) || train_frac + val_frac > 1.0)
        throw std::invalid_argument("PhantomSpec: bad split fractions");
}

PhantomSpec phantom_spec_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError("bad phantom spec: invalid JSON");
    PhantomSpec s;
    try {
        if (j.contains("volume_shape")) s.volume_shape = j["volume_shape"].get<std::array<int, 3>>();
        if (j.contains("spacing_mm")) s.spacing_mm = j["spacing_mm"].get<std::array<double, 3>>();
        s.n_typical = j.at("n_typical").get<int>();
        s.n_nontypical = j.at("n_nontypical").get<int>();
        if (j.contains("lesion_count_range"))
            s.lesion_count_range = j["lesion_count_range"].get<std::array<int, 2>>();
        if (j.contains("lesion_radius_range_mm"))
            s.lesion_radius_range_mm = j["lesion_radius_range_mm"].get<std::array<double, 2>>();
        if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
        if (j.contains("train_frac")) s.train_frac = j["train_frac"].get<double>();
        if (j.contains("val_frac")) s.val_frac = j["val_frac"].get<double>();
        if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad phantom spec: ") + e.what());
    }
    s.validate();
    return s;
}

PhantomSpec phantom_spec_from_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("missing phantom spec: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return phantom_spec_from_json(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(std::string(e.what()) + " (" + path.string() + ")");
    }
}

void phantom_spec_to_json_file(const PhantomSpec& s, const std::filesystem::path& path) {
    json j{{"volume_shape", s.volume_shape},
           {"spacing_mm", s.spacing_mm},
           {"n_typical", s.n_typical},
           {"n_nontypical", s.n_nontypical},
           {"lesion_count_range", s.lesion_count_range},
           {"lesion_radius_range_mm", s.lesion_radius_range_mm},
           {"noise_sigma", s.noise_sigma},
           {"train_frac", s.train_frac},
           {"val_frac", s.val_frac},
           {"seed", s.seed}};
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

namespace {

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> semi;

    double rho(double x, double y, double z) const {
        const double dx = (x - center[0]) / semi[0];
        const double dy = (y - center[1]) / semi[1];
        const double dz = (z - center[2]) / semi[2];
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    }
};

// 1 inside, cosine ramp over [1-delta, 1], 0 outside
double ramp(double rho, double delta) {
    if (rho <= 1.0 - delta) return 1.0;
    if (rho >= 1.0) return 0.0;
    return 0.5 * (1.0 + std::cos(M_PI * (rho - (1.0 - delta)) / delta));
}

struct LungPair {
    Ellipsoid right, left;  // right lung = low x
};

LungPair make_lungs(const std::array<int, 3>& shape, Rng& rng) {
    const double nx = shape[0], ny = shape[1], nz = shape[2];
    auto jitter = [&](double v, double amp) { return v * (1.0 + rng.uniform(-amp, amp)); };
    LungPair lp;
    lp.right.center = {nx * (0.30 + rng.uniform(-0.015, 0.015)),
                       ny * (0.52 + rng.uniform(-0.015, 0.015)),
                       nz * (0.52 + rng.uniform(-0.015, 0.015))};
    lp.right.semi = {jitter(nx * 0.17, 0.05), jitter(ny * 0.30, 0.05), jitter(nz * 0.40, 0.05)};
    lp.left.center = {nx * (0.70 + rng.uniform(-0.015, 0.015)),
                      ny * (0.52 + rng.uniform(-0.015, 0.015)),
                      nz * (0.50 + rng.uniform(-0.015, 0.015))};
    lp.left.semi = {jitter(nx * 0.16, 0.05), jitter(ny * 0.28, 0.05), jitter(nz * 0.38, 0.05)};
    return lp;
}

struct LesionGeom {
    Ellipsoid shape;
    LesionKind kind;
    double value_hu;
    double edge_delta;
};

constexpr double kAirHu = -1000.0;
constexpr double kBoundaryDelta = 0.08;

}  // namespace

LobeMap lobe_partition(const VolumeF& mask) {
    if (mask.empty()) throw std::invalid_argument("lobe_partition: empty mask");

    // 6-connected component labelling
    Grid3<int> comp(mask.nx, mask.ny, mask.nz, -1);
    int n_comp = 0;
    std::vector<std::array<double, 2>> comp_stats;  // (voxel count, sum x)
    for (int z = 0; z < mask.nz; ++z)
        for (int y = 0; y < mask.ny; ++y)
            for (int x = 0; x < mask.nx; ++x) {
                if (mask.at(x, y, z) != 1.0f || comp.at(x, y, z) != -1) continue;
                const int id = n_comp++;
                comp_stats.push_back({0, 0});
                std::deque<std::array<int, 3>> queue{{x, y, z}};
                comp.at(x, y, z) = id;
                while (!queue.empty()) {
                    auto [cx, cy, cz] = queue.front();
                    queue.pop_front();
                    comp_stats[id][0] += 1;
                    comp_stats[id][1] += cx;
                    constexpr int off[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                               {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
                    for (const auto& o : off) {
                        const int px = cx + o[0], py = cy + o[1], pz = cz + o[2];
                        if (px < 0 || py < 0 || pz < 0 || px >= mask.nx || py >= mask.ny ||
                            pz >= mask.nz)
                            continue;
                        if (mask.at(px, py, pz) == 1.0f && comp.at(px, py, pz) == -1) {
                            comp.at(px, py, pz) = id;
                            queue.push_back({px, py, pz});
                        }
                    }
                }
            }
    if (n_comp == 0) throw std::invalid_argument("lobe_partition: empty mask");
    if (n_comp != 2)
        throw std::invalid_argument("lobe_partition: expected two lung components, found " +
                                    std::to_string(n_comp));

    const int right_id =
        comp_stats[0][1] / comp_stats[0][0] <= comp_stats[1][1] / comp_stats[1][0] ? 0 : 1;
    const int left_id = 1 - right_id;

    // left lung: centroid z
    double left_zsum = 0, left_n = 0;
    int r_zmin = mask.nz, r_zmax = -1;
    for (int z = 0; z < mask.nz; ++z)
        for (int y = 0; y < mask.ny; ++y)
            for (int x = 0; x < mask.nx; ++x) {
                const int id = comp.at(x, y, z);
                if (id == left_id) {
                    left_zsum += z;
                    left_n += 1;
                } else if (id == right_id) {
                    r_zmin = std::min(r_zmin, z);
                    r_zmax = std::max(r_zmax, z);
                }
            }
    const double left_zc = left_zsum / left_n;

    // right lung: thirds of the z-extent, extra slices to the lower lobe
    const int extent = r_zmax - r_zmin + 1;
    const int s_low = (extent + 2) / 3;
    const int s_mid = (extent + 1) / 3;
    const int z_low_end = r_zmin + s_low;       // RLL: [r_zmin, z_low_end)
    const int z_mid_end = z_low_end + s_mid;    // RML: [z_low_end, z_mid_end)

    LobeMap lobes(mask.nx, mask.ny, mask.nz, 0);
    for (int z = 0; z < mask.nz; ++z)
        for (int y = 0; y < mask.ny; ++y)
            for (int x = 0; x < mask.nx; ++x) {
                const int id = comp.at(x, y, z);
                if (id == -1) continue;
                if (id == left_id)
                    lobes.at(x, y, z) = lobe_label(z > left_zc ? Lobe::LUL : Lobe::LLL);
                else if (z < z_low_end)
                    lobes.at(x, y, z) = lobe_label(Lobe::RLL);
                else if (z < z_mid_end)
                    lobes.at(x, y, z) = lobe_label(Lobe::RML);
                else
                    lobes.at(x, y, z) = lobe_label(Lobe::RUL);
            }
    return lobes;
}

PhantomCase generate_case(const PhantomSpec& spec, int case_index, int label) {
    spec.validate();
    if (case_index < 0 || case_index >= spec.n_typical + spec.n_nontypical)
        throw std::invalid_argument("generate_case: case_index out of range");
    if (label != 0 && label != 1)
        throw std::invalid_argument("generate_case: label must be 0 or 1");

    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(case_index)));
    const auto& sh = spec.volume_shape;
    const LungPair lungs = make_lungs(sh, rng);

    const double parenchyma_hu = -850.0 + rng.uniform(-15.0, 15.0);
    // smooth low-frequency texture inside the lung
    const double tex_amp = 15.0;
    const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0),
                 fz = rng.uniform(1.0, 3.0);
    const double px = rng.uniform(0.0, 2.0 * M_PI), py = rng.uniform(0.0, 2.0 * M_PI),
                 pz = rng.uniform(0.0, 2.0 * M_PI);

    // lesion geometry
    std::vector<LesionGeom> geoms;
    if (label == 1) {
        const int count = rng.uniform_int(spec.lesion_count_range[0], spec.lesion_count_range[1]);
        for (int i = 0; i < count; ++i) {
            const Ellipsoid& lung = rng.bernoulli(0.5) ? lungs.right : lungs.left;
            const double r_mm =
                rng.uniform(spec.lesion_radius_range_mm[0], spec.lesion_radius_range_mm[1]);
            std::array<double, 3> radii;
            double semi_min = lung.semi[0];
            for (int d = 0; d < 3; ++d) semi_min = std::min(semi_min, lung.semi[d]);
            for (int d = 0; d < 3; ++d) {
                const double raw = r_mm * rng.uniform(0.75, 1.25) / spec.spacing_mm[d];
                // cap against the lung size so small phantoms stay valid
                radii[d] = std::clamp(raw, 1.0, 0.45 * lung.semi[d]);
            }

            // placement margin: lesion extent + center-rounding allowance
            double margin = 0.0;
            for (int d = 0; d < 3; ++d) margin = std::max(margin, radii[d] / lung.semi[d]);
            margin = std::min(margin + 0.02 + 0.9 / semi_min, 0.95);

            // uniform direction inside the feasible ball, posterior/inferior
            // bias with probability 0.7
            const bool biased = rng.bernoulli(0.7);
            std::array<double, 3> u;
            while (true) {
                for (auto& c : u) c = rng.uniform(-1.0, 1.0);
                const double n2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
                if (n2 <= 1.0) break;
            }
            if (biased) {
                u[1] = std::abs(u[1]);   // posterior = +y
                u[2] = -std::abs(u[2]);  // inferior = -z
            }
            LesionGeom g;
            // integral center so the rendered ellipsoid equals the annotation
            for (int d = 0; d < 3; ++d)
                g.shape.center[d] =
                    std::round(lung.center[d] + u[d] * (1.0 - margin) * lung.semi[d]);
            g.shape.semi = radii;
            g.kind = rng.bernoulli(0.7) ? LesionKind::ggo : LesionKind::consolidation;
            if (g.kind == LesionKind::ggo) {
                g.value_hu = rng.uniform(-600.0, -300.0);
                g.edge_delta = 0.25;
            } else {
                g.value_hu = rng.uniform(-100.0, 50.0);
                g.edge_delta = 0.15;
            }
            geoms.push_back(g);
        }
    }

    PhantomCase out;
    out.label = label;
    out.volume = VolumeF(sh[0], sh[1], sh[2]);
    out.mask = VolumeF(sh[0], sh[1], sh[2]);

    for (int z = 0; z < sh[2]; ++z)
        for (int y = 0; y < sh[1]; ++y)
            for (int x = 0; x < sh[0]; ++x) {
                const double rr = lungs.right.rho(x, y, z);
                const double rl = lungs.left.rho(x, y, z);
                const bool inside = rr <= 1.0 || rl <= 1.0;
                out.mask.at(x, y, z) = inside ? 1.0f : 0.0f;

                const double w = std::max(ramp(rr, kBoundaryDelta), ramp(rl, kBoundaryDelta));
                double hu = kAirHu;
                if (w > 0.0) {
                    const double tex = tex_amp * std::sin(2.0 * M_PI * fx * x / sh[0] + px) *
                                       std::cos(2.0 * M_PI * fy * y / sh[1] + py) *
                                       std::cos(2.0 * M_PI * fz * z / sh[2] + pz);
                    hu += ((parenchyma_hu + tex) - kAirHu) * w;
                }
                for (const auto& g : geoms) {
                    const double wl = ramp(g.shape.rho(x, y, z), g.edge_delta);
                    if (wl > 0.0) hu += (g.value_hu - hu) * wl;
                }
                out.volume.at(x, y, z) = static_cast<float>(hu);
            }

    // noise after structure so annotations do not depend on it
    if (spec.noise_sigma > 0) {
        for (auto& v : out.volume.v)
            v = static_cast<float>(v + spec.noise_sigma * rng.normal());
    }

    // annotations: lobe of the rounded lesion center
    if (!geoms.empty()) {
        const LobeMap lobes = lobe_partition(out.mask);
        for (const auto& g : geoms) {
            LesionAnnotation a;
            for (int d = 0; d < 3; ++d)
                a.center[d] = static_cast<int>(std::lround(g.shape.center[d]));
            a.radii = g.shape.semi;
            a.kind = g.kind;
            const std::uint8_t lab = lobes.at(a.center[0], a.center[1], a.center[2]);
            a.lobe = static_cast<Lobe>(lab - 1);
            out.lesions.push_back(a);
        }
    }
    return out;
}

namespace {

std::string case_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "case_%04d", index);
    return buf;
}

}  // namespace

GeneratedDataset generate_dataset(const PhantomSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);

    const int n = spec.n_typical + spec.n_nontypical;
    // proportional label interleave so a contiguous split stays stratified
    std::vector<int> labels(n, 0);
    for (int i = 0; i < n; ++i) {
        const long long hi = static_cast<long long>(i + 1) * spec.n_typical / std::max(n, 1);
        const long long lo = static_cast<long long>(i) * spec.n_typical / std::max(n, 1);
        labels[i] = hi > lo ? 1 : 0;
    }

    std::vector<ManifestEntry> entries;
    for (int i = 0; i < n; ++i) {
        const PhantomCase pc = generate_case(spec, i, labels[i]);
        const std::string name = case_name(i);

        VolumeMeta vm;
        vm.shape = spec.volume_shape;
        vm.spacing_mm = spec.spacing_mm;
        vm.value_kind = ValueKind::hounsfield;
        vm.case_id = name;
        vm.label = pc.label;
        write_volume(pc.volume, vm, out_dir / name);

        VolumeMeta mm = vm;
        mm.value_kind = ValueKind::mask;
        mm.label.reset();
        write_volume(pc.mask, mm, out_dir / (name + "_mask"));

        ManifestEntry e;
        e.case_id = name;
        e.volume = name;
        e.mask = name + "_mask";
        e.label = pc.label;
        e.lesions = pc.lesions;
        entries.push_back(std::move(e));
    }

    const int n_train = static_cast<int>(std::floor(spec.train_frac * n));
    const int n_val = static_cast<int>(std::floor(spec.val_frac * n));

    GeneratedDataset ds;
    ds.out_dir = out_dir;
    auto fill = [&](DatasetManifest& m, const std::string& split, int lo, int hi) {
        m.split = split;
        m.seed = spec.seed;
        m.base_dir = out_dir;
        m.entries.assign(entries.begin() + lo, entries.begin() + hi);
        write_manifest(m, out_dir / ("manifest_" + split + ".json"));
    };
    fill(ds.train, "train", 0, n_train);
    fill(ds.val, "val", n_train, n_train + n_val);
    fill(ds.test, "test", n_train + n_val, n);

    DatasetManifest all;
    all.split = "all";
    all.seed = spec.seed;
    all.base_dir = out_dir;
    all.entries = entries;
    write_manifest(all, out_dir / "manifest.json");

    phantom_spec_to_json_file(spec, out_dir / "phantom_spec.json");
    return ds;
}

std::uint64_t dataset_digest(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());

    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : files) {
        const std::string rel = std::filesystem::relative(p, dir).generic_string();
        h = fnv1a64(rel.data(), rel.size(), h);
        std::ifstream f(p, std::ios::binary);
        std::vector<char> buf(1 << 16);
        while (f) {
            f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            h = fnv1a64(buf.data(), static_cast<std::size_t>(f.gcount()), h);
        }
    }
    return h;
}

}  // namespace camscope
