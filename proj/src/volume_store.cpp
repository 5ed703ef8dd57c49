#include "camscope/volume_store.hpp"

#include <bit>
#include <fstream>
#include <set>

#include "camscope/errors.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "f32raw payloads are little-endian; big-endian hosts unsupported");

namespace camscope {

using nlohmann::json;

std::string to_string(ValueKind k) {
    switch (k) {
        case ValueKind::hounsfield: return "hounsfield";
        case ValueKind::normalized: return "normalized";
        case ValueKind::mask: return "mask";
        case ValueKind::heatmap: return "heatmap";
    }
    return "?";
}

ValueKind value_kind_from_string(const std::string& s) {
    if (s == "hounsfield") return ValueKind::hounsfield;
    if (s == "normalized") return ValueKind::normalized;
    if (s == "mask") return ValueKind::mask;
    if (s == "heatmap") return ValueKind::heatmap;
    throw FormatError("unknown value_kind: " + s);
}

std::string to_string(Lobe l) {
    switch (l) {
        case Lobe::LUL: return "LUL";
        case Lobe::LLL: return "LLL";
        case Lobe::RUL: return "RUL";
        case Lobe::RML: return "RML";
        case Lobe::RLL: return "RLL";
    }
    return "?";
}

Lobe lobe_from_string(const std::string& s) {
    if (s == "LUL") return Lobe::LUL;
    if (s == "LLL") return Lobe::LLL;
    if (s == "RUL") return Lobe::RUL;
    if (s == "RML") return Lobe::RML;
    if (s == "RLL") return Lobe::RLL;
    throw FormatError("unknown lobe: " + s);
}

std::string to_string(LesionKind k) {
    return k == LesionKind::ggo ? "ggo" : "consolidation";
}

LesionKind lesion_kind_from_string(const std::string& s) {
    if (s == "ggo") return LesionKind::ggo;
    if (s == "consolidation") return LesionKind::consolidation;
    throw FormatError("unknown lesion kind: " + s);
}

void VolumeMeta::validate() const {
    for (int d : shape)
        if (d < 1) throw std::invalid_argument("VolumeMeta: shape components must be >= 1");
    for (double s : spacing_mm)
        if (!(s > 0)) throw std::invalid_argument("VolumeMeta: spacing must be > 0");
    if (label && *label != 0 && *label != 1)
        throw std::invalid_argument("VolumeMeta: label must be 0 or 1");
}

namespace {

std::filesystem::path payload_path(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".f32raw";
    return p;
}

std::filesystem::path sidecar_path(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".meta.json";
    return p;
}

void check_unique_case_ids(const DatasetManifest& m) {
    std::set<std::string> ids;
    for (const auto& e : m.entries)
        if (!ids.insert(e.case_id).second)
            throw std::invalid_argument("manifest: duplicate case_id " + e.case_id);
}

void check_split(const std::string& s) {
    if (s != "train" && s != "val" && s != "test" && s != "all")
        throw std::invalid_argument("manifest: unknown split " + s);
}

json lesion_to_json(const LesionAnnotation& l) {
    return json{{"lobe", to_string(l.lobe)},
                {"center", l.center},
                {"radii", l.radii},
                {"kind", to_string(l.kind)}};
}

LesionAnnotation lesion_from_json(const json& j) {
    LesionAnnotation l;
    l.lobe = lobe_from_string(j.at("lobe").get<std::string>());
    l.center = j.at("center").get<std::array<int, 3>>();
    l.radii = j.at("radii").get<std::array<double, 3>>();
    l.kind = lesion_kind_from_string(j.at("kind").get<std::string>());
    for (double r : l.radii)
        if (!(r > 0)) throw FormatError("lesion radii must be > 0");
    return l;
}

}  // namespace

void write_volume(const VolumeF& data, const VolumeMeta& meta,
                  const std::filesystem::path& stem) {
    meta.validate();
    if (data.nx != meta.shape[0] || data.ny != meta.shape[1] || data.nz != meta.shape[2])
        throw std::invalid_argument("write_volume: tensor shape disagrees with meta.shape");

    json j{{"shape", meta.shape},
           {"spacing_mm", meta.spacing_mm},
           {"value_kind", to_string(meta.value_kind)},
           {"case_id", meta.case_id}};
    if (meta.label) j["label"] = *meta.label;

    {
        std::ofstream f(sidecar_path(stem));
        if (!f) throw IoError("cannot write " + sidecar_path(stem).string());
        f << j.dump(2) << "\n";
        if (!f) throw IoError("write failed: " + sidecar_path(stem).string());
    }
    {
        std::ofstream f(payload_path(stem), std::ios::binary);
        if (!f) throw IoError("cannot write " + payload_path(stem).string());
        f.write(reinterpret_cast<const char*>(data.v.data()),
                static_cast<std::streamsize>(data.v.size() * sizeof(float)));
        if (!f) throw IoError("write failed: " + payload_path(stem).string());
    }
}

std::pair<VolumeF, VolumeMeta> read_volume(const std::filesystem::path& stem) {
    std::ifstream sf(sidecar_path(stem));
    if (!sf) throw FormatError("missing sidecar: " + sidecar_path(stem).string());
    json j;
    try {
        sf >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad sidecar " + sidecar_path(stem).string() + ": " + e.what());
    }

    VolumeMeta meta;
    try {
        meta.shape = j.at("shape").get<std::array<int, 3>>();
        meta.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
        meta.value_kind = value_kind_from_string(j.at("value_kind").get<std::string>());
        meta.case_id = j.at("case_id").get<std::string>();
        if (j.contains("label") && !j["label"].is_null()) meta.label = j["label"].get<int>();
    } catch (const json::exception& e) {
        throw FormatError("bad sidecar " + sidecar_path(stem).string() + ": " + e.what());
    }
    try {
        meta.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("bad sidecar: ") + e.what());
    }

    std::ifstream pf(payload_path(stem), std::ios::binary | std::ios::ate);
    if (!pf) throw FormatError("missing payload: " + payload_path(stem).string());
    const auto bytes = static_cast<std::size_t>(pf.tellg());
    const auto expect =
        static_cast<std::size_t>(meta.shape[0]) * meta.shape[1] * meta.shape[2] * sizeof(float);
    if (bytes != expect)
        throw FormatError("payload byte count " + std::to_string(bytes) + " != expected " +
                          std::to_string(expect) + " for " + payload_path(stem).string());

    VolumeF vol(meta.shape[0], meta.shape[1], meta.shape[2]);
    pf.seekg(0);
    pf.read(reinterpret_cast<char*>(vol.v.data()), static_cast<std::streamsize>(bytes));
    if (!pf) throw IoError("read failed: " + payload_path(stem).string());
    return {std::move(vol), std::move(meta)};
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    check_split(manifest.split);
    check_unique_case_ids(manifest);

    json entries = json::array();
    for (const auto& e : manifest.entries) {
        json lesions = json::array();
        for (const auto& l : e.lesions) lesions.push_back(lesion_to_json(l));
        entries.push_back(json{{"case_id", e.case_id},
                               {"volume", e.volume},
                               {"mask", e.mask},
                               {"label", e.label},
                               {"lesions", lesions}});
    }
    json j{{"split", manifest.split}, {"seed", manifest.seed}, {"entries", entries}};

    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path, bool check_paths) {
    std::ifstream f(path);
    if (!f) throw FormatError("missing manifest: " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad manifest " + path.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.base_dir = path.parent_path();
    try {
        m.split = j.at("split").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.case_id = je.at("case_id").get<std::string>();
            e.volume = je.at("volume").get<std::string>();
            e.mask = je.at("mask").get<std::string>();
            e.label = je.at("label").get<int>();
            for (const auto& jl : je.at("lesions")) e.lesions.push_back(lesion_from_json(jl));
            if (e.label != 0 && e.label != 1)
                throw FormatError("manifest: label must be 0 or 1");
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw FormatError("bad manifest " + path.string() + ": " + e.what());
    }
    if (m.split != "train" && m.split != "val" && m.split != "test" && m.split != "all")
        throw FormatError("manifest: unknown split " + m.split);
    check_unique_case_ids(m);

    if (check_paths) {
        for (const auto& e : m.entries) {
            for (const auto& stem : {m.volume_stem(e), m.mask_stem(e)}) {
                auto p = stem;
                p += ".f32raw";
                if (!std::filesystem::exists(p))
                    throw FormatError("manifest references missing volume: " + p.string());
            }
        }
    }
    return m;
}

}  // namespace camscope
