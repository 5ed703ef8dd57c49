// Python bindings for the core pipeline. Arrays are numpy C-order volumes
// indexed [z, y, x]; shape tuples follow the same order. Lesion centers and
// radii returned by generate_case are converted to [z, y, x] as well.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "camscope/cam.hpp"
#include "camscope/errors.hpp"
#include "camscope/metrics.hpp"
#include "camscope/model.hpp"
#include "camscope/phantom.hpp"
#include "camscope/preprocess.hpp"
#include "camscope/train.hpp"
#include "camscope/volume_store.hpp"

namespace py = pybind11;
using namespace camscope;

namespace {

template <typename T>
Grid3<T> grid_from_array(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 3) throw std::invalid_argument("expected a 3-D array indexed [z, y, x]");
    Grid3<T> v(static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)),
               static_cast<int>(a.shape(0)));
    std::memcpy(v.v.data(), a.data(), sizeof(T) * v.size());
    return v;
}

template <typename T>
py::array_t<T> grid_to_array(const Grid3<T>& v) {
    py::array_t<T> a({v.nz, v.ny, v.nx});
    std::memcpy(a.mutable_data(), v.v.data(), sizeof(T) * v.size());
    return a;
}

std::array<int, 3> shape_from_zyx(const std::array<int, 3>& zyx) {
    return {zyx[2], zyx[1], zyx[0]};
}

py::dict classify_dict(const FeatureStack& st) {
    py::dict d;
    d["logits"] = py::make_tuple(st.logits[0], st.logits[1]);
    d["likelihoods"] = py::make_tuple(st.likelihoods[0], st.likelihoods[1]);
    d["predicted"] = st.predicted;
    return d;
}

struct PyModel {
    Model model;

    explicit PyModel(Model m) : model(std::move(m)) {}

    static PyModel from_preset(const std::string& preset, int attention_blocks,
                               std::uint64_t seed) {
        ModelConfig cfg;
        if (preset == "full")
            cfg = ModelConfig::full();
        else if (preset == "desk")
            cfg = ModelConfig::desk();
        else
            throw std::invalid_argument("unknown preset '" + preset + "'");
        cfg.attention_blocks = attention_blocks;
        cfg.seed = seed;
        Model m(cfg);
        m.init_params();
        return PyModel(std::move(m));
    }

    static PyModel from_config_json(const std::string& text) {
        Model m(model_config_from_json(text));
        m.init_params();
        return PyModel(std::move(m));
    }

    static PyModel load(const std::filesystem::path& path) {
        return PyModel(load_checkpoint(path));
    }

    void save(const std::filesystem::path& path) const {
        save_checkpoint(path, model, CheckpointExtra{});
    }

    std::string config_json() const { return model_config_to_json(model.config); }

    py::dict forward(const py::array_t<double, py::array::c_style | py::array::forcecast>& vhat)
        const {
        const FeatureStack st = model.forward(grid_from_array<double>(vhat));
        return classify_dict(st);
    }

    py::dict cam(const py::array_t<double, py::array::c_style | py::array::forcecast>& vhat,
                 int class_index, double tau) const {
        const FeatureStack st = model.forward(grid_from_array<double>(vhat));
        const CamResult r = compute_cam(model, st, class_index, tau);
        py::dict d = classify_dict(st);
        d["alpha"] = r.alpha;
        d["map"] = grid_to_array(r.map);
        return d;
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "suspicious-region pipeline core (volumes indexed [z, y, x])";

    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

    m.def(
        "apply_lung_window",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& ct, double level,
           double width) {
            WindowSetting w{level, width};
            return grid_to_array(apply_lung_window(grid_from_array<float>(ct), w));
        },
        py::arg("ct"), py::arg("level") = -550.0, py::arg("width") = 1500.0,
        "Window H.U. values onto [-1, 1].");

    m.def(
        "preprocess_case",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& ct,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& mask,
           const std::array<int, 3>& target_shape_zyx, double level, double width) {
            VolumeMeta meta;
            const auto ctg = grid_from_array<float>(ct);
            meta.shape = {ctg.nx, ctg.ny, ctg.nz};
            meta.value_kind = ValueKind::hounsfield;
            meta.case_id = "py";
            const LungVolume lv =
                preprocess_case(ctg, grid_from_array<float>(mask), meta,
                                shape_from_zyx(target_shape_zyx), WindowSetting{level, width});
            return grid_to_array(lv.data);
        },
        py::arg("ct"), py::arg("mask"), py::arg("target_shape"), py::arg("level") = -550.0,
        py::arg("width") = 1500.0, "Window, mask, and resample a CT volume.");

    m.def(
        "resample_trilinear",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& v,
           const std::array<int, 3>& target_shape_zyx) {
            const auto s = shape_from_zyx(target_shape_zyx);
            return grid_to_array(resample_trilinear(grid_from_array<double>(v), s[0], s[1], s[2]));
        },
        py::arg("volume"), py::arg("target_shape"));

    m.def(
        "generate_case",
        [](const std::string& spec_json, int case_index, int label) {
            const PhantomSpec spec = phantom_spec_from_json(spec_json);
            const PhantomCase pc = generate_case(spec, case_index, label);
            py::list lesions;
            for (const auto& l : pc.lesions) {
                py::dict d;
                d["lobe"] = to_string(l.lobe);
                d["kind"] = to_string(l.kind);
                d["center"] = py::make_tuple(l.center[2], l.center[1], l.center[0]);
                d["radii"] = py::make_tuple(l.radii[2], l.radii[1], l.radii[0]);
                lesions.append(d);
            }
            py::dict out;
            out["volume"] = grid_to_array(pc.volume);
            out["mask"] = grid_to_array(pc.mask);
            out["label"] = pc.label;
            out["lesions"] = lesions;
            return out;
        },
        py::arg("spec_json"), py::arg("case_index"), py::arg("label"),
        "Deterministic phantom case from a spec JSON string.");

    m.def(
        "roc_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            return roc_auc(scores, labels).auc;
        },
        py::arg("scores"), py::arg("labels"));

    m.def("select_layer", &select_layer);

    py::class_<PyModel>(m, "Model")
        .def_static("from_preset", &PyModel::from_preset, py::arg("preset"),
                    py::arg("attention_blocks") = 1, py::arg("seed") = 0)
        .def_static("from_config_json", &PyModel::from_config_json, py::arg("config_json"))
        .def_static("load", &PyModel::load, py::arg("path"))
        .def("save", &PyModel::save, py::arg("path"))
        .def_property_readonly("config_json", &PyModel::config_json)
        .def("forward", &PyModel::forward, py::arg("v_hat"),
             "Classify a preprocessed volume; returns logits/likelihoods/predicted.")
        .def("cam", &PyModel::cam, py::arg("v_hat"), py::arg("class_index") = 1,
             py::arg("tau") = 0.1,
             "Forward plus activation map at model input scale ([z,y,x] array).");
}
