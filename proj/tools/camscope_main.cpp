// camscope: suspicious-region pipeline CLI.
//   gen      synthesize an annotated lung phantom dataset
//   train    fit the 2.5D attention classifier
//   eval     score a split: ROC/AUC, operating points, identification rates
//   explain  heatmaps + axial overlays for chosen cases
//
// Exit codes: 0 success, 2 usage/config error, 1 runtime failure.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "camscope/cam.hpp"
#include "camscope/errors.hpp"
#include "camscope/metrics.hpp"
#include "camscope/model.hpp"
#include "camscope/phantom.hpp"
#include "camscope/preprocess.hpp"
#include "camscope/train.hpp"
#include "camscope/volume_store.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace camscope;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("CAMSCOPE_SEED");
    if (!s || !*s) return std::nullopt;
    try {
        return std::stoull(s);
    } catch (const std::exception&) {
        throw UsageError("CAMSCOPE_SEED is not an unsigned integer");
    }
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool json_has_key(const std::string& text, const char* key) {
    json j = json::parse(text, nullptr, false);
    return !j.is_discarded() && j.is_object() && j.contains(key);
}

// precedence: --seed flag > seed in a config file > CAMSCOPE_SEED > 0
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, bool config_had_seed,
                           std::uint64_t config_seed) {
    if (flag) return *flag;
    if (config_had_seed) return config_seed;
    if (auto e = env_seed()) return *e;
    return 0;
}

void write_run_config(const fs::path& out_dir, const json& j) {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "run_config.json");
    if (!out) throw IoError("cannot write run_config.json in " + out_dir.string());
    out << j.dump(2) << "\n";
}

DatasetManifest load_split_manifest(const fs::path& data_dir, const std::string& split) {
    const fs::path path =
        split == "all" ? data_dir / "manifest.json" : data_dir / ("manifest_" + split + ".json");
    if (!fs::exists(path)) throw UsageError("no manifest for split '" + split + "' in " + data_dir.string());
    return read_manifest(path);
}

// ---------------------------------------------------------------------- gen --

struct GenArgs {
    std::string spec_path, out_dir;
    std::optional<std::uint64_t> seed;
};

int cmd_gen(const GenArgs& a) {
    const std::string text = slurp(a.spec_path);
    PhantomSpec spec;
    try {
        spec = phantom_spec_from_json_file(a.spec_path);
    } catch (const FormatError& e) {
        throw UsageError(e.what());
    }
    spec.seed = resolve_seed(a.seed, json_has_key(text, "seed"), spec.seed);
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto ds = generate_dataset(spec, a.out_dir);
    write_run_config(a.out_dir, json{{"command", "gen"},
                                     {"spec", json::parse(slurp(a.out_dir + "/phantom_spec.json"))},
                                     {"out", a.out_dir}});
    std::cout << "generated " << ds.train.entries.size() << " train / " << ds.val.entries.size()
              << " val / " << ds.test.entries.size() << " test cases in " << a.out_dir << "\n";
    return 0;
}

// -------------------------------------------------------------------- train --

struct TrainArgs {
    std::string data_dir, out_dir, preset = "full";
    std::string model_config_path, train_config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> attention_blocks, epochs, batch_size;
    std::optional<double> lr;
    int jobs = 1;
};

int cmd_train(const TrainArgs& a) {
    ModelConfig mc;
    bool mc_had_seed = false;
    if (!a.model_config_path.empty()) {
        const std::string text = slurp(a.model_config_path);
        try {
            mc = model_config_from_json(text);
        } catch (const FormatError& e) {
            throw UsageError(e.what());
        }
        mc_had_seed = json_has_key(text, "seed");
    } else if (a.preset == "full") {
        mc = ModelConfig::full();
    } else if (a.preset == "desk") {
        mc = ModelConfig::desk();
    } else {
        throw UsageError("unknown preset '" + a.preset + "' (expected full or desk)");
    }
    if (a.attention_blocks) mc.attention_blocks = *a.attention_blocks;

    TrainConfig tc;
    bool tc_had_seed = false;
    if (!a.train_config_path.empty()) {
        const std::string text = slurp(a.train_config_path);
        try {
            tc = train_config_from_json(text);
        } catch (const FormatError& e) {
            throw UsageError(e.what());
        }
        tc_had_seed = json_has_key(text, "seed");
    }
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.lr) tc.lr = *a.lr;

    mc.seed = resolve_seed(a.seed, mc_had_seed, mc.seed);
    tc.seed = resolve_seed(a.seed, tc_had_seed, tc.seed);
    try {
        mc.validate();
        tc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (a.jobs != 1)
        std::cerr << "note: --jobs " << a.jobs << " requested; this build runs cases serially\n";

    const auto train_manifest = load_split_manifest(a.data_dir, "train");
    const auto val_manifest = load_split_manifest(a.data_dir, "val");
    std::cout << "loading " << train_manifest.entries.size() << " train / "
              << val_manifest.entries.size() << " val cases...\n";
    const auto train_set = load_cases(train_manifest, mc.input_shape);
    const auto val_set = load_cases(val_manifest, mc.input_shape);

    write_run_config(a.out_dir, json{{"command", "train"},
                                     {"data", a.data_dir},
                                     {"out", a.out_dir},
                                     {"model_config", json::parse(model_config_to_json(mc))},
                                     {"train_config", json::parse(train_config_to_json(tc))}});
    Model model(mc);
    const TrainResult r = train(model, train_set, val_set, tc, a.out_dir, &std::cout);
    std::cout << "best epoch " << r.best_epoch << " (val accuracy " << r.best_val_accuracy
              << "); checkpoint written to " << (fs::path(a.out_dir) / "model.ckpt").string()
              << "\n";
    return 0;
}

// --------------------------------------------------------------------- eval --

struct EvalArgs {
    std::string checkpoint, data_dir, out_dir, split = "test", op_point = "fixed";
    std::string model_config_path;
    double tau = 0.1;
    bool no_cam = false;
    int jobs = 1;
};

int cmd_eval(const EvalArgs& a) {
    if (a.op_point != "fixed" && a.op_point != "youden")
        throw UsageError("--op-point must be fixed or youden");
    CheckpointExtra extra;
    const Model model = load_checkpoint(a.checkpoint, &extra);
    if (!a.model_config_path.empty()) {
        ModelConfig given;
        try {
            given = model_config_from_json(slurp(a.model_config_path));
        } catch (const FormatError& e) {
            throw UsageError(e.what());
        }
        if (model_config_to_json(given) != model_config_to_json(model.config))
            throw UsageError("--model-config disagrees with the checkpoint configuration");
    }
    if (a.jobs != 1)
        std::cerr << "note: --jobs " << a.jobs << " requested; this build runs cases serially\n";
    const auto manifest = load_split_manifest(a.data_dir, a.split);
    const auto cases = load_cases(manifest, model.config.input_shape);
    const EvalReport rep = evaluate(model, cases, a.tau, !a.no_cam, nullptr);
    fs::create_directories(a.out_dir);
    write_report_json(fs::path(a.out_dir) / "report.json", rep);
    write_roc_csv(fs::path(a.out_dir) / "roc.csv", rep.roc);
    write_run_config(a.out_dir, json{{"command", "eval"},
                                     {"checkpoint", a.checkpoint},
                                     {"data", a.data_dir},
                                     {"split", a.split},
                                     {"tau", a.tau},
                                     {"with_cam", !a.no_cam},
                                     {"op_point", a.op_point},
                                     {"model_config", json::parse(model_config_to_json(model.config))}});
    const SensSpec& op = a.op_point == "youden" ? rep.youden : rep.fixed_half;
    std::cout << "cases " << rep.cases.size() << "  auc " << rep.roc.auc << "  accuracy "
              << rep.accuracy << "\n"
              << "op-point (" << a.op_point << ", threshold " << op.threshold << "): sensitivity "
              << op.sensitivity << "  specificity " << op.specificity << "\n";
    if (!a.no_cam && rep.ident.case_total > 0)
        std::cout << "identification: lesions " << rep.ident.lesion_identified_n << "/"
                  << rep.ident.lesion_total << " ("
                  << format_percent3(rep.ident.lesion_rate()) << "%)  cases "
                  << rep.ident.case_identified << "/" << rep.ident.case_total << " ("
                  << format_percent3(rep.ident.case_rate()) << "%)\n";
    return 0;
}

// ------------------------------------------------------------------ explain --

struct ExplainArgs {
    std::string checkpoint, data_dir, out_dir, split = "all";
    std::vector<std::string> case_ids;
    int cls = 1;
    double tau = 0.1;
};

int cmd_explain(const ExplainArgs& a) {
    if (a.cls != 0 && a.cls != 1) throw UsageError("--class must be 0 or 1");
    const Model model = load_checkpoint(a.checkpoint);
    const auto manifest = load_split_manifest(a.data_dir, a.split);
    std::vector<ManifestEntry> picked;
    for (const auto& id : a.case_ids) {
        const auto it = std::find_if(manifest.entries.begin(), manifest.entries.end(),
                                     [&](const ManifestEntry& e) { return e.case_id == id; });
        if (it == manifest.entries.end())
            throw UsageError("case '" + id + "' not found in split '" + a.split + "'");
        picked.push_back(*it);
    }
    fs::create_directories(a.out_dir);
    json summary = json::array();
    for (const auto& entry : picked) {
        auto [vol, meta] = read_volume(manifest.volume_stem(entry));
        auto [mask, mmeta] = read_volume(manifest.mask_stem(entry));
        const LungVolume lv = preprocess_case(vol, mask, meta, model.config.input_shape);
        const FeatureStack st = model.forward(to_double(lv.data));
        const CamResult cam = compute_cam(model, st, a.cls, a.tau);
        VolumeD map = cam.map;
        if (meta.shape != model.config.input_shape) {
            map = resample_trilinear(map, meta.shape[0], meta.shape[1], meta.shape[2]);
            for (double& x : map.v)
                if (x <= a.tau) x = 0.0;
        }
        VolumeMeta hm;
        hm.shape = meta.shape;
        hm.spacing_mm = meta.spacing_mm;
        hm.value_kind = ValueKind::heatmap;
        hm.case_id = entry.case_id;
        write_volume(to_float(map), hm, fs::path(a.out_dir) / (entry.case_id + "_cam"));
        const VolumeF base = apply_lung_window(vol);
        const auto written = write_overlay_slices(a.out_dir, entry.case_id, base, map);
        double mx = 0.0;
        std::size_t active = 0;
        for (double x : map.v) {
            mx = std::max(mx, x);
            active += x > 0.0 ? 1 : 0;
        }
        summary.push_back({{"case_id", entry.case_id},
                           {"class", a.cls},
                           {"tau", a.tau},
                           {"score", st.likelihoods[a.cls]},
                           {"predicted", st.predicted},
                           {"map_max", mx},
                           {"active_voxels", active},
                           {"overlays", written.size()}});
        std::cout << entry.case_id << ": score " << st.likelihoods[a.cls] << ", "
                  << written.size() << " overlay slice(s)\n";
    }
    std::ofstream out(fs::path(a.out_dir) / "explain.json");
    out << summary.dump(2) << "\n";
    write_run_config(a.out_dir, json{{"command", "explain"},
                                     {"checkpoint", a.checkpoint},
                                     {"data", a.data_dir},
                                     {"split", a.split},
                                     {"cases", a.case_ids},
                                     {"class", a.cls},
                                     {"tau", a.tau}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"suspicious-region pipeline: phantom generation, 2.5D attention classifier, "
                 "activation maps"};
    app.require_subcommand(1);

    GenArgs ga;
    auto* gen = app.add_subcommand("gen", "generate an annotated phantom dataset");
    gen->add_option("--spec", ga.spec_path, "phantom spec JSON")->required();
    gen->add_option("--out", ga.out_dir, "output dataset directory")->required();
    gen->add_option("--seed", ga.seed, "override the generation seed");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "train the classifier");
    tr->add_option("--data", ta.data_dir, "dataset directory (from gen)")->required();
    tr->add_option("--out", ta.out_dir, "run directory for checkpoint and logs")->required();
    tr->add_option("--preset", ta.preset, "model preset: full or desk (default full)");
    tr->add_option("--model-config", ta.model_config_path, "model config JSON (overrides preset)");
    tr->add_option("--train-config", ta.train_config_path, "training config JSON");
    tr->add_option("--attention-blocks", ta.attention_blocks, "number of attention gates (0..6)");
    tr->add_option("--epochs", ta.epochs, "training epochs");
    tr->add_option("--batch-size", ta.batch_size, "minibatch size");
    tr->add_option("--lr", ta.lr, "initial learning rate");
    tr->add_option("--seed", ta.seed, "global seed override");
    tr->add_option("--jobs", ta.jobs, "worker count (this build is serial)");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    ev->add_option("--checkpoint", ea.checkpoint, "model checkpoint")->required();
    ev->add_option("--data", ea.data_dir, "dataset directory")->required();
    ev->add_option("--out", ea.out_dir, "output directory for report.json / roc.csv")->required();
    ev->add_option("--split", ea.split, "train | val | test | all (default test)");
    ev->add_option("--model-config", ea.model_config_path,
                   "expected model config; must match the checkpoint");
    ev->add_option("--tau", ea.tau, "heatmap exclusion threshold (default 0.1)");
    ev->add_option("--op-point", ea.op_point, "reported operating point: fixed | youden");
    ev->add_flag("--no-cam", ea.no_cam, "skip heatmaps and identification rates");
    ev->add_option("--jobs", ea.jobs, "worker count (this build is serial)");

    ExplainArgs xa;
    auto* ex = app.add_subcommand("explain", "write heatmaps and overlays for cases");
    ex->add_option("--checkpoint", xa.checkpoint, "model checkpoint")->required();
    ex->add_option("--data", xa.data_dir, "dataset directory")->required();
    ex->add_option("--case", xa.case_ids, "case id (repeatable)")->required();
    ex->add_option("--out", xa.out_dir, "output directory")->required();
    ex->add_option("--split", xa.split, "manifest split to search (default all)");
    ex->add_option("--class", xa.cls, "class whose score is explained (default 1)");
    ex->add_option("--tau", xa.tau, "heatmap exclusion threshold (default 0.1; 0 disables)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(ga);
        if (tr->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_eval(ea);
        if (ex->parsed()) return cmd_explain(xa);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
