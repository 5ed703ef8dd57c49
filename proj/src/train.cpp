#include "camscope/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "camscope/cam.hpp"
#include "camscope/errors.hpp"
#include "camscope/rng.hpp"
#include "json.hpp"

namespace camscope {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0))
        throw std::invalid_argument("train config: lr_decay must be in (0,1]");
    if (lr_step < 1) throw std::invalid_argument("train config: lr_step must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw std::invalid_argument("train config: betas must be in [0,1)");
    if (!(eps > 0.0)) throw std::invalid_argument("train config: eps must be > 0");
}

std::string train_config_to_json(const TrainConfig& tc) {
    json j{{"epochs", tc.epochs},   {"batch_size", tc.batch_size}, {"lr", tc.lr},
           {"lr_decay", tc.lr_decay}, {"lr_step", tc.lr_step},     {"beta1", tc.beta1},
           {"beta2", tc.beta2},     {"eps", tc.eps},               {"seed", tc.seed}};
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError("train config: invalid JSON");
    TrainConfig tc;
    try {
        if (j.count("epochs")) j.at("epochs").get_to(tc.epochs);
        if (j.count("batch_size")) j.at("batch_size").get_to(tc.batch_size);
        if (j.count("lr")) j.at("lr").get_to(tc.lr);
        if (j.count("lr_decay")) j.at("lr_decay").get_to(tc.lr_decay);
        if (j.count("lr_step")) j.at("lr_step").get_to(tc.lr_step);
        if (j.count("beta1")) j.at("beta1").get_to(tc.beta1);
        if (j.count("beta2")) j.at("beta2").get_to(tc.beta2);
        if (j.count("eps")) j.at("eps").get_to(tc.eps);
        if (j.count("seed")) j.at("seed").get_to(tc.seed);
    } catch (const json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    return tc;
}

double lr_at_epoch(const TrainConfig& tc, int epoch) {
    if (epoch < 1) throw std::invalid_argument("lr_at_epoch: epoch is 1-based");
    return tc.lr * std::pow(tc.lr_decay, (epoch - 1) / tc.lr_step);
}

std::vector<LoadedCase> load_cases(const DatasetManifest& manifest,
                                   const std::array<int, 3>& input_shape,
                                   const WindowSetting& window) {
    std::vector<LoadedCase> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        auto [vol, meta] = read_volume(manifest.volume_stem(e));
        auto [mask, mmeta] = read_volume(manifest.mask_stem(e));
        if (meta.value_kind != ValueKind::hounsfield)
            throw FormatError("case " + e.case_id + ": volume is not in H.U.");
        if (mmeta.value_kind != ValueKind::mask)
            throw FormatError("case " + e.case_id + ": mask volume has wrong value kind");
        if (meta.label && *meta.label != e.label)
            throw FormatError("case " + e.case_id + ": manifest and sidecar labels disagree");
        LungVolume lv = preprocess_case(vol, mask, meta, input_shape, window);
        LoadedCase lc;
        lc.case_id = e.case_id;
        lc.v_hat = std::move(lv.data);
        lc.label = e.label;
        lc.lesions = e.lesions;
        lc.stored_shape = meta.shape;
        out.push_back(std::move(lc));
    }
    return out;
}

// ------------------------------------------------------------------- adam ---

namespace {
std::vector<std::pair<double*, std::size_t>> tensor_ptrs(ModelParams& p) {
    std::vector<std::pair<double*, std::size_t>> out;
    for_each_tensor(p, [&](const std::string&, double* d, std::size_t n) {
        out.emplace_back(d, n);
    });
    return out;
}

std::vector<std::pair<const double*, std::size_t>> tensor_ptrs(const ModelParams& p) {
    std::vector<std::pair<const double*, std::size_t>> out;
    for_each_tensor(p, [&](const std::string&, const double* d, std::size_t n) {
        out.emplace_back(d, n);
    });
    return out;
}

void accumulate(ModelParams& acc, const ModelParams& g) {
    auto pa = tensor_ptrs(acc);
    auto pg = tensor_ptrs(g);
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i].second; ++j) pa[i].first[j] += pg[i].first[j];
}
}  // namespace

Adam::Adam(const ModelParams& reference, const TrainConfig& tc)
    : beta1_(tc.beta1), beta2_(tc.beta2), eps_(tc.eps) {
    for (const auto& [ptr, n] : tensor_ptrs(reference)) {
        (void)ptr;
        m_.emplace_back(n, 0.0);
        v_.emplace_back(n, 0.0);
    }
}

void Adam::step(ModelParams& params, const ModelParams& grads, double lr) {
    auto pp = tensor_ptrs(params);
    auto pg = tensor_ptrs(grads);
    if (pp.size() != m_.size()) throw std::invalid_argument("Adam: parameter layout changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < pp.size(); ++i) {
        double* p = pp[i].first;
        const double* g = pg[i].first;
        double* m = m_[i].data();
        double* v = v_[i].data();
        for (std::size_t j = 0; j < pp[i].second; ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

// ------------------------------------------------------------------- train ---

TrainResult train(Model& model, const std::vector<LoadedCase>& train_set,
                  const std::vector<LoadedCase>& val_set, const TrainConfig& tc,
                  const std::filesystem::path& out_dir, std::ostream* progress) {
    tc.validate();
    if (train_set.empty() || val_set.empty())
        throw std::invalid_argument("train: empty train or validation set");
    model.init_params();
    Adam opt(model.params, tc);
    TrainResult res;
    ModelParams best = model.params;
    double best_acc = -1.0;
    const int n = static_cast<int>(train_set.size());
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        const double lr = lr_at_epoch(tc, epoch);
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle(derive_seed(tc.seed, "shuffle.epoch" + std::to_string(epoch)));
        for (int i = n - 1; i >= 1; --i) std::swap(order[i], order[shuffle.uniform_int(0, i)]);
        double loss_sum = 0.0;
        for (int start = 0; start < n; start += tc.batch_size) {
            const int nb = std::min(tc.batch_size, n - start);
            ModelParams gacc = make_params(model.config);
            for (int k = 0; k < nb; ++k) {
                const LoadedCase& lc = train_set[order[start + k]];
                const FeatureStack st = model.forward(to_double(lc.v_hat));
                loss_sum += -std::log(std::max(st.likelihoods[lc.label], 1e-300));
                std::array<double, 2> dl{st.likelihoods[0], st.likelihoods[1]};
                dl[lc.label] -= 1.0;
                dl[0] /= nb;
                dl[1] /= nb;
                accumulate(gacc, model.backward(st, dl).grads);
            }
            opt.step(model.params, gacc, lr);
        }
        const double train_loss = loss_sum / n;
        if (!std::isfinite(train_loss))
            throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch));
        int hits = 0;
        for (const auto& lc : val_set)
            hits += model.forward(to_double(lc.v_hat)).predicted == lc.label ? 1 : 0;
        const double vacc = static_cast<double>(hits) / static_cast<double>(val_set.size());
        res.log.push_back({epoch, lr, train_loss, vacc});
        if (progress)
            *progress << "epoch " << epoch << "  lr " << lr << "  train_loss " << train_loss
                      << "  val_acc " << vacc << std::endl;
        if (vacc > best_acc) {
            best_acc = vacc;
            res.best_epoch = epoch;
            best = model.params;
        }
    }
    model.params = std::move(best);
    res.best_val_accuracy = best_acc;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_checkpoint(out_dir / "model.ckpt", model,
                        CheckpointExtra{res.best_epoch, best_acc, train_config_to_json(tc)});
        write_train_log_csv(out_dir / "train_log.csv", res.log);
    }
    return res;
}

// ---------------------------------------------------------------- evaluate ---

EvalReport evaluate(const Model& model, const std::vector<LoadedCase>& cases,
                    double cam_threshold, bool with_cam, std::ostream* progress) {
    if (cases.empty()) throw std::invalid_argument("evaluate: no cases");
    EvalReport rep;
    rep.cam_threshold = cam_threshold;
    std::vector<double> scores;
    std::vector<int> labels, preds;
    for (const auto& lc : cases) {
        const FeatureStack st = model.forward(to_double(lc.v_hat));
        EvalCase ec;
        ec.case_id = lc.case_id;
        ec.label = lc.label;
        ec.predicted = st.predicted;
        ec.score = st.likelihoods[1];
        scores.push_back(ec.score);
        labels.push_back(lc.label);
        preds.push_back(st.predicted);
        if (with_cam && !lc.lesions.empty()) {
            const CamResult cam = compute_cam(model, st, 1, cam_threshold);
            VolumeD map = cam.map;
            if (lc.stored_shape != model.config.input_shape) {
                map = resample_trilinear(map, lc.stored_shape[0], lc.stored_shape[1],
                                         lc.stored_shape[2]);
                for (double& x : map.v)
                    if (x <= cam_threshold) x = 0.0;
            }
            ec.lesions_total = static_cast<int>(lc.lesions.size());
            ec.lesions_identified = rep.ident.add_case(map, lc.lesions, cam_threshold);
        }
        if (progress) *progress << lc.case_id << "  score " << ec.score << std::endl;
        rep.cases.push_back(std::move(ec));
    }
    rep.roc = roc_auc(scores, labels);
    rep.fixed_half = sens_spec_at(scores, labels, 0.5);
    rep.youden = youden_best(scores, labels);
    rep.accuracy = accuracy(preds, labels);
    return rep;
}

void write_report_json(const std::filesystem::path& path, const EvalReport& rep) {
    auto point = [](const SensSpec& s) {
        return json{{"threshold", s.threshold},
                    {"sensitivity", s.sensitivity},
                    {"specificity", s.specificity}};
    };
    json lobes = json::object();
    for (int l = 0; l < kNumLobes; ++l) {
        lobes[to_string(static_cast<Lobe>(l))] = {
            {"total", rep.ident.lobe_total[l]},
            {"identified", rep.ident.lobe_identified[l]},
            {"rate", rep.ident.lobe_rate(l)},
            {"rate_percent", format_percent3(rep.ident.lobe_rate(l))}};
    }
    json cases = json::array();
    for (const auto& c : rep.cases)
        cases.push_back({{"case_id", c.case_id},
                         {"label", c.label},
                         {"predicted", c.predicted},
                         {"score", c.score},
                         {"lesions_total", c.lesions_total},
                         {"lesions_identified", c.lesions_identified}});
    json j{{"auc", rep.roc.auc},
           {"accuracy", rep.accuracy},
           {"operating_points", {{"fixed_0.5", point(rep.fixed_half)}, {"youden", point(rep.youden)}}},
           {"cam_threshold", rep.cam_threshold},
           {"identification",
            {{"case_total", rep.ident.case_total},
             {"case_identified", rep.ident.case_identified},
             {"case_rate", rep.ident.case_rate()},
             {"case_rate_percent", format_percent3(rep.ident.case_rate())},
             {"lesion_total", rep.ident.lesion_total},
             {"lesion_identified", rep.ident.lesion_identified_n},
             {"lesion_rate", rep.ident.lesion_rate()},
             {"lesion_rate_percent", format_percent3(rep.ident.lesion_rate())},
             {"lobes", lobes}}},
           {"cases", cases}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + path.string());
}

void write_roc_csv(const std::filesystem::path& path, const RocCurve& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string());
    out << "fpr,tpr,threshold\n";
    char line[128];
    for (const auto& p : curve.points) {
        std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g\n", p.fpr, p.tpr, p.threshold);
        out << line;
    }
    if (!out) throw IoError("failed writing " + path.string());
}

void write_train_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string());
    out << "epoch,lr,train_loss,val_accuracy\n";
    char line[160];
    for (const auto& e : log) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.lr, e.train_loss,
                      e.val_accuracy);
        out << line;
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace camscope
