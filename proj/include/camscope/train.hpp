#pragma once
#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "camscope/metrics.hpp"
#include "camscope/model.hpp"
#include "camscope/preprocess.hpp"
#include "camscope/volume_store.hpp"

namespace camscope {

struct TrainConfig {
    int epochs = 100;   // full-scale run defaults
    int batch_size = 16;
    double lr = 1e-4;
    double lr_decay = 0.85;  // applied every lr_step epochs
    int lr_step = 10;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

std::string train_config_to_json(const TrainConfig& tc);
TrainConfig train_config_from_json(const std::string& text);

// epoch is 1-based: lr * decay^floor((epoch-1)/step)
double lr_at_epoch(const TrainConfig& tc, int epoch);

// In-memory case: stored volume preprocessed to the model input shape.
struct LoadedCase {
    std::string case_id;
    VolumeF v_hat;  // windowed, masked, resampled
    int label = 0;
    std::vector<LesionAnnotation> lesions;      // on the stored grid
    std::array<int, 3> stored_shape{0, 0, 0};   // original volume shape
};

std::vector<LoadedCase> load_cases(const DatasetManifest& manifest,
                                   const std::array<int, 3>& input_shape,
                                   const WindowSetting& window = {});

class Adam {
public:
    Adam(const ModelParams& reference, const TrainConfig& tc);
    void step(ModelParams& params, const ModelParams& grads, double lr);

private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0, train_loss = 0.0, val_accuracy = 0.0;
};

struct TrainResult {
    int best_epoch = 0;
    double best_val_accuracy = 0.0;
    std::vector<EpochLog> log;
};

// Initializes the model from its config seed, runs the Adam/cross-entropy
// loop, restores the epoch with the best validation accuracy (earliest on
// ties) and, when out_dir is non-empty, writes model.ckpt and train_log.csv
// there. Throws std::runtime_error if the loss turns non-finite.
TrainResult train(Model& model, const std::vector<LoadedCase>& train_set,
                  const std::vector<LoadedCase>& val_set, const TrainConfig& tc,
                  const std::filesystem::path& out_dir = {}, std::ostream* progress = nullptr);

struct EvalCase {
    std::string case_id;
    int label = 0, predicted = 0;
    double score = 0.0;  // class-1 likelihood
    int lesions_total = 0, lesions_identified = 0;
};

struct EvalReport {
    RocCurve roc;
    SensSpec fixed_half, youden;  // operating points at 0.5 and at max J
    double accuracy = 0.0;
    IdentStats ident;
    double cam_threshold = 0.1;
    std::vector<EvalCase> cases;
};

// Scores every case; for annotated (label 1) cases also computes the class-1
// heatmap at the stored volume scale and tallies identification.
EvalReport evaluate(const Model& model, const std::vector<LoadedCase>& cases,
                    double cam_threshold = 0.1, bool with_cam = true,
                    std::ostream* progress = nullptr);

void write_report_json(const std::filesystem::path& path, const EvalReport& report);
void write_roc_csv(const std::filesystem::path& path, const RocCurve& curve);
void write_train_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace camscope
