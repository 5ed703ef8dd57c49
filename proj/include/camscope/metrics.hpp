#pragma once
#include <array>
#include <string>
#include <vector>

#include "camscope/tensor.hpp"
#include "camscope/volume_store.hpp"

namespace camscope {

struct RocPoint {
    double fpr = 0.0, tpr = 0.0, threshold = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // from (0,0) to (1,1), thresholds descending
    double auc = 0.0;              // trapezoid area; equals the tie-aware pair statistic
};

// Scores are class-1 likelihoods, labels 0/1; both classes must be present.
RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct SensSpec {
    double sensitivity = 0.0, specificity = 0.0, threshold = 0.5;
};

// positive call when score >= threshold
SensSpec sens_spec_at(const std::vector<double>& scores, const std::vector<int>& labels,
                      double threshold);

// maximizes sensitivity + specificity - 1 over observed scores; ties resolve
// to the lowest threshold
SensSpec youden_best(const std::vector<double>& scores, const std::vector<int>& labels);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

// A lesion counts as identified when the heatmap exceeds `threshold` somewhere
// inside its ellipsoid support. Heatmap and annotation share the volume grid.
bool lesion_identified(const VolumeD& heatmap, const LesionAnnotation& lesion,
                       double threshold = 0.1);

// Per-lobe and per-case identification tallies across annotated cases.
struct IdentStats {
    std::array<int, kNumLobes> lobe_total{};
    std::array<int, kNumLobes> lobe_identified{};
    int lesion_total = 0, lesion_identified_n = 0;
    int case_total = 0, case_identified = 0;

    // returns how many of this case's lesions were identified
    int add_case(const VolumeD& heatmap, const std::vector<LesionAnnotation>& lesions,
                 double threshold = 0.1);
    double lobe_rate(int lobe) const;  // 0 when the lobe has no lesions
    double lesion_rate() const;
    double case_rate() const;
};

// three significant digits, e.g. 0.0952381 -> "9.52", 0.830 -> "83.0"
std::string format_percent3(double fraction);

}  // namespace camscope
