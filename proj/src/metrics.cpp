#include "camscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace camscope {

namespace {
void check_scores(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("metrics: scores and labels differ in length");
    if (scores.empty()) throw std::invalid_argument("metrics: empty inputs");
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw std::invalid_argument("metrics: non-finite score");
        if (labels[i] == 1)
            pos = true;
        else if (labels[i] == 0)
            neg = true;
        else
            throw std::invalid_argument("metrics: labels must be 0 or 1");
    }
    if (!pos || !neg) throw std::invalid_argument("metrics: both classes must be present");
}
}  // namespace

RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_scores(scores, labels);
    const int P = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
    const int N = static_cast<int>(labels.size()) - P;
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        return scores[i] != scores[j] ? scores[i] > scores[j] : i < j;
    });
    RocCurve curve;
    curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    int tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            if (labels[order[i]] == 1)
                ++tp;
            else
                ++fp;
            ++i;
        }
        curve.points.push_back({static_cast<double>(fp) / N, static_cast<double>(tp) / P, t});
    }
    double auc = 0.0;
    for (std::size_t k = 1; k < curve.points.size(); ++k) {
        const auto& a = curve.points[k - 1];
        const auto& b = curve.points[k];
        auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
    }
    curve.auc = auc;
    return curve;
}

SensSpec sens_spec_at(const std::vector<double>& scores, const std::vector<int>& labels,
                      double threshold) {
    check_scores(scores, labels);
    int tp = 0, fn = 0, tn = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool call_pos = scores[i] >= threshold;
        if (labels[i] == 1)
            (call_pos ? tp : fn)++;
        else
            (call_pos ? fp : tn)++;
    }
    SensSpec r;
    r.threshold = threshold;
    r.sensitivity = static_cast<double>(tp) / (tp + fn);
    r.specificity = static_cast<double>(tn) / (tn + fp);
    return r;
}

SensSpec youden_best(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_scores(scores, labels);
    std::vector<double> cand = scores;
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    SensSpec best;
    double best_j = -std::numeric_limits<double>::infinity();
    for (double t : cand) {
        const SensSpec s = sens_spec_at(scores, labels, t);
        const double j = s.sensitivity + s.specificity - 1.0;
        if (j > best_j) {
            best_j = j;
            best = s;
        }
    }
    return best;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
    if (predicted.size() != labels.size() || predicted.empty())
        throw std::invalid_argument("accuracy: size mismatch or empty");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

bool lesion_identified(const VolumeD& heatmap, const LesionAnnotation& lesion, double threshold) {
    const auto& c = lesion.center;
    const auto& r = lesion.radii;
    for (int d = 0; d < 3; ++d)
        if (!(r[d] > 0.0)) throw std::invalid_argument("lesion_identified: non-positive radius");
    const int x0 = std::max(0, static_cast<int>(std::floor(c[0] - r[0])));
    const int x1 = std::min(heatmap.nx - 1, static_cast<int>(std::ceil(c[0] + r[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor(c[1] - r[1])));
    const int y1 = std::min(heatmap.ny - 1, static_cast<int>(std::ceil(c[1] + r[1])));
    const int z0 = std::max(0, static_cast<int>(std::floor(c[2] - r[2])));
    const int z1 = std::min(heatmap.nz - 1, static_cast<int>(std::ceil(c[2] + r[2])));
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = (x - c[0]) / r[0];
                const double dy = (y - c[1]) / r[1];
                const double dz = (z - c[2]) / r[2];
                if (dx * dx + dy * dy + dz * dz <= 1.0 && heatmap.at(x, y, z) > threshold)
                    return true;
            }
    return false;
}

int IdentStats::add_case(const VolumeD& heatmap, const std::vector<LesionAnnotation>& lesions,
                         double threshold) {
    ++case_total;
    int found = 0;
    for (const auto& l : lesions) {
        const int lobe = static_cast<int>(l.lobe);
        ++lobe_total[lobe];
        ++lesion_total;
        if (lesion_identified(heatmap, l, threshold)) {
            ++lobe_identified[lobe];
            ++lesion_identified_n;
            ++found;
        }
    }
    if (found > 0) ++case_identified;
    return found;
}

double IdentStats::lobe_rate(int lobe) const {
    if (lobe < 0 || lobe >= kNumLobes) throw std::invalid_argument("lobe_rate: bad lobe index");
    return lobe_total[lobe] == 0
               ? 0.0
               : static_cast<double>(lobe_identified[lobe]) / lobe_total[lobe];
}

double IdentStats::lesion_rate() const {
    return lesion_total == 0 ? 0.0 : static_cast<double>(lesion_identified_n) / lesion_total;
}

double IdentStats::case_rate() const {
    return case_total == 0 ? 0.0 : static_cast<double>(case_identified) / case_total;
}

std::string format_percent3(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%#.3g", fraction * 100.0);
    std::string s(buf);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

}  // namespace camscope
