// Metrics: AUPRC, Recall@k, pose binning by rotational geodesic distance,
// and the per-bin dataset aggregation.

#pragma once

#include <algorithm>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "segot/common.hpp"
#include "segot/manifest.hpp"

namespace segot {

/// Geodesic angle between two rotations, degrees in [0, 180].
inline double geodesic_rotation_deg(const Mat3& ra, const Mat3& rb) {
    if (!is_rotation(ra) || !is_rotation(rb))
        throw ValidationError("geodesic: inputs must be rotations (orthonormal, det +1)");
    double t = ra.transposed().mul(rb).trace();
    double c = std::clamp((t - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / kPi;
}

/// Half-open bins [0,45), [45,90), [90,135), [135,180].
inline int assign_pose_bin(double theta_deg) {
    if (!(theta_deg >= 0.0) || !(theta_deg <= 180.0))
        throw ValidationError("pose bin: angle " + std::to_string(theta_deg) +
                              " outside [0, 180]");
    if (theta_deg < 45.0) return 0;
    if (theta_deg < 90.0) return 1;
    if (theta_deg < 135.0) return 2;
    return 3;
}

inline const char* pose_bin_label(int bin) {
    switch (bin) {
        case 0: return "0-45";
        case 1: return "45-90";
        case 2: return "90-135";
        case 3: return "135-180";
        default: return "unbinned";
    }
}

struct ScoredPrediction {
    int i = 0, j = 0;
    double score = 0;
    bool is_correct = false;
};

struct PrPoint {
    double recall = 0, precision = 0;
};

/// Average-precision summation over the stepwise PR curve:
/// sum of (R_k - R_{k-1}) * P_k after a stable descending-score sort.
/// Missed positives (total_positives beyond the correct predictions present)
/// depress the reachable recall.
inline double auprc(const std::vector<ScoredPrediction>& predictions, int total_positives,
                    std::vector<PrPoint>* curve = nullptr) {
    if (total_positives < 1) throw ValidationError("auprc: total_positives must be >= 1");
    for (const auto& p : predictions)
        if (!std::isfinite(p.score)) throw ValidationError("auprc: non-finite score");
    if (predictions.empty()) {
        std::cerr << "[segot] warning: auprc over empty prediction set, reporting 0\n";
        return 0.0;
    }
    std::vector<const ScoredPrediction*> sorted;
    sorted.reserve(predictions.size());
    for (const auto& p : predictions) sorted.push_back(&p);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const ScoredPrediction* a, const ScoredPrediction* b) {
                         return a->score > b->score;
                     });
    double area = 0.0;
    int tp = 0;
    double prev_recall = 0.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        if (sorted[k]->is_correct) ++tp;
        double recall = double(tp) / total_positives;
        double precision = double(tp) / double(k + 1);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        if (curve) curve->push_back({recall, precision});
    }
    return area;
}

/// Fraction of gt-matched sources whose target is among the k highest-scoring
/// columns of their row. Column ties are broken toward the lower index.
/// Returns nullopt when the gt match set is empty.
inline std::optional<double> recall_at_k(const Mat& score_matrix, const GtAssignment& gt, int k) {
    if (k < 1) throw ValidationError("recall_at_k: k must be >= 1");
    if (gt.matches.empty()) return std::nullopt;
    int hits = 0;
    std::vector<int> order(score_matrix.cols());
    for (auto [i, j] : gt.matches) {
        if (i < 0 || i >= score_matrix.rows() || j < 0 || j >= score_matrix.cols())
            throw ValidationError("recall_at_k: gt index out of range of score matrix");
        for (int c = 0; c < score_matrix.cols(); ++c) order[c] = c;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return score_matrix(i, a) > score_matrix(i, b);
        });
        int upto = std::min(k, score_matrix.cols());
        for (int r = 0; r < upto; ++r)
            if (order[r] == j) {
                ++hits;
                break;
            }
    }
    return double(hits) / double(gt.matches.size());
}

/// One evaluated pair: scored predictions for AUPRC pooling, the raw score
/// matrix plus gt for R@k, and an optional pose angle for binning.
struct PairEvalInput {
    std::vector<ScoredPrediction> predictions;
    Mat score_matrix;
    GtAssignment gt;
    std::optional<double> geodesic_deg;
};

struct BinReport {
    std::string label;
    int pairs = 0;
    double auprc = 0.0;
    std::optional<double> r1, r5;
    std::vector<PrPoint> pr_curve;
};

struct MetricReport {
    std::vector<BinReport> bins;  // 4 pose bins + optional "unbinned"
    BinReport overall;
    bool gt_prefiltered = false;  // metadata only, echoed into the report
};

/// AUPRC is pooled over all predictions in a bin; R@k is computed per pair
/// and averaged over the bin's pairs (pairs with no gt matches are skipped
/// from the R@k average).
inline MetricReport evaluate_dataset(const std::vector<PairEvalInput>& pairs,
                                     bool gt_prefiltered = false) {
    constexpr int kUnbinned = 4;
    MetricReport report;
    report.gt_prefiltered = gt_prefiltered;

    struct Acc {
        std::vector<ScoredPrediction> pooled;
        int total_positives = 0;
        double r1_sum = 0, r5_sum = 0;
        int rk_pairs = 0;
        int pairs = 0;
    };
    std::vector<Acc> acc(6);  // 4 bins + unbinned + overall

    for (const auto& pe : pairs) {
        int bin = pe.geodesic_deg ? assign_pose_bin(*pe.geodesic_deg) : kUnbinned;
        for (Acc* a : {&acc[bin], &acc[5]}) {
            a->pairs += 1;
            a->pooled.insert(a->pooled.end(), pe.predictions.begin(), pe.predictions.end());
            a->total_positives += int(pe.gt.matches.size());
            auto r1 = recall_at_k(pe.score_matrix, pe.gt, 1);
            auto r5 = recall_at_k(pe.score_matrix, pe.gt, 5);
            if (r1) {
                a->r1_sum += *r1;
                a->r5_sum += *r5;
                a->rk_pairs += 1;
            }
        }
    }

    auto finish = [](const Acc& a, const std::string& label) {
        BinReport b;
        b.label = label;
        b.pairs = a.pairs;
        if (a.total_positives > 0 && !a.pooled.empty())
            b.auprc = auprc(a.pooled, a.total_positives, &b.pr_curve);
        if (a.rk_pairs > 0) {
            b.r1 = a.r1_sum / a.rk_pairs;
            b.r5 = a.r5_sum / a.rk_pairs;
        }
        return b;
    };

    for (int bin = 0; bin < 5; ++bin) {
        if (bin == kUnbinned && acc[bin].pairs == 0) continue;
        report.bins.push_back(finish(acc[bin], pose_bin_label(bin)));
    }
    report.overall = finish(acc[5], "overall");
    return report;
}

inline nlohmann::json report_to_json(const MetricReport& report) {
    nlohmann::json j;
    auto bin_json = [](const BinReport& b) {
        nlohmann::json jb;
        jb["label"] = b.label;
        jb["pairs"] = b.pairs;
        jb["auprc"] = b.auprc;
        if (b.r1) jb["r1"] = *b.r1;
        if (b.r5) jb["r5"] = *b.r5;
        return jb;
    };
    j["bins"] = nlohmann::json::array();
    for (const auto& b : report.bins) j["bins"].push_back(bin_json(b));
    j["overall"] = bin_json(report.overall);
    j["gt_prefiltered"] = report.gt_prefiltered;
    return j;
}

inline std::string pr_curve_csv(const BinReport& bin) {
    std::string out = "recall,precision\n";
    for (const auto& p : bin.pr_curve)
        out += std::to_string(p.recall) + "," + std::to_string(p.precision) + "\n";
    return out;
}

}  // namespace segot
