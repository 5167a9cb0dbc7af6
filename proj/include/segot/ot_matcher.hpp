// Differentiable segment matching: affinity construction, dustbin
// augmentation, log-domain Sinkhorn normalization, and discretization to
// one-to-one correspondences.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "segot/common.hpp"
#include "segot/segment_features.hpp"

namespace segot {

struct MatcherConfig {
    double temperature = 0.1;
    int iterations = 50;
    bool normalize_descriptors = true;
    bool mutual_check = false;

    void validate() const {
        if (!(temperature > 0)) throw ValidationError("matcher: temperature must be > 0");
        if (iterations < 1) throw ValidationError("matcher: iterations must be >= 1");
    }
};

struct DustbinParam {
    double alpha = 1.0;

    void validate() const {
        if (!std::isfinite(alpha)) throw ValidationError("dustbin: alpha must be finite");
    }
};

/// Affinity over the valid descriptor rows only. `src_index` / `tgt_index`
/// map compacted rows/cols back to original slots.
struct AffinityResult {
    Mat s;  // m1 x m2 over valid rows
    std::vector<int> src_index;
    std::vector<int> tgt_index;
    std::vector<int> zero_norm_src;  // slots flagged during normalization
    std::vector<int> zero_norm_tgt;
};

namespace detail {

inline Mat compact_rows(const SegmentDescriptors& g, std::vector<int>& index) {
    index.clear();
    for (int i = 0; i < g.count(); ++i)
        if (g.valid[i]) index.push_back(i);
    Mat out(int(index.size()), g.dim());
    for (int r = 0; r < out.rows(); ++r) {
        const double* src = g.g.row_ptr(index[r]);
        double* dst = out.row_ptr(r);
        for (int c = 0; c < out.cols(); ++c) dst[c] = src[c];
    }
    return out;
}

inline void l2_normalize_rows(Mat& m, const std::vector<int>& index, std::vector<int>& zero_flagged) {
    for (int r = 0; r < m.rows(); ++r) {
        double* row = m.row_ptr(r);
        double n2 = 0;
        for (int c = 0; c < m.cols(); ++c) n2 += row[c] * row[c];
        double n = std::sqrt(n2);
        if (n < 1e-12) {
            zero_flagged.push_back(index[r]);
            for (int c = 0; c < m.cols(); ++c) row[c] = 0.0;
        } else {
            for (int c = 0; c < m.cols(); ++c) row[c] /= n;
        }
    }
}

}  // namespace detail

/// S[i,j] = <g1_i, g2_j> over valid rows; with `normalize`, rows are
/// L2-normalized first so entries are cosines in [-1,1]. Zero-norm rows under
/// normalization become all-zero (similarity 0) and are flagged.
inline AffinityResult affinity(const SegmentDescriptors& g1, const SegmentDescriptors& g2,
                               bool normalize) {
    if (g1.dim() != g2.dim())
        throw ValidationError("affinity: descriptor dims differ (" + std::to_string(g1.dim()) +
                              " vs " + std::to_string(g2.dim()) + ")");
    AffinityResult out;
    Mat a = detail::compact_rows(g1, out.src_index);
    Mat b = detail::compact_rows(g2, out.tgt_index);
    if (normalize) {
        detail::l2_normalize_rows(a, out.src_index, out.zero_norm_src);
        detail::l2_normalize_rows(b, out.tgt_index, out.zero_norm_tgt);
    }
    out.s = Mat(a.rows(), b.rows());
    int d = a.cols();
    for (int i = 0; i < a.rows(); ++i) {
        const double* ra = a.row_ptr(i);
        for (int j = 0; j < b.rows(); ++j) {
            const double* rb = b.row_ptr(j);
            double s = 0;
            for (int c = 0; c < d; ++c) s += ra[c] * rb[c];
            out.s(i, j) = s;
        }
    }
    return out;
}

/// Embed S in the top-left block of an (m1+1) x (m2+1) matrix whose appended
/// row, column, and corner all carry the dustbin logit.
inline Mat augment_dustbin(const Mat& s, const DustbinParam& dustbin) {
    dustbin.validate();
    if (!s.all_finite()) throw ValidationError("augment_dustbin: non-finite affinity");
    Mat out(s.rows() + 1, s.cols() + 1, dustbin.alpha);
    for (int i = 0; i < s.rows(); ++i) {
        const double* src = s.row_ptr(i);
        double* dst = out.row_ptr(i);
        for (int j = 0; j < s.cols(); ++j) dst[j] = src[j];
    }
    return out;
}

/// Soft assignment from Sinkhorn. The stored matrix is (m1+1) x (m2+1); the
/// final row and column are the dustbin.
struct TransportPlan {
    Mat p;
    int m1 = 0, m2 = 0;

    int dustbin_row() const { return m1; }
    int dustbin_col() const { return m2; }
};

namespace detail {

/// Log-domain Sinkhorn state kept for reverse-mode differentiation:
/// scaled logits plus the full history of row/column log-scalings.
struct SinkhornTrace {
    Mat scaled;                           // S-tilde / tau
    std::vector<std::vector<double>> us;  // u after each iteration, 1..T
    std::vector<std::vector<double>> vs;  // v before/after: index 0 is the zero init
};

enum class FirstAxis { row, col };

/// Alternating log-domain normalizations. `half_steps` counts single-axis
/// normalizations; a full iteration is two (row then column by default).
inline SinkhornTrace sinkhorn_log_halfsteps(const Mat& s_tilde, double tau, int half_steps,
                                            FirstAxis first = FirstAxis::row,
                                            bool keep_history = false) {
    if (!(tau > 0)) throw ValidationError("sinkhorn: tau must be > 0");
    if (!s_tilde.all_finite()) throw NumericError("sinkhorn: non-finite input logits");
    int m = s_tilde.rows(), n = s_tilde.cols();
    SinkhornTrace tr;
    tr.scaled = Mat(m, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) tr.scaled(i, j) = s_tilde(i, j) / tau;

    std::vector<double> u(m, 0.0), v(n, 0.0), buf(std::max(m, n));
    if (keep_history) tr.vs.push_back(v);
    bool row_turn = (first == FirstAxis::row);
    for (int step = 0; step < half_steps; ++step) {
        if (row_turn) {
            for (int i = 0; i < m; ++i) {
                const double* L = tr.scaled.row_ptr(i);
                for (int j = 0; j < n; ++j) buf[j] = L[j] + v[j];
                u[i] = -log_sum_exp(buf.data(), n);
            }
            if (keep_history) tr.us.push_back(u);
        } else {
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < m; ++i) buf[i] = tr.scaled(i, j) + u[i];
                v[j] = -log_sum_exp(buf.data(), m);
            }
            if (keep_history) tr.vs.push_back(v);
        }
        row_turn = !row_turn;
    }
    if (!keep_history) {
        tr.us.push_back(u);
        tr.vs.push_back(v);
    }
    return tr;
}

inline Mat plan_from_trace(const SinkhornTrace& tr) {
    const auto& u = tr.us.back();
    const auto& v = tr.vs.back();
    Mat p(tr.scaled.rows(), tr.scaled.cols());
    for (int i = 0; i < p.rows(); ++i)
        for (int j = 0; j < p.cols(); ++j) p(i, j) = std::exp(tr.scaled(i, j) + u[i] + v[j]);
    return p;
}

}  // namespace detail

/// T iterations of log-domain Sinkhorn on exp(S-tilde / tau); one iteration is
/// a row normalization followed by a column normalization. Returns the plan
/// after the T-th column normalization.
inline TransportPlan sinkhorn_log(const Mat& s_tilde, double tau, int iterations) {
    if (iterations < 1) throw ValidationError("sinkhorn: iterations must be >= 1");
    auto tr = detail::sinkhorn_log_halfsteps(s_tilde, tau, 2 * iterations);
    TransportPlan plan;
    plan.p = detail::plan_from_trace(tr);
    plan.m1 = s_tilde.rows() - 1;
    plan.m2 = s_tilde.cols() - 1;
    if (!plan.p.all_finite()) throw NumericError("sinkhorn: non-finite plan");
    return plan;
}

constexpr int kNoMatch = -1;

/// Hard assignment per source segment: target index or kNoMatch.
struct MatchResult {
    std::vector<int> assignment;  // size M1 (original slots); -1 = no match
    std::vector<double> scores;   // plan entry backing each decision
};

/// Row-wise argmax over all columns including the dustbin; the dustbin
/// winning means no match. With `mutual_check`, a match must also be the
/// argmax of its column among non-dustbin rows.
inline MatchResult discretize(const TransportPlan& plan, bool mutual_check) {
    MatchResult out;
    out.assignment.assign(plan.m1, kNoMatch);
    out.scores.assign(plan.m1, 0.0);
    std::vector<int> col_best(plan.m2, -1);
    if (mutual_check) {
        for (int j = 0; j < plan.m2; ++j) {
            double best = -1;
            for (int i = 0; i < plan.m1; ++i)
                if (plan.p(i, j) > best) {
                    best = plan.p(i, j);
                    col_best[j] = i;
                }
        }
    }
    for (int i = 0; i < plan.m1; ++i) {
        int best_j = 0;
        double best = plan.p(i, 0);
        for (int j = 1; j <= plan.m2; ++j)
            if (plan.p(i, j) > best) {
                best = plan.p(i, j);
                best_j = j;
            }
        if (best_j == plan.dustbin_col()) {
            out.scores[i] = best;
            continue;  // stays kNoMatch
        }
        if (mutual_check && col_best[best_j] != i) {
            out.scores[i] = best;
            continue;
        }
        out.assignment[i] = best_j;
        out.scores[i] = best;
    }
    return out;
}

/// Full matching pipeline output. The plan is over valid (compacted)
/// segments; the match result is re-expanded to original slots.
struct MatchOutput {
    TransportPlan plan;
    MatchResult matches;          // indexed by original source slot
    std::vector<int> src_index;   // compacted row -> original slot
    std::vector<int> tgt_index;   // compacted col -> original slot
};

/// affinity -> augment_dustbin -> sinkhorn_log -> discretize. Invalid slots
/// never enter the transport problem and come back as no-match.
inline MatchOutput match_segments(const SegmentDescriptors& g1, const SegmentDescriptors& g2,
                                  const MatcherConfig& config, const DustbinParam& dustbin) {
    config.validate();
    AffinityResult aff = affinity(g1, g2, config.normalize_descriptors);
    Mat s_tilde = augment_dustbin(aff.s, dustbin);
    MatchOutput out;
    out.plan = sinkhorn_log(s_tilde, config.temperature, config.iterations);
    out.src_index = aff.src_index;
    out.tgt_index = aff.tgt_index;
    MatchResult compact = discretize(out.plan, config.mutual_check);
    out.matches.assignment.assign(g1.count(), kNoMatch);
    out.matches.scores.assign(g1.count(), 0.0);
    for (int r = 0; r < int(aff.src_index.size()); ++r) {
        int slot = aff.src_index[r];
        out.matches.scores[slot] = compact.scores[r];
        if (compact.assignment[r] != kNoMatch)
            out.matches.assignment[slot] = aff.tgt_index[compact.assignment[r]];
    }
    return out;
}

/// FNV-1a over the plan bytes; stable for identical arithmetic.
inline std::string plan_checksum(const TransportPlan& plan) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double d : plan.p.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

inline nlohmann::json match_to_json(const MatchOutput& out) {
    nlohmann::json j;
    j["assignment"] = nlohmann::json::array();
    for (int a : out.matches.assignment) {
        if (a == kNoMatch)
            j["assignment"].push_back(nullptr);
        else
            j["assignment"].push_back(a);
    }
    j["scores"] = out.matches.scores;
    j["plan_checksum"] = plan_checksum(out.plan);
    return j;
}

}  // namespace segot
