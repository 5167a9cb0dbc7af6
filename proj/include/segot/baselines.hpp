// Baseline matchers: keypoint-voting segment correspondence and
// mutual-check cosine matching over pooled descriptors.

#pragma once

#include <string>
#include <vector>

#include "segot/common.hpp"
#include "segot/manifest.hpp"
#include "segot/ot_matcher.hpp"
#include "segot/segment_features.hpp"

namespace segot {

/// One matched keypoint pair, pixel coordinates in each image.
struct KeypointPair {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

using KeypointMatches = std::vector<KeypointPair>;

struct VoteMatrix {
    int m = 0, n = 0;
    std::vector<int> v;

    VoteMatrix() = default;
    VoteMatrix(int m_, int n_) : m(m_), n(n_), v(std::size_t(m_) * n_, 0) {}
    int& at(int i, int j) { return v[std::size_t(i) * n + j]; }
    int at(int i, int j) const { return v[std::size_t(i) * n + j]; }

    int total() const {
        int s = 0;
        for (int x : v) s += x;
        return s;
    }
};

struct VoteMatchResult {
    VoteMatrix votes;
    std::vector<int> assignment;  // per source segment: target index or -1
};

namespace detail {

/// Lowest mask index containing the pixel, or -1. Ground-truth instance
/// masks are disjoint, so the lowest-index rule only matters for noisy
/// overlapping inputs.
inline int containing_mask(const MaskSet& masks, int x, int y) {
    for (int m = 0; m < masks.m; ++m) {
        if (!masks.valid[m]) continue;
        if (masks.at(m, y, x)) return m;
    }
    return -1;
}

}  // namespace detail

/// Keypoint-voting segment correspondence. Every keypoint pair whose two
/// endpoints land inside masks votes for that (source, target) cell; rows
/// with zero votes map to -1, otherwise to the argmax column (ties broken
/// toward the lowest target index).
inline VoteMatchResult vote_match(const MaskSet& masks_a, const MaskSet& masks_b,
                                  const KeypointMatches& kps) {
    for (const auto& k : kps) {
        if (k.x0 < 0 || k.x0 >= masks_a.w || k.y0 < 0 || k.y0 >= masks_a.h)
            throw ValidationError("vote_match: keypoint (" + std::to_string(k.x0) + "," +
                                  std::to_string(k.y0) + ") outside image 0 bounds");
        if (k.x1 < 0 || k.x1 >= masks_b.w || k.y1 < 0 || k.y1 >= masks_b.h)
            throw ValidationError("vote_match: keypoint (" + std::to_string(k.x1) + "," +
                                  std::to_string(k.y1) + ") outside image 1 bounds");
    }
    VoteMatchResult out;
    out.votes = VoteMatrix(masks_a.m, masks_b.m);
    for (const auto& k : kps) {
        int mi = detail::containing_mask(masks_a, k.x0, k.y0);
        int ni = detail::containing_mask(masks_b, k.x1, k.y1);
        if (mi < 0 || ni < 0) continue;
        ++out.votes.at(mi, ni);
    }
    out.assignment.assign(masks_a.m, -1);
    for (int m = 0; m < masks_a.m; ++m) {
        int best_n = -1, best_v = 0;
        for (int n = 0; n < masks_b.m; ++n) {
            int v = out.votes.at(m, n);
            if (v > best_v) {
                best_v = v;
                best_n = n;
            }
        }
        out.assignment[m] = best_n;  // stays -1 when the row has no votes
    }
    return out;
}

struct Correspondence {
    int i = 0, j = 0;
    double score = 0;
};

struct MutualMatchResult {
    std::vector<Correspondence> links;
    std::vector<int> zero_norm_src, zero_norm_tgt;  // excluded descriptors
};

/// Cosine-similarity matching with mutual check: (i, j) is kept iff j is the
/// best column for row i and i is the best row for column j.
inline MutualMatchResult mutual_cosine_match(const SegmentDescriptors& g1,
                                             const SegmentDescriptors& g2) {
    AffinityResult aff = affinity(g1, g2, /*normalize=*/true);
    MutualMatchResult out;
    for (int s : aff.zero_norm_src) out.zero_norm_src.push_back(s);
    for (int s : aff.zero_norm_tgt) out.zero_norm_tgt.push_back(s);

    std::vector<bool> src_ok(aff.s.rows(), true), tgt_ok(aff.s.cols(), true);
    for (int r = 0; r < aff.s.rows(); ++r)
        for (int z : aff.zero_norm_src)
            if (aff.src_index[r] == z) src_ok[r] = false;
    for (int c = 0; c < aff.s.cols(); ++c)
        for (int z : aff.zero_norm_tgt)
            if (aff.tgt_index[c] == z) tgt_ok[c] = false;

    int m = aff.s.rows(), n = aff.s.cols();
    std::vector<int> row_best(m, -1), col_best(n, -1);
    for (int i = 0; i < m; ++i) {
        if (!src_ok[i]) continue;
        double best = -2;
        for (int j = 0; j < n; ++j) {
            if (!tgt_ok[j]) continue;
            if (aff.s(i, j) > best) {
                best = aff.s(i, j);
                row_best[i] = j;
            }
        }
    }
    for (int j = 0; j < n; ++j) {
        if (!tgt_ok[j]) continue;
        double best = -2;
        for (int i = 0; i < m; ++i) {
            if (!src_ok[i]) continue;
            if (aff.s(i, j) > best) {
                best = aff.s(i, j);
                col_best[j] = i;
            }
        }
    }
    for (int i = 0; i < m; ++i) {
        int j = row_best[i];
        if (j >= 0 && col_best[j] == i)
            out.links.push_back({aff.src_index[i], aff.tgt_index[j], aff.s(i, j)});
    }
    return out;
}

}  // namespace segot
