// Segment-feature head (per-patch MLP + pixel-shuffle upsampling) and
// aggregation of pixel features into per-segment descriptors.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "segot/common.hpp"
#include "segot/manifest.hpp"

namespace segot {

/// Patch-level feature grid (the backbone output stand-in).
struct PatchGrid {
    int height_p = 0, width_p = 0, dim_in = 0;
    std::vector<double> v;  // (py, px, c) row-major

    PatchGrid() = default;
    PatchGrid(int hp, int wp, int d)
        : height_p(hp), width_p(wp), dim_in(d), v(std::size_t(hp) * wp * d, 0.0) {
        if (hp < 1 || wp < 1 || d < 1) throw ValidationError("patch grid: sizes must be >= 1");
    }

    double& at(int py, int px, int c) { return v[(std::size_t(py) * width_p + px) * dim_in + c]; }
    double at(int py, int px, int c) const { return v[(std::size_t(py) * width_p + px) * dim_in + c]; }
    const double* patch(int py, int px) const {
        return v.data() + (std::size_t(py) * width_p + px) * dim_in;
    }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
    double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

/// Two-layer per-patch perceptron mapping dim_in -> hidden -> s^2 * dim_out,
/// expanded to pixel resolution by pixel-shuffle (factor s).
struct HeadParams {
    int dim_in = 0, hidden = 0, patch_size = 0, dim_out = 0;
    Mat w1;  // hidden x dim_in
    std::vector<double> b1;
    Mat w2;  // (s^2 * dim_out) x hidden
    std::vector<double> b2;

    int out_per_patch() const { return patch_size * patch_size * dim_out; }

    static HeadParams init(int dim_in, int hidden, int patch_size, int dim_out,
                           std::uint64_t seed) {
        if (dim_in < 1 || hidden < 1 || patch_size < 1 || dim_out < 1)
            throw ValidationError("head: all dimensions must be >= 1");
        HeadParams p;
        p.dim_in = dim_in;
        p.hidden = hidden;
        p.patch_size = patch_size;
        p.dim_out = dim_out;
        p.w1 = Mat(hidden, dim_in);
        p.b1.assign(hidden, 0.0);
        p.w2 = Mat(p.out_per_patch(), hidden);
        p.b2.assign(p.out_per_patch(), 0.0);
        Rng rng(seed);
        double s1 = 1.0 / std::sqrt(double(dim_in));
        for (double& w : p.w1.data()) w = rng.uniform(-s1, s1);
        double s2 = 1.0 / std::sqrt(double(hidden));
        for (double& w : p.w2.data()) w = rng.uniform(-s2, s2);
        return p;
    }

    void validate_against(const PatchGrid& patches) const {
        if (patches.dim_in != dim_in)
            throw ValidationError("head: patch dim " + std::to_string(patches.dim_in) +
                                  " != head dim_in " + std::to_string(dim_in));
        if (w1.rows() != hidden || w1.cols() != dim_in || int(b1.size()) != hidden ||
            w2.rows() != out_per_patch() || w2.cols() != hidden || int(b2.size()) != out_per_patch())
            throw ValidationError("head: weight shapes inconsistent with declared dimensions");
        if (!w1.all_finite() || !w2.all_finite())
            throw ValidationError("head: non-finite weights");
    }

    std::size_t param_count() const {
        return w1.data().size() + b1.size() + w2.data().size() + b2.size();
    }

    /// Flat parameter order: w1, b1, w2, b2. The optimizer works on this view.
    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(param_count());
        out.insert(out.end(), w1.data().begin(), w1.data().end());
        out.insert(out.end(), b1.begin(), b1.end());
        out.insert(out.end(), w2.data().begin(), w2.data().end());
        out.insert(out.end(), b2.begin(), b2.end());
        return out;
    }

    void unflatten(const std::vector<double>& flat) {
        if (flat.size() != param_count()) throw ValidationError("head: flat parameter size mismatch");
        std::size_t o = 0;
        for (double& w : w1.data()) w = flat[o++];
        for (double& b : b1) b = flat[o++];
        for (double& w : w2.data()) w = flat[o++];
        for (double& b : b2) b = flat[o++];
    }
};

namespace detail {

/// Per-patch forward pass. Optionally records pre-activation values for the
/// backward pass.
inline void head_mlp_forward(const HeadParams& p, const double* x, double* out,
                             double* pre_act = nullptr, double* act = nullptr) {
    std::vector<double> h(p.hidden);
    for (int i = 0; i < p.hidden; ++i) {
        const double* wr = p.w1.row_ptr(i);
        double s = p.b1[i];
        for (int c = 0; c < p.dim_in; ++c) s += wr[c] * x[c];
        if (pre_act) pre_act[i] = s;
        h[i] = gelu(s);
        if (act) act[i] = h[i];
    }
    int no = p.out_per_patch();
    for (int o = 0; o < no; ++o) {
        const double* wr = p.w2.row_ptr(o);
        double s = p.b2[o];
        for (int i = 0; i < p.hidden; ++i) s += wr[i] * h[i];
        out[o] = s;
    }
}

}  // namespace detail

/// Upsample patch features to pixel resolution: pixel (y, x) carries the
/// (y mod s, x mod s) sub-block of the MLP output for patch (y/s, x/s).
inline FeatureMap head_forward(const PatchGrid& patches, const HeadParams& params) {
    params.validate_against(patches);
    int s = params.patch_size;
    FeatureMap out(patches.height_p * s, patches.width_p * s, params.dim_out);
    std::vector<double> o(params.out_per_patch());
    for (int py = 0; py < patches.height_p; ++py) {
        for (int px = 0; px < patches.width_p; ++px) {
            detail::head_mlp_forward(params, patches.patch(py, px), o.data());
            for (int sy = 0; sy < s; ++sy)
                for (int sx = 0; sx < s; ++sx) {
                    double* dst = out.pixel(py * s + sy, px * s + sx);
                    const double* src = o.data() + (sy * s + sx) * params.dim_out;
                    for (int c = 0; c < params.dim_out; ++c) dst[c] = src[c];
                }
        }
    }
    return out;
}

/// M segment embeddings with validity flags; invalid rows are exactly zero.
struct SegmentDescriptors {
    Mat g;  // M x D
    std::vector<bool> valid;

    int count() const { return g.rows(); }
    int dim() const { return g.cols(); }

    int valid_count() const {
        int n = 0;
        for (bool b : valid) n += b;
        return n;
    }
};

/// Sum-pool pixel features inside each mask: G[m] = sum over masked pixels.
/// Overlapping masks each receive the shared pixels independently. Slots that
/// are invalid or empty come back as zero rows with valid=false.
inline SegmentDescriptors aggregate_sum(const FeatureMap& features, const MaskSet& masks) {
    if (features.h != masks.h || features.w != masks.w)
        throw ValidationError("aggregate: features are " + std::to_string(features.h) + "x" +
                              std::to_string(features.w) + " but masks are " +
                              std::to_string(masks.h) + "x" + std::to_string(masks.w));
    SegmentDescriptors out;
    out.g = Mat(masks.m, features.d);
    out.valid.assign(masks.m, false);
    for (int m = 0; m < masks.m; ++m) {
        if (!masks.valid[m]) continue;
        double* row = out.g.row_ptr(m);
        const std::uint8_t* mb = masks.bits.data() + std::size_t(m) * masks.h * masks.w;
        bool any = false;
        for (int y = 0; y < masks.h; ++y)
            for (int x = 0; x < masks.w; ++x) {
                if (!mb[std::size_t(y) * masks.w + x]) continue;
                any = true;
                const double* px = features.pixel(y, x);
                for (int c = 0; c < features.d; ++c) row[c] += px[c];
            }
        out.valid[m] = any;
        if (!any)
            for (int c = 0; c < features.d; ++c) row[c] = 0.0;
    }
    return out;
}

/// Masked average pooling: the sum-pool row divided by the mask pixel count.
/// Used by the descriptor-pooling baselines, not by the main head path.
inline SegmentDescriptors aggregate_mean(const FeatureMap& features, const MaskSet& masks) {
    SegmentDescriptors out = aggregate_sum(features, masks);
    for (int m = 0; m < masks.m; ++m) {
        if (!out.valid[m]) continue;
        double n = double(masks.pixel_count(m));
        double* row = out.g.row_ptr(m);
        for (int c = 0; c < out.g.cols(); ++c) row[c] /= n;
    }
    return out;
}

}  // namespace segot
