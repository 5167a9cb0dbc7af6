// Segment-weighted yaw controller: softmax weights over per-frame
// normalized path lengths, steering toward near-goal segments.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "segot/common.hpp"

namespace segot {

struct NavSegment {
    double x = 0;  // horizontal pixel center in [0, W)
    double p = 0;  // path length to goal (hops or metres), >= 0
};

struct NavConfig {
    double temperature = 5.0;
    double gain = 0.4;
    int width = 0;

    double center() const { return width / 2.0; }

    void validate() const {
        if (!(temperature > 0)) throw ValidationError("nav: temperature must be > 0");
        if (!(gain > 0)) throw ValidationError("nav: gain must be > 0");
        if (width < 2) throw ValidationError("nav: image width must be >= 2");
    }
};

/// Weights proportional to exp(-tau * p_hat) where p_hat are the path lengths
/// min-max normalized to [0,1] within the frame, so near-goal segments
/// dominate. Equal path lengths give uniform weights.
inline std::vector<double> softmax_weights(const std::vector<double>& path_lengths, double tau) {
    if (path_lengths.empty()) throw ValidationError("softmax_weights: empty input");
    if (!(tau > 0)) throw ValidationError("softmax_weights: tau must be > 0");
    for (double p : path_lengths)
        if (!(p >= 0) || !std::isfinite(p))
            throw ValidationError("softmax_weights: path lengths must be finite and >= 0");
    double lo = *std::min_element(path_lengths.begin(), path_lengths.end());
    double hi = *std::max_element(path_lengths.begin(), path_lengths.end());
    double span = hi - lo;
    std::vector<double> z(path_lengths.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        double norm = span > 0 ? (path_lengths[i] - lo) / span : 0.0;
        z[i] = -tau * norm;
    }
    double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0;
    for (double& v : z) {
        v = std::exp(v - zmax);
        denom += v;
    }
    for (double& v : z) v /= denom;
    return z;
}

/// psi = K/W * sum_i w_i (x_i - c), with c the image center.
inline double yaw(const std::vector<NavSegment>& segments, const NavConfig& config) {
    config.validate();
    if (segments.empty()) throw ValidationError("yaw: empty segment list");
    std::vector<double> paths;
    paths.reserve(segments.size());
    for (const auto& s : segments) {
        if (!(s.x >= 0) || !(s.x < config.width))
            throw ValidationError("yaw: segment center outside [0, W)");
        paths.push_back(s.p);
    }
    std::vector<double> w = softmax_weights(paths, config.temperature);
    double c = config.center();
    double acc = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) acc += w[i] * (segments[i].x - c);
    return config.gain / config.width * acc;
}

}  // namespace segot
