// Seeded synthetic scenes with exact ground truth: image pairs with planted
// segment correspondences, and box-world frame sequences with global object
// identities, camera poses, and rendered depth.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "segot/common.hpp"
#include "segot/instance_mapping.hpp"
#include "segot/manifest.hpp"
#include "segot/segment_features.hpp"
#include "segot/tensor.hpp"

namespace segot {

struct SceneConfig {
    int height = 32, width = 32;
    int min_segments = 6, max_segments = 12;
    enum class Layout { rectangles, voronoi } layout = Layout::voronoi;
    int latent_dim = 32;
    double noise_sigma = 0.5;
    double drop_fraction = 0.0;
    double min_angle_deg = 0.0, max_angle_deg = 180.0;
    int patch_size = 2;
    // Latent aliasing: 0 clusters = independent unit latents; otherwise
    // latents sit a fixed angle (cluster_spread, radians) from their cluster
    // center, which crowds raw cosines the way repeated object instances do.
    int latent_clusters = 0;
    double cluster_spread = 0.3;
    std::uint64_t seed = 42;

    void validate() const {
        if (height < 8 || width < 8) throw ValidationError("scene: image size must be >= 8");
        if (min_segments < 1 || max_segments < min_segments || max_segments > kMaxSegments)
            throw ValidationError("scene: segment count range invalid");
        if (max_segments > height * width)
            throw ValidationError("scene: " + std::to_string(max_segments) +
                                  " segments cannot tile a " + std::to_string(height) + "x" +
                                  std::to_string(width) + " image");
        if (!(noise_sigma >= 0)) throw ValidationError("scene: noise sigma must be >= 0");
        if (!(drop_fraction >= 0 && drop_fraction < 1))
            throw ValidationError("scene: drop fraction must be in [0,1)");
        if (latent_dim < 2) throw ValidationError("scene: latent dim must be >= 2");
        if (patch_size < 1 || height % patch_size != 0 || width % patch_size != 0)
            throw ValidationError("scene: patch size must divide image size");
        if (!(min_angle_deg >= 0 && max_angle_deg <= 180 && min_angle_deg <= max_angle_deg))
            throw ValidationError("scene: angle range must be within [0,180]");
    }
};

struct SynthPair {
    FeatureMap features_a, features_b;
    PatchGrid patches_a, patches_b;
    MaskSet masks_a, masks_b;
    GtAssignment gt;
    CameraPose pose_a, pose_b;
    Intrinsics intrinsics;
    Mat latents;                     // segment registry: id -> latent
    std::vector<int> ids_a, ids_b;   // slot -> global segment id
};

namespace detail {

inline std::vector<double> random_unit(Rng& rng, int dim) {
    std::vector<double> v(dim);
    double n2 = 0;
    do {
        n2 = 0;
        for (double& x : v) {
            x = rng.gaussian();
            n2 += x * x;
        }
    } while (n2 < 1e-12);
    double n = std::sqrt(n2);
    for (double& x : v) x /= n;
    return v;
}

/// Latent registry. With clustering, each latent is cos(spread) times its
/// cluster center plus sin(spread) times a per-segment identity vector. The
/// centers occupy the leading coordinates and the identities the trailing
/// quarter+ of them, mirroring how category appearance and instance identity
/// occupy different feature directions.
inline Mat make_latents(Rng& rng, int count, int dim, int clusters, double spread) {
    Mat out(count, dim);
    if (clusters <= 0) {
        for (int i = 0; i < count; ++i) {
            auto v = random_unit(rng, dim);
            for (int c = 0; c < dim; ++c) out(i, c) = v[c];
        }
        return out;
    }
    int id_dims = std::max(2, (3 * dim) / 8);
    int center_dims = dim - id_dims;
    std::vector<std::vector<double>> centers;
    for (int k = 0; k < clusters; ++k) centers.push_back(random_unit(rng, center_dims));
    double cs = std::cos(spread), sn = std::sin(spread);
    for (int i = 0; i < count; ++i) {
        const auto& c = centers[i % clusters];
        auto ident = random_unit(rng, id_dims);
        for (int d = 0; d < center_dims; ++d) out(i, d) = cs * c[d];
        for (int d = 0; d < id_dims; ++d) out(i, center_dims + d) = sn * ident[d];
    }
    return out;
}

/// Exact partition of the image into `count` regions; returns per-pixel owner
/// slot in [0, count).
inline std::vector<int> make_layout(Rng& rng, SceneConfig::Layout layout, int h, int w, int count) {
    std::vector<int> owner(std::size_t(h) * w, 0);
    if (layout == SceneConfig::Layout::voronoi) {
        std::vector<std::pair<int, int>> seeds;
        while (int(seeds.size()) < count) {
            int y = int(rng.uniform_index(h)), x = int(rng.uniform_index(w));
            bool dup = false;
            for (auto [sy, sx] : seeds) dup |= (sy == y && sx == x);
            if (!dup) seeds.emplace_back(y, x);
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                long best = (1L << 60);
                int who = 0;
                for (int s = 0; s < count; ++s) {
                    long dy = y - seeds[s].first, dx = x - seeds[s].second;
                    long d = dy * dy + dx * dx;
                    if (d < best) {
                        best = d;
                        who = s;
                    }
                }
                owner[std::size_t(y) * w + x] = who;
            }
        return owner;
    }
    // Guillotine splits: repeatedly cut the largest rectangle until `count`
    // leaves exist. Every leaf keeps at least one pixel per side.
    struct R {
        int y, x, h, w;
    };
    std::vector<R> rects{{0, 0, h, w}};
    while (int(rects.size()) < count) {
        int pick = -1, area = 0;
        for (int i = 0; i < int(rects.size()); ++i) {
            const R& r = rects[i];
            if (r.h < 2 && r.w < 2) continue;
            if (r.h * r.w > area) {
                area = r.h * r.w;
                pick = i;
            }
        }
        if (pick < 0) throw ValidationError("scene: too many segments for image size");
        R r = rects[pick];
        bool split_h = r.h >= r.w ? true : false;
        if (split_h && r.h < 2) split_h = false;
        if (!split_h && r.w < 2) split_h = true;
        if (split_h) {
            int cut = 1 + int(rng.uniform_index(std::uint64_t(r.h - 1)));
            rects[pick] = {r.y, r.x, cut, r.w};
            rects.push_back({r.y + cut, r.x, r.h - cut, r.w});
        } else {
            int cut = 1 + int(rng.uniform_index(std::uint64_t(r.w - 1)));
            rects[pick] = {r.y, r.x, r.h, cut};
            rects.push_back({r.y, r.x + cut, r.h, r.w - cut});
        }
    }
    for (int s = 0; s < count; ++s)
        for (int y = rects[s].y; y < rects[s].y + rects[s].h; ++y)
            for (int x = rects[s].x; x < rects[s].x + rects[s].w; ++x)
                owner[std::size_t(y) * w + x] = s;
    return owner;
}

inline Mat3 random_rotation(Rng& rng) {
    Vec3 axis{rng.gaussian(), rng.gaussian(), rng.gaussian()};
    if (axis.norm() < 1e-9) axis = {0, 0, 1};
    return Mat3::axis_angle(axis, rng.uniform(0, kPi));
}

inline void render_features(Rng& rng, const std::vector<int>& owner_ids, const Mat& latents,
                            double sigma, FeatureMap& out) {
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            int id = owner_ids[std::size_t(y) * out.w + x];
            double* px = out.pixel(y, x);
            for (int c = 0; c < out.d; ++c) {
                double base = id >= 0 ? latents(id, c) : 0.0;
                px[c] = base + sigma * rng.gaussian();
            }
        }
}

}  // namespace detail

/// Deterministic synthetic pair. Matches are exactly the segments visible in
/// both views; dropped view-A segments land in unmatched_a and fresh view-B
/// segments in unmatched_b.
inline SynthPair gen_pair(const SceneConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    int h = config.height, w = config.width;
    int m = config.min_segments +
            int(rng.uniform_index(std::uint64_t(config.max_segments - config.min_segments + 1)));
    int n_drop = int(std::floor(config.drop_fraction * m + 1e-9));

    SynthPair pair;
    pair.latents = detail::make_latents(rng, m, config.latent_dim, config.latent_clusters,
                                        config.cluster_spread);

    // View A: slots 0..m-1 carry ids 0..m-1. The second view drops a random
    // subset of size n_drop (those land in unmatched_a) and permutes the rest.
    pair.ids_a.resize(m);
    for (int i = 0; i < m; ++i) pair.ids_a[i] = i;
    std::vector<int> a_slots(m);
    for (int i = 0; i < m; ++i) a_slots[i] = i;
    rng.shuffle(a_slots);
    std::vector<bool> dropped(m, false);
    for (int k = 0; k < n_drop; ++k) dropped[a_slots[k]] = true;

    pair.ids_b.clear();
    for (int i = 0; i < m; ++i)
        if (!dropped[i]) pair.ids_b.push_back(i);
    rng.shuffle(pair.ids_b);

    std::vector<int> layout_a = detail::make_layout(rng, config.layout, h, w, m);
    std::vector<int> layout_b = detail::make_layout(rng, config.layout, h, w, int(pair.ids_b.size()));

    auto owners_to_ids = [](const std::vector<int>& owner, const std::vector<int>& ids) {
        std::vector<int> out(owner.size());
        for (std::size_t i = 0; i < owner.size(); ++i) out[i] = ids[owner[i]];
        return out;
    };
    std::vector<int> owner_ids_a = owners_to_ids(layout_a, pair.ids_a);
    std::vector<int> owner_ids_b = owners_to_ids(layout_b, pair.ids_b);

    auto masks_from_layout = [&](const std::vector<int>& owner, int count) {
        MaskSet ms(count, h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) ms.set(owner[std::size_t(y) * w + x], y, x, 1);
        return ms;
    };
    pair.masks_a = masks_from_layout(layout_a, m);
    pair.masks_b = masks_from_layout(layout_b, int(pair.ids_b.size()));

    // Ground truth from the registry. Every view-B segment has a counterpart,
    // so unmatched_b stays empty by construction.
    std::vector<int> slot_b_of_id(m, -1);
    for (int sb = 0; sb < int(pair.ids_b.size()); ++sb) slot_b_of_id[pair.ids_b[sb]] = sb;
    for (int sa = 0; sa < m; ++sa) {
        if (dropped[sa])
            pair.gt.unmatched_a.push_back(sa);
        else
            pair.gt.matches.emplace_back(sa, slot_b_of_id[sa]);
    }

    // Pixel features for both views; fresh noise per view.
    pair.features_a = FeatureMap(h, w, config.latent_dim);
    pair.features_b = FeatureMap(h, w, config.latent_dim);
    detail::render_features(rng, owner_ids_a, pair.latents, config.noise_sigma, pair.features_a);
    detail::render_features(rng, owner_ids_b, pair.latents, config.noise_sigma, pair.features_b);

    // Patch grids: the latent of the patch-center owner plus patch-level
    // noise. A patch stands for the pooled s x s pixel block, so its noise is
    // the pixel sigma reduced by the pooling factor.
    int s = config.patch_size;
    double patch_sigma = config.noise_sigma / s;
    auto make_patches = [&](const std::vector<int>& owner_ids) {
        PatchGrid g(h / s, w / s, config.latent_dim);
        for (int py = 0; py < g.height_p; ++py)
            for (int px = 0; px < g.width_p; ++px) {
                int cy = py * s + s / 2, cx = px * s + s / 2;
                int id = owner_ids[std::size_t(cy) * w + cx];
                for (int c = 0; c < config.latent_dim; ++c)
                    g.at(py, px, c) = pair.latents(id, c) + patch_sigma * rng.gaussian();
            }
        return g;
    };
    pair.patches_a = make_patches(owner_ids_a);
    pair.patches_b = make_patches(owner_ids_b);

    // Poses with geodesic angle inside the configured range.
    pair.pose_a.rotation = detail::random_rotation(rng);
    pair.pose_a.translation = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    double angle = rng.uniform(config.min_angle_deg, config.max_angle_deg) * kPi / 180.0;
    Vec3 axis{rng.gaussian(), rng.gaussian(), rng.gaussian()};
    if (axis.norm() < 1e-9) axis = {0, 0, 1};
    pair.pose_b.rotation = pair.pose_a.rotation.mul(Mat3::axis_angle(axis, angle));
    pair.pose_b.translation = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    pair.intrinsics = {double(w), double(h), w / 2.0, h / 2.0};
    return pair;
}

/// Serialize a pair to `<dir>/<stem>.json` plus SGT1 tensors. Byte-identical
/// for identical inputs.
inline std::string write_pair(const SynthPair& pair, const std::string& dir,
                              const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto rel = [&](const std::string& suffix) { return stem + "." + suffix + ".sgt"; };
    save_tensor(pair.features_a.to_tensor(), (fs::path(dir) / rel("features_a")).string());
    save_tensor(pair.features_b.to_tensor(), (fs::path(dir) / rel("features_b")).string());
    save_tensor(pair.masks_a.to_tensor(), (fs::path(dir) / rel("masks_a")).string());
    save_tensor(pair.masks_b.to_tensor(), (fs::path(dir) / rel("masks_b")).string());

    nlohmann::json j;
    j["features_a"] = rel("features_a");
    j["features_b"] = rel("features_b");
    j["masks_a"] = rel("masks_a");
    j["masks_b"] = rel("masks_b");
    j["valid_a"] = std::vector<bool>(pair.masks_a.valid);
    j["valid_b"] = std::vector<bool>(pair.masks_b.valid);
    j["gt"] = detail::gt_to_json(pair.gt);
    j["pose_a"] = detail::pose_to_json(pair.pose_a);
    j["pose_b"] = detail::pose_to_json(pair.pose_b);
    j["intrinsics"] = {{"fx", pair.intrinsics.fx},
                       {"fy", pair.intrinsics.fy},
                       {"cx", pair.intrinsics.cx},
                       {"cy", pair.intrinsics.cy}};
    std::string path = (fs::path(dir) / (stem + ".json")).string();
    write_file_atomic(path, j.dump(2) + "\n");
    return path;
}

// ---------------------------------------------------------------------------
// Box-world sequences for instance mapping.
// ---------------------------------------------------------------------------

struct SequenceConfig {
    SceneConfig scene;          // image size, segment count range, latent dim, sigma
    double orbit_radius = 3.0;
    double orbit_span_deg = 60.0;
    double focal_scale = 1.4;   // fx = focal_scale * width (narrow field of view)
    double pan_amplitude = 0.5; // look-target oscillation; forces leave/re-enter
    double box_half_min = 0.10; // object extents, metres
    double box_half_max = 0.18;
    int min_mask_pixels = 12;   // observations smaller than this get no slot
};

struct SynthFrame {
    FeatureMap features;
    MaskSet masks;
    FeatureMap depth;
    CameraPose pose;
    std::vector<int> object_ids;  // slot -> global object id
};

struct SynthSequence {
    std::vector<SynthFrame> frames;
    Intrinsics intrinsics;
    int object_count = 0;
    Mat latents;
};

namespace detail {

struct Box {
    Vec3 lo, hi;
};

/// Ray/AABB slab test; ray is origin + t*dir with unnormalized dir. Returns
/// entry t or a negative value when missed.
inline double ray_box(const Vec3& o, const Vec3& d, const Box& b) {
    double t0 = 0.0, t1 = 1e30;
    const double od[3] = {o.x, o.y, o.z};
    const double dd[3] = {d.x, d.y, d.z};
    const double lo[3] = {b.lo.x, b.lo.y, b.lo.z};
    const double hi[3] = {b.hi.x, b.hi.y, b.hi.z};
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dd[a]) < 1e-12) {
            if (od[a] < lo[a] || od[a] > hi[a]) return -1;
            continue;
        }
        double ta = (lo[a] - od[a]) / dd[a];
        double tb = (hi[a] - od[a]) / dd[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return -1;
    }
    return t0 > 1e-9 ? t0 : -1;
}

/// world-from-camera pose with the camera at `eye` looking at `target`,
/// +z forward, y roughly down.
inline CameraPose look_at(const Vec3& eye, const Vec3& target) {
    Vec3 fwd = target - eye;
    double n = fwd.norm();
    if (n < 1e-9) throw ValidationError("look_at: eye equals target");
    fwd = fwd * (1.0 / n);
    Vec3 up{0, -1, 0};
    Vec3 right{fwd.y * up.z - fwd.z * up.y, fwd.z * up.x - fwd.x * up.z,
               fwd.x * up.y - fwd.y * up.x};
    double rn = right.norm();
    if (rn < 1e-9) {
        up = {0, 0, -1};
        right = {fwd.y * up.z - fwd.z * up.y, fwd.z * up.x - fwd.x * up.z,
                 fwd.x * up.y - fwd.y * up.x};
        rn = right.norm();
    }
    right = right * (1.0 / rn);
    Vec3 down{fwd.y * right.z - fwd.z * right.y, fwd.z * right.x - fwd.x * right.z,
              fwd.x * right.y - fwd.y * right.x};
    CameraPose pose;
    // Columns are the camera axes expressed in world coordinates.
    pose.rotation(0, 0) = right.x; pose.rotation(0, 1) = down.x; pose.rotation(0, 2) = fwd.x;
    pose.rotation(1, 0) = right.y; pose.rotation(1, 1) = down.y; pose.rotation(1, 2) = fwd.y;
    pose.rotation(2, 0) = right.z; pose.rotation(2, 1) = down.z; pose.rotation(2, 2) = fwd.z;
    pose.translation = eye;
    return pose;
}

}  // namespace detail

/// Box-world sequence: fixed world-space boxes observed by an orbiting,
/// panning camera. Object ids are global, so the generator's bookkeeping is
/// exact ground truth for mapping.
inline SynthSequence gen_sequence(const SequenceConfig& config, int frames, std::uint64_t seed) {
    config.scene.validate();
    if (frames < 2) throw ValidationError("gen_sequence: need at least 2 frames");
    Rng rng(seed);
    const SceneConfig& sc = config.scene;
    int k = sc.min_segments +
            int(rng.uniform_index(std::uint64_t(sc.max_segments - sc.min_segments + 1)));

    SynthSequence seq;
    seq.object_count = k;
    // Well-separated latents keep descriptor matching unambiguous.
    seq.latents = Mat(k, sc.latent_dim);
    {
        std::vector<std::vector<double>> rows;
        while (int(rows.size()) < k) {
            auto cand = detail::random_unit(rng, sc.latent_dim);
            bool ok = true;
            for (const auto& r : rows) {
                double dot = 0;
                for (int c = 0; c < sc.latent_dim; ++c) dot += r[c] * cand[c];
                if (std::abs(dot) > 0.5) ok = false;
            }
            if (ok) rows.push_back(cand);
        }
        for (int i = 0; i < k; ++i)
            for (int c = 0; c < sc.latent_dim; ++c) seq.latents(i, c) = rows[i][c];
    }

    // Non-overlapping boxes spread around the origin.
    std::vector<detail::Box> boxes;
    for (int i = 0; i < k; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 200) throw ValidationError("gen_sequence: cannot place boxes");
            double ang = rng.uniform(0, 2 * kPi);
            double rad = rng.uniform(0.5, 1.3);
            Vec3 c{rad * std::cos(ang), rng.uniform(-0.4, 0.4), rad * std::sin(ang)};
            Vec3 half{rng.uniform(config.box_half_min, config.box_half_max),
                      rng.uniform(config.box_half_min, config.box_half_max),
                      rng.uniform(config.box_half_min, config.box_half_max)};
            detail::Box b{c - half, c + half};
            bool clash = false;
            for (const auto& o : boxes)
                clash |= (b.lo.x <= o.hi.x && o.lo.x <= b.hi.x && b.lo.y <= o.hi.y &&
                          o.lo.y <= b.hi.y && b.lo.z <= o.hi.z && o.lo.z <= b.hi.z);
            if (!clash) {
                boxes.push_back(b);
                break;
            }
        }
    }

    int h = sc.height, w = sc.width;
    seq.intrinsics = {config.focal_scale * w, config.focal_scale * w, w / 2.0, h / 2.0};

    for (int t = 0; t < frames; ++t) {
        double frac = frames > 1 ? double(t) / (frames - 1) : 0.0;
        double phi = (frac - 0.5) * config.orbit_span_deg * kPi / 180.0;
        Vec3 eye{config.orbit_radius * std::sin(phi), 0.0, -config.orbit_radius * std::cos(phi)};
        // Alternating pan; side objects leave the narrow view and come back.
        double pan = (t % 2 == 0 ? 1.0 : -1.0) * config.pan_amplitude;
        CameraPose pose = detail::look_at(eye, Vec3{pan, 0, 0});

        std::vector<int> owner(std::size_t(h) * w, -1);
        FeatureMap depth(h, w, 1);
        for (int v = 0; v < h; ++v)
            for (int u = 0; u < w; ++u) {
                Vec3 dir_cam{(u - seq.intrinsics.cx) / seq.intrinsics.fx,
                             (v - seq.intrinsics.cy) / seq.intrinsics.fy, 1.0};
                Vec3 dir_w = pose.rotation.apply(dir_cam);
                double best = 1e30;
                int who = -1;
                for (int b = 0; b < k; ++b) {
                    double tt = detail::ray_box(pose.translation, dir_w, boxes[b]);
                    if (tt > 0 && tt < best) {
                        best = tt;
                        who = b;
                    }
                }
                owner[std::size_t(v) * w + u] = who;
                depth.at(v, u, 0) = who >= 0 ? best : 0.0;  // ray parameter = z-depth
            }

        SynthFrame frame;
        frame.pose = pose;
        frame.depth = std::move(depth);
        std::vector<int> visible;
        std::vector<bool> keep(k, false);
        for (int b = 0; b < k; ++b) {
            int count = 0;
            for (int i = 0; i < h * w; ++i) count += (owner[i] == b);
            if (count >= config.min_mask_pixels) {
                visible.push_back(b);
                keep[b] = true;
            }
        }
        // Sub-threshold observations become background so depth stays
        // consistent with the emitted masks.
        for (int i = 0; i < h * w; ++i)
            if (owner[i] >= 0 && !keep[owner[i]]) {
                owner[i] = -1;
                frame.depth.at(i / w, i % w, 0) = 0.0;
            }
        frame.object_ids = visible;
        frame.masks = MaskSet(int(visible.size()), h, w);
        for (int s = 0; s < int(visible.size()); ++s)
            for (int v = 0; v < h; ++v)
                for (int u = 0; u < w; ++u)
                    if (owner[std::size_t(v) * w + u] == visible[s]) frame.masks.set(s, v, u, 1);

        frame.features = FeatureMap(h, w, sc.latent_dim);
        detail::render_features(rng, owner, seq.latents, sc.noise_sigma, frame.features);
        seq.frames.push_back(std::move(frame));
    }
    return seq;
}

/// Sequence manifest: a JSON array with one entry per frame. `object_ids`
/// carries the generator's ground truth and is optional on load.
inline std::string write_sequence(const SynthSequence& seq, const std::string& dir,
                                  const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json arr = nlohmann::json::array();
    for (int t = 0; t < int(seq.frames.size()); ++t) {
        const SynthFrame& f = seq.frames[t];
        std::string base = stem + ".f" + std::to_string(t);
        save_tensor(f.features.to_tensor(), (fs::path(dir) / (base + ".features.sgt")).string());
        save_tensor(f.masks.to_tensor(), (fs::path(dir) / (base + ".masks.sgt")).string());
        {
            std::vector<float> d(f.depth.v.size());
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = float(f.depth.v[i]);
            save_tensor(DenseTensor::make_f32({std::uint64_t(f.depth.h), std::uint64_t(f.depth.w)},
                                              std::move(d)),
                        (fs::path(dir) / (base + ".depth.sgt")).string());
        }
        nlohmann::json e;
        e["features"] = base + ".features.sgt";
        e["masks"] = base + ".masks.sgt";
        e["valid"] = std::vector<bool>(f.masks.valid);
        e["depth"] = base + ".depth.sgt";
        e["pose"] = detail::pose_to_json(f.pose);
        e["intrinsics"] = {{"fx", seq.intrinsics.fx},
                           {"fy", seq.intrinsics.fy},
                           {"cx", seq.intrinsics.cx},
                           {"cy", seq.intrinsics.cy}};
        e["object_ids"] = f.object_ids;
        arr.push_back(e);
    }
    std::string path = (fs::path(dir) / (stem + ".json")).string();
    write_file_atomic(path, arr.dump(2) + "\n");
    return path;
}

struct LoadedSequence {
    std::vector<MapFrame> frames;
    std::vector<std::vector<int>> object_ids;  // empty when absent
};

inline LoadedSequence load_sequence(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open sequence manifest: " + manifest_path);
    nlohmann::json arr;
    try {
        is >> arr;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("sequence manifest " + manifest_path + ": " + e.what());
    }
    if (!arr.is_array() || arr.empty())
        throw ValidationError("sequence manifest must be a non-empty JSON array");
    fs::path base = fs::path(manifest_path).parent_path();
    LoadedSequence out;
    bool has_ids = true;
    try {
        for (const auto& e : arr) {
            MapFrame f;
            auto tpath = [&](const std::string& key) {
                return (base / e.at(key).get<std::string>()).string();
            };
            f.features = FeatureMap::from_tensor(load_tensor(tpath("features")));
            f.masks = MaskSet::from_tensor(load_tensor(tpath("masks")),
                                           e.at("valid").get<std::vector<bool>>());
            f.depth = detail::depth_from_tensor(load_tensor(tpath("depth")), "depth");
            f.pose = detail::pose_from_json(e.at("pose"));
            const auto& ji = e.at("intrinsics");
            f.intrinsics = {ji.at("fx").get<double>(), ji.at("fy").get<double>(),
                            ji.at("cx").get<double>(), ji.at("cy").get<double>()};
            f.intrinsics.validate();
            if (f.features.h != f.masks.h || f.features.w != f.masks.w ||
                f.depth.h != f.masks.h || f.depth.w != f.masks.w)
                throw ValidationError("sequence frame: inconsistent H/W across tensors");
            if (e.contains("object_ids"))
                out.object_ids.push_back(e.at("object_ids").get<std::vector<int>>());
            else
                has_ids = false;
            out.frames.push_back(std::move(f));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("sequence manifest " + manifest_path + ": " + e.what());
    }
    if (!has_ids) out.object_ids.clear();
    return out;
}

/// Ground-truth instance clouds from the generator's object ids: every
/// observation of an object, back-projected and compacted exactly like the
/// pipeline's own fusion.
inline std::vector<PointCloud> gt_instance_clouds(const std::vector<MapFrame>& frames,
                                                  const std::vector<std::vector<int>>& object_ids,
                                                  double voxel_size) {
    if (frames.size() != object_ids.size())
        throw ValidationError("gt_instance_clouds: frames/ids length mismatch");
    std::vector<int> ids_seen;
    for (const auto& ids : object_ids)
        for (int id : ids)
            if (std::find(ids_seen.begin(), ids_seen.end(), id) == ids_seen.end())
                ids_seen.push_back(id);
    std::sort(ids_seen.begin(), ids_seen.end());
    std::vector<PointCloud> out;
    for (int id : ids_seen) {
        PointCloud all;
        for (std::size_t f = 0; f < frames.size(); ++f)
            for (std::size_t s = 0; s < object_ids[f].size(); ++s)
                if (object_ids[f][s] == id) {
                    PointCloud pc = backproject(frames[f].masks, int(s), frames[f].depth,
                                                frames[f].intrinsics, frames[f].pose);
                    all.insert(all.end(), pc.begin(), pc.end());
                }
        if (!all.empty()) out.push_back(voxel_downsample(all, voxel_size));
    }
    return out;
}

}  // namespace segot
