// Object-centric 3D instance mapping: back-projection, geometric/semantic
// similarities, greedy association, fusion with voxel downsampling, the
// point-cloud-IoU link filter, and class-agnostic AP evaluation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "segot/common.hpp"
#include "segot/manifest.hpp"
#include "segot/ot_matcher.hpp"
#include "segot/segment_features.hpp"

namespace segot {

using PointCloud = std::vector<Vec3>;

struct FusionConfig {
    double blend_alpha = 0.3;     // semantic/geometric blend weight
    double sim_threshold = 0.93;  // fused similarity needed to merge
    double nn_tolerance = 0.02;   // metres; defaults to 2x voxel size
    double voxel_size = 0.01;     // metres, map compaction pitch
    double iou_threshold = 0.5;   // pairwise link filter
    double iou_voxel_size = 0.05; // metres, coarser than map voxels

    void validate() const {
        if (!(blend_alpha >= 0.1 && blend_alpha <= 0.5))
            throw ValidationError("fusion: blend alpha must be in [0.1, 0.5]");
        if (!(sim_threshold >= 0.90 && sim_threshold <= 0.96))
            throw ValidationError("fusion: sim threshold must be in [0.90, 0.96]");
        if (!(nn_tolerance > 0) || !(voxel_size > 0) || !(iou_threshold > 0) ||
            !(iou_voxel_size > 0))
            throw ValidationError("fusion: tolerances and voxel sizes must be positive");
    }
};

/// One map object: raw running-mean descriptor (exact arithmetic mean of the
/// fused detections), fusion count, and a compacted point cloud. Similarity
/// computations consume the unit-normalized view of the descriptor.
struct MapObject {
    std::vector<double> descriptor_mean;
    int fusion_count = 0;
    PointCloud points;

    std::vector<double> unit_descriptor() const {
        double n2 = 0;
        for (double v : descriptor_mean) n2 += v * v;
        double n = std::sqrt(n2);
        if (n < 1e-12) throw ValidationError("map object: zero descriptor");
        std::vector<double> out(descriptor_mean);
        for (double& v : out) v /= n;
        return out;
    }
};

struct Detection {
    std::vector<double> descriptor;  // unit-normalized semantic descriptor
    PointCloud points;
};

/// Pinhole back-projection of the masked depth pixels into the world frame:
/// ((u-cx)d/fx, (v-cy)d/fy, d) then R p + t. Zero or negative depths are
/// skipped.
inline PointCloud backproject(const MaskSet& masks, int slot, const FeatureMap& depth,
                              const Intrinsics& intr, const CameraPose& pose) {
    if (slot < 0 || slot >= masks.m) throw ValidationError("backproject: mask slot out of range");
    if (depth.h != masks.h || depth.w != masks.w || depth.d != 1)
        throw ValidationError("backproject: depth must be HxW matching the masks");
    intr.validate();
    pose.validate();
    PointCloud out;
    for (int v = 0; v < masks.h; ++v)
        for (int u = 0; u < masks.w; ++u) {
            if (!masks.at(slot, v, u)) continue;
            double d = depth.at(v, u, 0);
            if (!(d > 0) || !std::isfinite(d)) continue;
            Vec3 cam{(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d};
            out.push_back(pose.rotation.apply(cam) + pose.translation);
        }
    return out;
}

namespace detail {

struct CellKey {
    std::int64_t x, y, z;
    bool operator==(const CellKey& o) const { return x == o.x && y == o.y && z == o.z; }
};

struct CellHash {
    std::size_t operator()(const CellKey& k) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::int64_t v : {k.x, k.y, k.z}) {
            h ^= static_cast<std::uint64_t>(v);
            h *= 0x100000001b3ULL;
        }
        return static_cast<std::size_t>(h);
    }
};

inline CellKey cell_of(const Vec3& p, double pitch) {
    return {static_cast<std::int64_t>(std::floor(p.x / pitch)),
            static_cast<std::int64_t>(std::floor(p.y / pitch)),
            static_cast<std::int64_t>(std::floor(p.z / pitch))};
}

struct CellLess {
    bool operator()(const CellKey& a, const CellKey& b) const {
        if (a.x != b.x) return a.x < b.x;
        if (a.y != b.y) return a.y < b.y;
        return a.z < b.z;
    }
};

}  // namespace detail

/// Fraction of candidate points whose nearest reference point lies within
/// delta_nn. Grid-accelerated but bit-identical to the brute-force answer.
inline double nn_ratio(const PointCloud& candidate, const PointCloud& reference, double delta_nn) {
    if (candidate.empty()) throw ValidationError("nn_ratio: empty candidate cloud");
    if (!(delta_nn > 0)) throw ValidationError("nn_ratio: tolerance must be positive");
    if (reference.empty()) return 0.0;

    std::unordered_map<detail::CellKey, std::vector<int>, detail::CellHash> grid;
    for (int i = 0; i < int(reference.size()); ++i)
        grid[detail::cell_of(reference[i], delta_nn)].push_back(i);

    double d2 = delta_nn * delta_nn;
    int hits = 0;
    for (const Vec3& p : candidate) {
        detail::CellKey c = detail::cell_of(p, delta_nn);
        bool hit = false;
        for (std::int64_t dx = -1; dx <= 1 && !hit; ++dx)
            for (std::int64_t dy = -1; dy <= 1 && !hit; ++dy)
                for (std::int64_t dz = -1; dz <= 1 && !hit; ++dz) {
                    auto it = grid.find({c.x + dx, c.y + dy, c.z + dz});
                    if (it == grid.end()) continue;
                    for (int ri : it->second) {
                        Vec3 diff = p - reference[ri];
                        if (diff.dot(diff) <= d2) {
                            hit = true;
                            break;
                        }
                    }
                }
        hits += hit;
    }
    return double(hits) / double(candidate.size());
}

/// Cosine similarity rescaled from [-1,1] to [0,1]. Inputs need not be
/// pre-normalized; zero vectors are rejected.
inline double semantic_sim(const std::vector<double>& fa, const std::vector<double>& fb) {
    if (fa.size() != fb.size()) throw ValidationError("semantic_sim: dimension mismatch");
    double na = 0, nb = 0, dot = 0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        na += fa[i] * fa[i];
        nb += fb[i] * fb[i];
        dot += fa[i] * fb[i];
    }
    if (na < 1e-24 || nb < 1e-24) throw ValidationError("semantic_sim: zero descriptor");
    return 0.5 * (dot / std::sqrt(na * nb)) + 0.5;
}

inline double fused_sim(double s_sem, double s_geo, double blend_alpha) {
    return blend_alpha * s_sem + (1.0 - blend_alpha) * s_geo;
}

/// Grid-cell grouping at the given pitch; each occupied cell is replaced by
/// the centroid of its points. Output is ordered canonically by cell index.
inline PointCloud voxel_downsample(const PointCloud& points, double voxel_size) {
    if (!(voxel_size > 0)) throw ValidationError("voxel_downsample: pitch must be positive");
    std::unordered_map<detail::CellKey, std::pair<Vec3, int>, detail::CellHash> cells;
    for (const Vec3& p : points) {
        auto& acc = cells[detail::cell_of(p, voxel_size)];
        acc.first = acc.first + p;
        acc.second += 1;
    }
    std::vector<std::pair<detail::CellKey, std::pair<Vec3, int>>> sorted(cells.begin(), cells.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return detail::CellLess{}(a.first, b.first); });
    PointCloud out;
    out.reserve(sorted.size());
    for (const auto& [key, acc] : sorted) out.push_back(acc.first * (1.0 / acc.second));
    return out;
}

/// Voxel-occupancy IoU between two clouds.
inline double pointcloud_iou(const PointCloud& pa, const PointCloud& pb, double voxel_size) {
    if (!(voxel_size > 0)) throw ValidationError("pointcloud_iou: voxel size must be positive");
    if (pa.empty() && pb.empty()) {
        std::cerr << "[segot] warning: pointcloud_iou over two empty clouds, reporting 0\n";
        return 0.0;
    }
    std::unordered_map<detail::CellKey, std::uint8_t, detail::CellHash> occ;
    for (const Vec3& p : pa) occ[detail::cell_of(p, voxel_size)] |= 1;
    for (const Vec3& p : pb) occ[detail::cell_of(p, voxel_size)] |= 2;
    int inter = 0;
    for (const auto& [key, bits] : occ) inter += (bits == 3);
    return double(inter) / double(occ.size());
}

/// Merge a detection into an object: running-average descriptor update on the
/// raw mean, fusion count increment, and voxel compaction of the union of the
/// point clouds.
inline void fuse(MapObject& object, const Detection& detection, double voxel_size) {
    if (object.descriptor_mean.size() != detection.descriptor.size())
        throw ValidationError("fuse: descriptor dimension mismatch");
    double n = double(object.fusion_count);
    for (std::size_t i = 0; i < object.descriptor_mean.size(); ++i)
        object.descriptor_mean[i] = (n * object.descriptor_mean[i] + detection.descriptor[i]) / (n + 1.0);
    object.fusion_count += 1;
    PointCloud merged = object.points;
    merged.insert(merged.end(), detection.points.begin(), detection.points.end());
    object.points = voxel_downsample(merged, voxel_size);
}

inline MapObject make_object(const Detection& detection, double voxel_size) {
    MapObject obj;
    obj.descriptor_mean = detection.descriptor;
    obj.fusion_count = 1;
    obj.points = voxel_downsample(detection.points, voxel_size);
    return obj;
}

struct InstanceMap {
    std::vector<MapObject> objects;
};

struct AssociationDecision {
    int object_index = -1;  // -1 = instantiated a new object
    double peak_similarity = 0;
};

namespace detail {

struct Aabb {
    Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};

    static Aabb of(const PointCloud& pts) {
        Aabb b;
        for (const Vec3& p : pts) {
            b.lo.x = std::min(b.lo.x, p.x); b.hi.x = std::max(b.hi.x, p.x);
            b.lo.y = std::min(b.lo.y, p.y); b.hi.y = std::max(b.hi.y, p.y);
            b.lo.z = std::min(b.lo.z, p.z); b.hi.z = std::max(b.hi.z, p.z);
        }
        return b;
    }

    bool intersects(const Aabb& o, double pad) const {
        return lo.x <= o.hi.x + pad && o.lo.x <= hi.x + pad && lo.y <= o.hi.y + pad &&
               o.lo.y <= hi.y + pad && lo.z <= o.hi.z + pad && o.lo.z <= hi.z + pad;
    }
};

}  // namespace detail

/// Incremental association: each detection either merges into the map object
/// with the highest fused similarity (if that peak clears the threshold) or
/// becomes a new object. Candidates are gated by bounding-box intersection.
/// Detections are processed in order and updates apply immediately.
inline std::vector<AssociationDecision> greedy_associate(const std::vector<Detection>& detections,
                                                         InstanceMap& map,
                                                         const FusionConfig& config) {
    config.validate();
    std::vector<AssociationDecision> decisions;
    decisions.reserve(detections.size());
    for (const Detection& det : detections) {
        if (det.points.empty()) throw ValidationError("greedy_associate: detection with empty cloud");
        detail::Aabb det_box = detail::Aabb::of(det.points);
        int best = -1;
        double best_sim = -1;
        for (int k = 0; k < int(map.objects.size()); ++k) {
            const MapObject& obj = map.objects[k];
            if (!det_box.intersects(detail::Aabb::of(obj.points), config.nn_tolerance)) continue;
            double s_geo = nn_ratio(det.points, obj.points, config.nn_tolerance);
            double s_sem = semantic_sim(det.descriptor, obj.unit_descriptor());
            double s = fused_sim(s_sem, s_geo, config.blend_alpha);
            if (s > best_sim) {
                best_sim = s;
                best = k;
            }
        }
        if (best >= 0 && best_sim >= config.sim_threshold) {
            fuse(map.objects[best], det, config.voxel_size);
            decisions.push_back({best, best_sim});
        } else {
            map.objects.push_back(make_object(det, config.voxel_size));
            decisions.push_back({-1, best_sim});
        }
    }
    return decisions;
}

/// One frame of a sequence, already loaded.
struct MapFrame {
    FeatureMap features;
    MaskSet masks;
    FeatureMap depth;
    CameraPose pose;
    Intrinsics intrinsics;
};

struct PairLink {
    int frame_a = 0, slot_a = 0, frame_b = 0, slot_b = 0;
    double iou = 0;
    double score = 0;
};

struct PairwiseMapResult {
    InstanceMap map;
    std::vector<std::vector<std::pair<int, int>>> components;  // (frame, slot) members
    std::vector<PairLink> accepted_links;
};

namespace detail {

class UnionFind {
public:
    explicit UnionFind(int n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    int find(int x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

private:
    std::vector<int> parent_;
};

}  // namespace detail

/// Match every frame pair, keep links that survive the dustbin and the
/// point-cloud-IoU filter, union surviving links into connected components,
/// and fuse each component into one map object. Component structure is
/// independent of pair processing order.
inline PairwiseMapResult build_map_pairwise(const std::vector<MapFrame>& frames,
                                            const MatcherConfig& matcher,
                                            const DustbinParam& dustbin,
                                            const FusionConfig& fusion) {
    fusion.validate();
    matcher.validate();
    int n_frames = int(frames.size());
    if (n_frames < 1) throw ValidationError("build_map_pairwise: no frames");

    // Per-frame descriptors and back-projected clouds.
    std::vector<SegmentDescriptors> descs(n_frames);
    std::vector<std::vector<PointCloud>> clouds(n_frames);
    std::vector<int> slot_base(n_frames, 0);
    int total_slots = 0;
    for (int f = 0; f < n_frames; ++f) {
        descs[f] = aggregate_sum(frames[f].features, frames[f].masks);
        clouds[f].resize(frames[f].masks.m);
        for (int s = 0; s < frames[f].masks.m; ++s) {
            if (!frames[f].masks.valid[s]) continue;
            clouds[f][s] = backproject(frames[f].masks, s, frames[f].depth, frames[f].intrinsics,
                                       frames[f].pose);
            if (clouds[f][s].empty()) descs[f].valid[s] = false;  // nothing observable in 3D
        }
        slot_base[f] = total_slots;
        total_slots += frames[f].masks.m;
    }

    PairwiseMapResult out;
    for (int fa = 0; fa < n_frames; ++fa)
        for (int fb = fa + 1; fb < n_frames; ++fb) {
            MatchOutput match = match_segments(descs[fa], descs[fb], matcher, dustbin);
            for (int sa = 0; sa < int(match.matches.assignment.size()); ++sa) {
                int sb = match.matches.assignment[sa];
                if (sb == kNoMatch) continue;
                double iou = pointcloud_iou(clouds[fa][sa], clouds[fb][sb], fusion.iou_voxel_size);
                if (iou < fusion.iou_threshold) continue;
                out.accepted_links.push_back({fa, sa, fb, sb, iou, match.matches.scores[sa]});
            }
        }

    std::sort(out.accepted_links.begin(), out.accepted_links.end(),
              [](const PairLink& a, const PairLink& b) {
                  return std::tie(a.frame_a, a.slot_a, a.frame_b, a.slot_b) <
                         std::tie(b.frame_a, b.slot_a, b.frame_b, b.slot_b);
              });

    detail::UnionFind uf(total_slots);
    for (const PairLink& l : out.accepted_links)
        uf.unite(slot_base[l.frame_a] + l.slot_a, slot_base[l.frame_b] + l.slot_b);

    // Collect components over valid observed slots, in canonical order.
    std::unordered_map<int, int> root_to_component;
    for (int f = 0; f < n_frames; ++f)
        for (int s = 0; s < frames[f].masks.m; ++s) {
            if (!descs[f].valid[s]) continue;
            int root = uf.find(slot_base[f] + s);
            auto [it, inserted] = root_to_component.try_emplace(root, int(out.components.size()));
            if (inserted) out.components.emplace_back();
            out.components[it->second].emplace_back(f, s);
        }

    for (const auto& members : out.components) {
        MapObject obj;
        bool first = true;
        for (auto [f, s] : members) {
            // Unit semantic descriptor per detection (normalized pooled features).
            SegmentDescriptors& d = descs[f];
            std::vector<double> desc(d.dim());
            double n2 = 0;
            for (int c = 0; c < d.dim(); ++c) {
                desc[c] = d.g(s, c);
                n2 += desc[c] * desc[c];
            }
            double nrm = std::sqrt(n2);
            if (nrm > 1e-12)
                for (double& v : desc) v /= nrm;
            Detection det{std::move(desc), clouds[f][s]};
            if (first) {
                obj = make_object(det, fusion.voxel_size);
                first = false;
            } else {
                fuse(obj, det, fusion.voxel_size);
            }
        }
        out.map.objects.push_back(std::move(obj));
    }
    return out;
}

struct ApResult {
    double ap = 0;     // mean over IoU thresholds 0.50:0.05:0.95
    double ap50 = 0;   // at IoU 0.50
};

/// Class-agnostic AP over voxel-occupancy IoU: at each threshold, predictions
/// are matched to ground-truth instances greedily by descending IoU (each
/// side used at most once) and the fraction of gt instances recovered is
/// scored. AP averages that over the ten thresholds.
inline ApResult eval_instance_ap(const std::vector<PointCloud>& predicted,
                                 const std::vector<PointCloud>& gt, double iou_voxel_size) {
    if (gt.empty()) throw ValidationError("eval_instance_ap: empty ground truth");
    int np = int(predicted.size()), ng = int(gt.size());
    Mat iou(np, ng);
    for (int p = 0; p < np; ++p)
        for (int g = 0; g < ng; ++g) iou(p, g) = pointcloud_iou(predicted[p], gt[g], iou_voxel_size);

    struct Entry {
        double v;
        int p, g;
    };
    std::vector<Entry> entries;
    for (int p = 0; p < np; ++p)
        for (int g = 0; g < ng; ++g)
            if (iou(p, g) > 0) entries.push_back({iou(p, g), p, g});
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.v != b.v) return a.v > b.v;
        return std::tie(a.p, a.g) < std::tie(b.p, b.g);
    });

    ApResult out;
    double sum = 0;
    for (int step = 0; step < 10; ++step) {
        double threshold = 0.50 + 0.05 * step;
        std::vector<bool> used_p(np, false), used_g(ng, false);
        int tp = 0;
        for (const Entry& e : entries) {
            if (e.v < threshold) break;
            if (used_p[e.p] || used_g[e.g]) continue;
            used_p[e.p] = used_g[e.g] = true;
            ++tp;
        }
        double score = double(tp) / double(ng);
        if (step == 0) out.ap50 = score;
        sum += score;
    }
    out.ap = sum / 10.0;
    return out;
}

}  // namespace segot
