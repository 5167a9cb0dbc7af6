// Pair manifests: the JSON contract tying feature/mask tensors, validity
// flags, and optional ground truth, poses, depth, and intrinsics together.

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "segot/common.hpp"
#include "segot/tensor.hpp"

namespace segot {

/// Dense per-pixel descriptor grid, H x W x D, held as doubles for compute.
struct FeatureMap {
    int h = 0, w = 0, d = 0;
    std::vector<double> v;  // row-major (y, x, c)

    FeatureMap() = default;
    FeatureMap(int h_, int w_, int d_) : h(h_), w(w_), d(d_), v(std::size_t(h_) * w_ * d_, 0.0) {}

    double& at(int y, int x, int c) { return v[(std::size_t(y) * w + x) * d + c]; }
    double at(int y, int x, int c) const { return v[(std::size_t(y) * w + x) * d + c]; }
    const double* pixel(int y, int x) const { return v.data() + (std::size_t(y) * w + x) * d; }
    double* pixel(int y, int x) { return v.data() + (std::size_t(y) * w + x) * d; }

    static FeatureMap from_tensor(const DenseTensor& t) {
        if (t.dtype != Dtype::f32 || t.shape.size() != 3)
            throw ValidationError("feature map tensor must be f32 with shape HxWxD");
        FeatureMap f(int(t.shape[0]), int(t.shape[1]), int(t.shape[2]));
        for (std::size_t i = 0; i < t.f32.size(); ++i) f.v[i] = t.f32[i];
        return f;
    }

    DenseTensor to_tensor() const {
        std::vector<float> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
        return DenseTensor::make_f32({std::uint64_t(h), std::uint64_t(w), std::uint64_t(d)},
                                     std::move(out));
    }
};

/// M binary masks at pixel resolution plus per-slot validity flags.
/// Zero-padded slots are distinguishable from genuinely empty segments via
/// `valid`, which lives in the manifest rather than the mask tensor.
struct MaskSet {
    int m = 0, h = 0, w = 0;
    std::vector<std::uint8_t> bits;  // (m, y, x)
    std::vector<bool> valid;

    MaskSet() = default;
    MaskSet(int m_, int h_, int w_)
        : m(m_), h(h_), w(w_), bits(std::size_t(m_) * h_ * w_, 0), valid(m_, true) {}

    std::uint8_t at(int mi, int y, int x) const { return bits[(std::size_t(mi) * h + y) * w + x]; }
    void set(int mi, int y, int x, std::uint8_t b) { bits[(std::size_t(mi) * h + y) * w + x] = b; }

    std::size_t pixel_count(int mi) const {
        std::size_t n = 0;
        const std::uint8_t* p = bits.data() + std::size_t(mi) * h * w;
        for (int i = 0; i < h * w; ++i) n += (p[i] != 0);
        return n;
    }

    static MaskSet from_tensor(const DenseTensor& t, const std::vector<bool>& valid) {
        if (t.dtype != Dtype::u8 || t.shape.size() != 3)
            throw ValidationError("mask tensor must be u8 with shape MxHxW");
        MaskSet s(int(t.shape[0]), int(t.shape[1]), int(t.shape[2]));
        for (std::uint8_t b : t.u8)
            if (b > 1) throw ValidationError("mask tensor entries must be 0 or 1");
        s.bits = t.u8;
        if (int(valid.size()) != s.m)
            throw ValidationError("validity flags length " + std::to_string(valid.size()) +
                                  " != mask count " + std::to_string(s.m));
        s.valid = valid;
        return s;
    }

    DenseTensor to_tensor() const {
        return DenseTensor::make_u8({std::uint64_t(m), std::uint64_t(h), std::uint64_t(w)}, bits);
    }
};

/// Ground-truth match set plus the unmatched index sets on each side.
struct GtAssignment {
    std::vector<std::pair<int, int>> matches;
    std::vector<int> unmatched_a;
    std::vector<int> unmatched_b;

    void validate(int m1, int m2) const {
        std::vector<bool> seen_a(m1, false), seen_b(m2, false);
        auto take_a = [&](int i) {
            if (i < 0 || i >= m1) throw ValidationError("gt: source index " + std::to_string(i) +
                                                        " out of range [0," + std::to_string(m1) + ")");
            if (seen_a[i]) throw ValidationError("gt: source index " + std::to_string(i) + " repeated");
            seen_a[i] = true;
        };
        auto take_b = [&](int j) {
            if (j < 0 || j >= m2) throw ValidationError("gt: target index " + std::to_string(j) +
                                                        " out of range [0," + std::to_string(m2) + ")");
            if (seen_b[j]) throw ValidationError("gt: target index " + std::to_string(j) + " repeated");
            seen_b[j] = true;
        };
        for (auto [i, j] : matches) {
            take_a(i);
            take_b(j);
        }
        for (int i : unmatched_a) take_a(i);
        for (int j : unmatched_b) take_b(j);
    }
};

/// World-from-camera pose.
struct CameraPose {
    Mat3 rotation;
    Vec3 translation;

    void validate() const {
        if (!is_rotation(rotation))
            throw ValidationError("pose: rotation is not orthonormal with det +1");
    }
};

struct Intrinsics {
    double fx = 1, fy = 1, cx = 0, cy = 0;

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) throw ValidationError("intrinsics: fx and fy must be positive");
    }
};

constexpr int kMaxSegments = 100;

/// Fully validated in-memory pair. Immutable after load; safe to share.
struct LoadedPair {
    FeatureMap features_a, features_b;
    MaskSet masks_a, masks_b;
    std::optional<GtAssignment> gt;
    std::optional<CameraPose> pose_a, pose_b;
    std::optional<FeatureMap> depth_a, depth_b;  // d == 1
    std::optional<Intrinsics> intrinsics;
};

namespace detail {

inline GtAssignment gt_from_json(const nlohmann::json& j) {
    GtAssignment gt;
    if (j.contains("matches"))
        for (const auto& e : j.at("matches"))
            gt.matches.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    if (j.contains("unmatched_a")) gt.unmatched_a = j.at("unmatched_a").get<std::vector<int>>();
    if (j.contains("unmatched_b")) gt.unmatched_b = j.at("unmatched_b").get<std::vector<int>>();
    return gt;
}

inline nlohmann::json gt_to_json(const GtAssignment& gt) {
    nlohmann::json j;
    j["matches"] = nlohmann::json::array();
    for (auto [a, b] : gt.matches) j["matches"].push_back({a, b});
    j["unmatched_a"] = gt.unmatched_a;
    j["unmatched_b"] = gt.unmatched_b;
    return j;
}

inline CameraPose pose_from_json(const nlohmann::json& j) {
    CameraPose p;
    auto rot = j.at("rotation").get<std::vector<double>>();
    if (rot.size() != 9) throw ValidationError("pose: rotation must have 9 entries");
    for (int i = 0; i < 9; ++i) p.rotation.m[i] = rot[i];
    auto tr = j.at("translation").get<std::vector<double>>();
    if (tr.size() != 3) throw ValidationError("pose: translation must have 3 entries");
    p.translation = {tr[0], tr[1], tr[2]};
    p.validate();
    return p;
}

inline nlohmann::json pose_to_json(const CameraPose& p) {
    nlohmann::json j;
    j["rotation"] = std::vector<double>(p.rotation.m, p.rotation.m + 9);
    j["translation"] = {p.translation.x, p.translation.y, p.translation.z};
    return j;
}

inline FeatureMap depth_from_tensor(const DenseTensor& t, const std::string& name) {
    if (t.dtype != Dtype::f32 || t.shape.size() != 2)
        throw ValidationError(name + ": depth tensor must be f32 with shape HxW");
    FeatureMap d(int(t.shape[0]), int(t.shape[1]), 1);
    for (std::size_t i = 0; i < t.f32.size(); ++i) d.v[i] = t.f32[i];
    return d;
}

}  // namespace detail

/// Load and cross-validate a pair manifest. Either returns a fully consistent
/// pair or throws; no partially loaded state escapes.
inline LoadedPair load_pair(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw IoError("cannot open manifest: " + manifest_path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + manifest_path + ": " + e.what());
    }

    fs::path base = fs::path(manifest_path).parent_path();
    auto tensor_at = [&](const std::string& key) {
        std::string rel = j.at(key).get<std::string>();
        fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : base / rel;
        return load_tensor(p.string());
    };

    LoadedPair pair;
    try {
        pair.features_a = FeatureMap::from_tensor(tensor_at("features_a"));
        pair.features_b = FeatureMap::from_tensor(tensor_at("features_b"));
        pair.masks_a = MaskSet::from_tensor(tensor_at("masks_a"), j.at("valid_a").get<std::vector<bool>>());
        pair.masks_b = MaskSet::from_tensor(tensor_at("masks_b"), j.at("valid_b").get<std::vector<bool>>());
        if (j.contains("gt") && !j.at("gt").is_null()) pair.gt = detail::gt_from_json(j.at("gt"));
        if (j.contains("pose_a") && !j.at("pose_a").is_null())
            pair.pose_a = detail::pose_from_json(j.at("pose_a"));
        if (j.contains("pose_b") && !j.at("pose_b").is_null())
            pair.pose_b = detail::pose_from_json(j.at("pose_b"));
        if (j.contains("depth_a") && !j.at("depth_a").is_null())
            pair.depth_a = detail::depth_from_tensor(tensor_at("depth_a"), "depth_a");
        if (j.contains("depth_b") && !j.at("depth_b").is_null())
            pair.depth_b = detail::depth_from_tensor(tensor_at("depth_b"), "depth_b");
        if (j.contains("intrinsics") && !j.at("intrinsics").is_null()) {
            const auto& ji = j.at("intrinsics");
            Intrinsics in;
            in.fx = ji.at("fx").get<double>();
            in.fy = ji.at("fy").get<double>();
            in.cx = ji.at("cx").get<double>();
            in.cy = ji.at("cy").get<double>();
            in.validate();
            pair.intrinsics = in;
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + manifest_path + ": " + e.what());
    }

    // Cross-tensor consistency.
    auto check_hw = [&](int h, int w, int rh, int rw, const std::string& what) {
        if (h != rh || w != rw)
            throw ValidationError("manifest " + manifest_path + ": " + what + " has size " +
                                  std::to_string(h) + "x" + std::to_string(w) +
                                  " but features are " + std::to_string(rh) + "x" +
                                  std::to_string(rw));
    };
    check_hw(pair.masks_a.h, pair.masks_a.w, pair.features_a.h, pair.features_a.w, "masks_a");
    check_hw(pair.masks_b.h, pair.masks_b.w, pair.features_b.h, pair.features_b.w, "masks_b");
    if (pair.depth_a) check_hw(pair.depth_a->h, pair.depth_a->w, pair.features_a.h, pair.features_a.w, "depth_a");
    if (pair.depth_b) check_hw(pair.depth_b->h, pair.depth_b->w, pair.features_b.h, pair.features_b.w, "depth_b");
    if (pair.features_a.d != pair.features_b.d)
        throw ValidationError("manifest " + manifest_path + ": feature dims differ between images");
    if (pair.masks_a.m > kMaxSegments || pair.masks_b.m > kMaxSegments)
        throw ValidationError("manifest " + manifest_path + ": more than " +
                              std::to_string(kMaxSegments) + " mask slots");
    if (pair.gt) pair.gt->validate(pair.masks_a.m, pair.masks_b.m);
    return pair;
}

/// Writes `content` atomically: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open for writing: " + tmp.string());
        os.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!os) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("rename failed for " + target.string() + ": " + ec.message());
    }
}

}  // namespace segot
