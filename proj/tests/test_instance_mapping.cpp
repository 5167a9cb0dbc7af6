#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <tuple>
#include <vector>

#include "segot/instance_mapping.hpp"
#include "test_util.hpp"

using namespace segot;

namespace {

PointCloud random_cloud(Rng& rng, int n, double extent = 1.0) {
    PointCloud pc;
    for (int i = 0; i < n; ++i)
        pc.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                      rng.uniform(-extent, extent)});
    return pc;
}

double brute_nn_ratio(const PointCloud& cand, const PointCloud& ref, double tol) {
    if (ref.empty()) return 0;
    int hits = 0;
    for (const Vec3& c : cand) {
        double best = 1e30;
        for (const Vec3& r : ref) {
            Vec3 d = c - r;
            best = std::min(best, d.dot(d));
        }
        hits += (best <= tol * tol);
    }
    return double(hits) / cand.size();
}

std::vector<double> unit_vec(Rng& rng, int d) {
    std::vector<double> v(d);
    double n2 = 0;
    for (auto& x : v) {
        x = rng.gaussian();
        n2 += x * x;
    }
    for (auto& x : v) x /= std::sqrt(n2);
    return v;
}

}  // namespace

TEST_CASE("backproject at the principal point goes straight down the axis") {
    MaskSet m(1, 3, 3);
    m.set(0, 1, 1, 1);
    FeatureMap depth(3, 3, 1);
    depth.at(1, 1, 0) = 2.0;
    Intrinsics intr{10, 10, 1, 1};
    CameraPose pose;  // identity
    PointCloud pc = backproject(m, 0, depth, intr, pose);
    REQUIRE(pc.size() == 1);
    CHECK(pc[0].x == doctest::Approx(0.0));
    CHECK(pc[0].y == doctest::Approx(0.0));
    CHECK(pc[0].z == doctest::Approx(2.0));
}

TEST_CASE("unit intrinsics reproduce pixel coordinates at depth one") {
    MaskSet m(1, 5, 5);
    m.set(0, 4, 3, 1);  // (u,v) = (3,4)
    FeatureMap depth(5, 5, 1);
    depth.at(4, 3, 0) = 1.0;
    Intrinsics intr{1, 1, 0, 0};
    CameraPose pose;
    PointCloud pc = backproject(m, 0, depth, intr, pose);
    REQUIRE(pc.size() == 1);
    CHECK(pc[0].x == doctest::Approx(3.0));
    CHECK(pc[0].y == doctest::Approx(4.0));
    CHECK(pc[0].z == doctest::Approx(1.0));
}

TEST_CASE("backproject matches a per-pixel reference with pose applied") {
    Rng rng(3);
    int h = 6, w = 7;
    MaskSet m(1, h, w);
    FeatureMap depth(h, w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (rng.uniform() < 0.5) m.set(0, y, x, 1);
            depth.at(y, x, 0) = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.5, 3.0);
        }
    Intrinsics intr{20, 25, 3.5, 2.5};
    CameraPose pose;
    pose.rotation = Mat3::axis_angle({0.3, 1.0, -0.2}, 0.7);
    pose.translation = {1.0, -2.0, 0.5};
    PointCloud pc = backproject(m, 0, depth, intr, pose);
    PointCloud ref;
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            if (!m.at(0, v, u)) continue;
            double d = depth.at(v, u, 0);
            if (d <= 0) continue;
            Vec3 cam{(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d};
            ref.push_back(pose.rotation.apply(cam) + pose.translation);
        }
    REQUIRE(pc.size() == ref.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
        CHECK(std::abs(pc[i].x - ref[i].x) < 1e-9);
        CHECK(std::abs(pc[i].y - ref[i].y) < 1e-9);
        CHECK(std::abs(pc[i].z - ref[i].z) < 1e-9);
    }
}

TEST_CASE("nn_ratio of identical clouds is one and monotone in tolerance") {
    Rng rng(5);
    PointCloud pc = random_cloud(rng, 50);
    CHECK(nn_ratio(pc, pc, 1e-6) == doctest::Approx(1.0));
    PointCloud other = random_cloud(rng, 60);
    double prev = 0;
    for (double tol : {0.05, 0.1, 0.2, 0.5, 1.0}) {
        double r = nn_ratio(pc, other, tol);
        CHECK(r >= prev);
        prev = r;
    }
}

TEST_CASE("separated clouds score zero") {
    Rng rng(7);
    PointCloud a = random_cloud(rng, 20, 0.5);
    PointCloud b = a;
    for (auto& p : b) p.x += 10.0;
    CHECK(nn_ratio(a, b, 1.0) == 0.0);
}

TEST_CASE("nn_ratio equals brute force exactly on random clouds") {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        PointCloud cand = random_cloud(rng, 200);
        PointCloud ref = random_cloud(rng, 300);
        for (double tol : {0.05, 0.15, 0.35}) {
            CHECK(nn_ratio(cand, ref, tol) == doctest::Approx(brute_nn_ratio(cand, ref, tol)));
        }
    }
}

TEST_CASE("nn_ratio validates inputs") {
    PointCloud empty;
    PointCloud one{{0, 0, 0}};
    CHECK_THROWS_AS(nn_ratio(empty, one, 0.1), ValidationError);
    CHECK(nn_ratio(one, empty, 0.1) == 0.0);
}

TEST_CASE("semantic similarity endpoints") {
    std::vector<double> a{1, 0}, b{0, 1}, c{-1, 0};
    CHECK(semantic_sim(a, a) == doctest::Approx(1.0));
    CHECK(semantic_sim(a, b) == doctest::Approx(0.5));
    CHECK(semantic_sim(a, c) == doctest::Approx(0.0));
    std::vector<double> zero{0, 0};
    CHECK_THROWS_AS(semantic_sim(a, zero), ValidationError);
}

TEST_CASE("fused similarity is the stated convex combination") {
    CHECK(fused_sim(1.0, 0.0, 0.3) == doctest::Approx(0.3));
    CHECK(fused_sim(0.8, 0.8, 0.5) == doctest::Approx(0.8));
    CHECK(fused_sim(0.0, 1.0, 0.1) == doctest::Approx(0.9));
}

TEST_CASE("voxel_downsample groups nearby points into centroids") {
    PointCloud two{{0.001, 0.001, 0.001}, {0.009, 0.001, 0.001}};
    PointCloud out = voxel_downsample(two, 0.1);
    REQUIRE(out.size() == 1);
    CHECK(out[0].x == doctest::Approx(0.005));

    PointCloud spread{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    CHECK(voxel_downsample(spread, 0.2).size() == 4);
}

TEST_CASE("voxel_downsample centroids match a hash-grouping oracle") {
    Rng rng(13);
    PointCloud pc = random_cloud(rng, 1000, 2.0);
    double pitch = 0.25;
    PointCloud out = voxel_downsample(pc, pitch);
    // Reference grouping by floor(p / pitch).
    std::map<std::tuple<long, long, long>, std::pair<Vec3, int>> cells;
    for (const Vec3& p : pc) {
        auto key = std::make_tuple(long(std::floor(p.x / pitch)), long(std::floor(p.y / pitch)),
                                   long(std::floor(p.z / pitch)));
        auto& acc = cells[key];
        acc.first = acc.first + p;
        acc.second += 1;
    }
    REQUIRE(out.size() == cells.size());
    for (const Vec3& p : out) {
        auto key = std::make_tuple(long(std::floor(p.x / pitch)), long(std::floor(p.y / pitch)),
                                   long(std::floor(p.z / pitch)));
        auto it = cells.find(key);
        REQUIRE(it != cells.end());
        Vec3 centroid = it->second.first * (1.0 / it->second.second);
        CHECK(std::abs(p.x - centroid.x) < 1e-12);
        CHECK(std::abs(p.y - centroid.y) < 1e-12);
        CHECK(std::abs(p.z - centroid.z) < 1e-12);
    }
}

TEST_CASE("voxel_downsample is idempotent at a fixed pitch") {
    Rng rng(15);
    PointCloud pc = random_cloud(rng, 400, 1.5);
    PointCloud once = voxel_downsample(pc, 0.3);
    PointCloud twice = voxel_downsample(once, 0.3);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(std::abs(once[i].x - twice[i].x) < 1e-12);
        CHECK(std::abs(once[i].y - twice[i].y) < 1e-12);
        CHECK(std::abs(once[i].z - twice[i].z) < 1e-12);
    }
}

TEST_CASE("pointcloud IoU endpoints and symmetry") {
    Rng rng(17);
    PointCloud a = random_cloud(rng, 100);
    CHECK(pointcloud_iou(a, a, 0.2) == doctest::Approx(1.0));
    PointCloud b = a;
    for (auto& p : b) p.x += 50;
    CHECK(pointcloud_iou(a, b, 0.2) == 0.0);
    PointCloud c = random_cloud(rng, 80);
    CHECK(pointcloud_iou(a, c, 0.2) == doctest::Approx(pointcloud_iou(c, a, 0.2)));
}

TEST_CASE("half-overlapping occupancy yields IoU one half") {
    // Cells 0 and 1 in cloud a; cell 0 only in cloud b.
    PointCloud a{{0.05, 0.05, 0.05}, {1.05, 0.05, 0.05}};
    PointCloud b{{0.02, 0.02, 0.02}};
    CHECK(pointcloud_iou(a, b, 0.1) == doctest::Approx(0.5));
}

TEST_CASE("fuse keeps the running mean exact and renormalizes the view") {
    Rng rng(19);
    int d = 8;
    Detection first{unit_vec(rng, d), random_cloud(rng, 30)};
    MapObject obj = make_object(first, 0.05);
    std::vector<std::vector<double>> inputs{first.descriptor};
    for (int k = 0; k < 9; ++k) {
        Detection det{unit_vec(rng, d), random_cloud(rng, 20)};
        inputs.push_back(det.descriptor);
        fuse(obj, det, 0.05);
    }
    CHECK(obj.fusion_count == 10);
    for (int c = 0; c < d; ++c) {
        double mean = 0;
        for (const auto& in : inputs) mean += in[c];
        mean /= inputs.size();
        CHECK(std::abs(obj.descriptor_mean[c] - mean) < 1e-9);
    }
    double n2 = 0;
    for (double v : obj.unit_descriptor()) n2 += v * v;
    CHECK(n2 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fuse arithmetic on a two-descriptor example") {
    Detection a{{1, 0}, {{0, 0, 0}}};
    MapObject obj = make_object(a, 0.1);
    Detection b{{0, 1}, {{0, 0, 0}}};
    fuse(obj, b, 0.1);
    CHECK(obj.descriptor_mean[0] == doctest::Approx(0.5));
    CHECK(obj.descriptor_mean[1] == doctest::Approx(0.5));
    CHECK(obj.fusion_count == 2);

    MapObject same = make_object(a, 0.1);
    fuse(same, a, 0.1);
    CHECK(same.descriptor_mean[0] == doctest::Approx(1.0));
}

TEST_CASE("greedy association: empty map instantiates everything") {
    Rng rng(23);
    InstanceMap map;
    FusionConfig cfg;
    cfg.sim_threshold = 0.95;
    std::vector<Detection> dets;
    for (int i = 0; i < 3; ++i) dets.push_back({unit_vec(rng, 6), random_cloud(rng, 10)});
    auto decisions = greedy_associate(dets, map, cfg);
    CHECK(map.objects.size() == 3);
    for (const auto& d : decisions) CHECK(d.object_index == -1);
}

TEST_CASE("greedy association merges above threshold, instantiates below") {
    Rng rng(29);
    FusionConfig cfg;
    cfg.blend_alpha = 0.5;
    cfg.sim_threshold = 0.90;
    cfg.nn_tolerance = 0.2;
    std::vector<double> f = unit_vec(rng, 6);
    PointCloud base = random_cloud(rng, 40, 0.3);

    InstanceMap map;
    greedy_associate({{f, base}}, map, cfg);
    REQUIRE(map.objects.size() == 1);

    // Same descriptor and same cloud: s_sem = 1, s_geo = 1, fused = 1 >= 0.90.
    greedy_associate({{f, base}}, map, cfg);
    CHECK(map.objects.size() == 1);
    CHECK(map.objects[0].fusion_count == 2);

    // Same descriptor but distant cloud: no bounding-box overlap, new object.
    PointCloud far = base;
    for (auto& p : far) p.x += 5.0;
    greedy_associate({{f, far}}, map, cfg);
    CHECK(map.objects.size() == 2);

    // Partially-overlapping cloud engineered below the fused threshold:
    // s_sem = 1, s_geo = 0.5 -> fused = 0.75 < 0.90 with alpha = 0.5.
    PointCloud half = base;
    for (std::size_t i = 0; i < half.size() / 2; ++i) half[i].x += 1.0;
    double geo = nn_ratio(half, map.objects[0].points, cfg.nn_tolerance);
    CHECK(geo < 0.8);
    std::size_t before = map.objects.size();
    auto dec = greedy_associate({{f, half}}, map, cfg);
    CHECK(map.objects.size() == before + 1);
    CHECK(dec[0].object_index == -1);
}

TEST_CASE("association threshold edges with exactly constructed fused scores") {
    // Same descriptor (s_sem = 1); geometry built so the fused score lands
    // just above or below the configured threshold.
    std::vector<double> f{1, 0, 0};
    PointCloud base;
    for (int i = 0; i < 24; ++i) base.push_back({0.01 * i, 0, 0});

    {
        // s_geo = 23/24, blend 0.3 -> fused 0.9708 >= 0.96: merge.
        FusionConfig cfg;
        cfg.blend_alpha = 0.3;
        cfg.sim_threshold = 0.96;
        cfg.nn_tolerance = 0.02;
        InstanceMap map;
        greedy_associate({{f, base}}, map, cfg);
        PointCloud probe = base;
        probe[0].y += 10 * cfg.nn_tolerance;  // one point beyond tolerance
        double fused = fused_sim(1.0, nn_ratio(probe, map.objects[0].points, cfg.nn_tolerance),
                                 cfg.blend_alpha);
        CHECK(fused == doctest::Approx(0.3 + 0.7 * 23.0 / 24.0));
        greedy_associate({{f, probe}}, map, cfg);
        CHECK(map.objects.size() == 1);
        CHECK(map.objects[0].fusion_count == 2);
    }
    {
        // s_geo = 0.7, blend 0.5 -> fused 0.85 < 0.90: new object.
        FusionConfig cfg;
        cfg.blend_alpha = 0.5;
        cfg.sim_threshold = 0.90;
        cfg.nn_tolerance = 0.02;
        InstanceMap map;
        PointCloud ten;
        for (int i = 0; i < 10; ++i) ten.push_back({0.01 * i, 0, 0});
        greedy_associate({{f, ten}}, map, cfg);
        PointCloud probe = ten;
        for (int i = 0; i < 3; ++i) probe[i].y += 10 * cfg.nn_tolerance;
        double fused = fused_sim(1.0, nn_ratio(probe, map.objects[0].points, cfg.nn_tolerance),
                                 cfg.blend_alpha);
        CHECK(fused == doctest::Approx(0.85));
        auto dec = greedy_associate({{f, probe}}, map, cfg);
        CHECK(dec[0].object_index == -1);
        CHECK(map.objects.size() == 2);
    }
}

TEST_CASE("class-agnostic AP on hand-built maps") {
    Rng rng(31);
    std::vector<PointCloud> gt;
    for (int i = 0; i < 4; ++i) {
        PointCloud pc = random_cloud(rng, 50, 0.3);
        for (auto& p : pc) p.x += 3.0 * i;
        gt.push_back(pc);
    }
    // Perfect prediction.
    ApResult perfect = eval_instance_ap(gt, gt, 0.1);
    CHECK(perfect.ap == doctest::Approx(1.0));
    CHECK(perfect.ap50 == doctest::Approx(1.0));

    // Each prediction split into quarters by occupied cell: every fragment's
    // IoU against its instance is 0.25 < 0.5, so nothing matches at 0.50.
    std::vector<PointCloud> gt_cells;
    for (int i = 0; i < 4; ++i) {
        PointCloud pc;
        for (int c = 0; c < 4; ++c) pc.push_back({3.0 * i + 0.55 * c + 0.05, 0.05, 0.05});
        gt_cells.push_back(pc);
    }
    std::vector<PointCloud> split;
    for (const auto& pc : gt_cells)
        for (const Vec3& p : pc) split.push_back({p});
    ApResult frag = eval_instance_ap(split, gt_cells, 0.5);
    CHECK(frag.ap50 == 0.0);
    CHECK(frag.ap == 0.0);

    // Half the instances perfect, half missing.
    std::vector<PointCloud> half(gt.begin(), gt.begin() + 2);
    ApResult missing = eval_instance_ap(half, gt, 0.1);
    CHECK(missing.ap50 == doctest::Approx(0.5));
    CHECK(missing.ap == doctest::Approx(0.5));

    CHECK_THROWS_AS(eval_instance_ap(gt, {}, 0.1), ValidationError);
}

TEST_CASE("split predictions with sub-threshold halves score zero at 0.5") {
    // One gt instance occupying two distinct cells; each prediction covers one
    // cell, so each IoU is exactly 0.5... make halves strictly smaller.
    PointCloud gt_pc{{0.05, 0, 0}, {1.05, 0, 0}, {2.05, 0, 0}, {3.05, 0, 0}};
    PointCloud half_a{{0.05, 0, 0}};                      // IoU 0.25
    PointCloud half_b{{1.05, 0, 0}, {2.05, 0, 0}};        // IoU 0.5
    ApResult r = eval_instance_ap({half_a}, {gt_pc}, 0.5);
    CHECK(r.ap50 == 0.0);
    ApResult r2 = eval_instance_ap({half_b}, {gt_pc}, 0.5);
    CHECK(r2.ap50 == doctest::Approx(1.0));  // 0.5 clears the >= 0.50 threshold
}

TEST_CASE("fusion config validation enforces the documented ranges") {
    FusionConfig cfg;
    cfg.blend_alpha = 0.05;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.blend_alpha = 0.3;
    cfg.sim_threshold = 0.8;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.sim_threshold = 0.93;
    cfg.voxel_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}
