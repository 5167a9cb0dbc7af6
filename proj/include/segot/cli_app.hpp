// Subcommand implementations behind the `segot` binary: gen, match, vote,
// train, eval, map, yaw. Kept in a header so the test suite can drive the
// exact code path the executable uses.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "segot/baselines.hpp"
#include "segot/evaluation.hpp"
#include "segot/instance_mapping.hpp"
#include "segot/manifest.hpp"
#include "segot/nav_controller.hpp"
#include "segot/ot_matcher.hpp"
#include "segot/synth_scene.hpp"
#include "segot/training.hpp"

namespace segot::cli {

namespace fs = std::filesystem;

inline void run_indexed_jobs(int count, int jobs, const std::function<void(int)>& body) {
    jobs = std::max(1, jobs);
    if (jobs == 1 || count <= 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs);
    for (int t = 0; t < jobs; ++t)
        pool.emplace_back([&, t] {
            try {
                for (int i = next++; i < count; i = next++) body(i);
            } catch (...) {
                errors[t] = std::current_exception();
                next = count;
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------

struct SceneFlags {
    SceneConfig cfg;
    std::string layout = "voronoi";

    void attach(CLI::App* cmd) {
        cmd->add_option("--height", cfg.height, "image height");
        cmd->add_option("--width", cfg.width, "image width");
        cmd->add_option("--min-segments", cfg.min_segments, "minimum segments per image");
        cmd->add_option("--max-segments", cfg.max_segments, "maximum segments per image");
        cmd->add_option("--layout", layout, "segment layout: voronoi | rectangles");
        cmd->add_option("--latent-dim", cfg.latent_dim, "latent descriptor dimension");
        cmd->add_option("--sigma", cfg.noise_sigma, "per-pixel feature noise");
        cmd->add_option("--drop", cfg.drop_fraction, "fraction of segments visible in one view only");
        cmd->add_option("--min-angle", cfg.min_angle_deg, "pose angle lower bound (deg)");
        cmd->add_option("--max-angle", cfg.max_angle_deg, "pose angle upper bound (deg)");
        cmd->add_option("--patch-size", cfg.patch_size, "patch size for head inputs");
        cmd->add_option("--clusters", cfg.latent_clusters, "latent clusters (0 = independent)");
        cmd->add_option("--spread", cfg.cluster_spread, "intra-cluster angle (radians)");
    }

    SceneConfig resolve() const {
        SceneConfig out = cfg;
        if (layout == "rectangles")
            out.layout = SceneConfig::Layout::rectangles;
        else if (layout == "voronoi")
            out.layout = SceneConfig::Layout::voronoi;
        else
            throw ValidationError("unknown layout: " + layout);
        return out;
    }
};

struct MatcherFlags {
    MatcherConfig cfg;
    double alpha = 1.0;
    bool no_normalize = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--tau", cfg.temperature, "Sinkhorn temperature");
        cmd->add_option("--iters", cfg.iterations, "Sinkhorn iterations");
        cmd->add_option("--alpha", alpha, "dustbin logit");
        cmd->add_flag("--no-normalize", no_normalize, "skip descriptor L2 normalization");
        cmd->add_flag("--mutual-check", cfg.mutual_check, "require mutual argmax");
    }

    MatcherConfig resolve() const {
        MatcherConfig out = cfg;
        out.normalize_descriptors = !no_normalize;
        return out;
    }
};

// ---------------------------------------------------------------------------

inline int cmd_gen(std::uint64_t seed, int pairs, bool sequence, int frames,
                   const std::string& out_dir, const SceneFlags& scene, int jobs) {
    SceneConfig cfg = scene.resolve();
    fs::create_directories(out_dir);
    if (sequence) {
        SequenceConfig sq;
        sq.scene = cfg;
        SynthSequence seq = gen_sequence(sq, frames, seed);
        std::string path = write_sequence(seq, out_dir, "seq");
        std::cout << path << "\n";
        return 0;
    }
    run_indexed_jobs(pairs, jobs, [&](int k) {
        SynthPair pair = gen_pair(cfg, seed + std::uint64_t(k));
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%04d", k);
        write_pair(pair, out_dir, stem);
    });
    std::cout << out_dir << ": " << pairs << " pair manifests\n";
    return 0;
}

/// Average-pool pixel features into an s x s patch grid so a trained head
/// (which consumes patch-level inputs) can run on a stored pair.
inline PatchGrid pool_to_patches(const FeatureMap& f, int s) {
    if (f.h % s != 0 || f.w % s != 0)
        throw ValidationError("features " + std::to_string(f.h) + "x" + std::to_string(f.w) +
                              " not divisible by patch size " + std::to_string(s));
    PatchGrid g(f.h / s, f.w / s, f.d);
    for (int py = 0; py < g.height_p; ++py)
        for (int px = 0; px < g.width_p; ++px)
            for (int c = 0; c < f.d; ++c) {
                double acc = 0;
                for (int sy = 0; sy < s; ++sy)
                    for (int sx = 0; sx < s; ++sx) acc += f.at(py * s + sy, px * s + sx, c);
                g.at(py, px, c) = acc / (s * s);
            }
    return g;
}

inline nlohmann::json match_json_with_plan(const MatchOutput& mo, int m1, int m2) {
    nlohmann::json j = match_to_json(mo);
    // Full score block (plan without the dustbin), re-expanded to slots, so
    // downstream evaluation can rank candidates.
    std::vector<std::vector<double>> plan(m1, std::vector<double>(m2, 0.0));
    for (int r = 0; r < int(mo.src_index.size()); ++r)
        for (int c = 0; c < int(mo.tgt_index.size()); ++c)
            plan[mo.src_index[r]][mo.tgt_index[c]] = mo.plan.p(r, c);
    j["plan"] = plan;
    return j;
}

inline int cmd_match(const std::string& pair_path, const std::string& out_path,
                     const MatcherFlags& mf, const std::string& agg, const std::string& head_dir) {
    LoadedPair pair = load_pair(pair_path);
    MatcherConfig cfg = mf.resolve();
    SegmentDescriptors ga, gb;
    if (!head_dir.empty()) {
        HeadCheckpoint ck = load_head_checkpoint(head_dir);
        ga = aggregate_sum(head_forward(pool_to_patches(pair.features_a, ck.params.patch_size),
                                        ck.params), pair.masks_a);
        gb = aggregate_sum(head_forward(pool_to_patches(pair.features_b, ck.params.patch_size),
                                        ck.params), pair.masks_b);
    } else if (agg == "mean") {
        ga = aggregate_mean(pair.features_a, pair.masks_a);
        gb = aggregate_mean(pair.features_b, pair.masks_b);
    } else if (agg == "sum") {
        ga = aggregate_sum(pair.features_a, pair.masks_a);
        gb = aggregate_sum(pair.features_b, pair.masks_b);
    } else {
        throw ValidationError("unknown aggregation: " + agg);
    }
    MatchOutput mo = match_segments(ga, gb, cfg, DustbinParam{mf.alpha});
    write_file_atomic(out_path, match_json_with_plan(mo, pair.masks_a.m, pair.masks_b.m).dump(2) + "\n");
    return 0;
}

inline int cmd_vote(const std::string& pair_path, const std::string& kps_path,
                    const std::string& out_path) {
    LoadedPair pair = load_pair(pair_path);
    std::ifstream is(kps_path);
    if (!is) throw IoError("cannot open keypoints: " + kps_path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("keypoints: ") + e.what());
    }
    KeypointMatches kps;
    for (const auto& e : j) {
        KeypointPair k;
        k.x0 = e.at(0).at(0).get<int>();
        k.y0 = e.at(0).at(1).get<int>();
        k.x1 = e.at(1).at(0).get<int>();
        k.y1 = e.at(1).at(1).get<int>();
        kps.push_back(k);
    }
    VoteMatchResult res = vote_match(pair.masks_a, pair.masks_b, kps);
    nlohmann::json out;
    out["assignment"] = res.assignment;
    std::vector<std::vector<int>> votes(res.votes.m, std::vector<int>(res.votes.n));
    for (int m = 0; m < res.votes.m; ++m)
        for (int n = 0; n < res.votes.n; ++n) votes[m][n] = res.votes.at(m, n);
    out["votes"] = votes;
    write_file_atomic(out_path, out.dump(2) + "\n");
    return 0;
}

inline int cmd_train(const std::string& out_dir, TrainConfig cfg) {
    TrainResult res = train_head(cfg);
    fs::create_directories(out_dir);
    save_head_checkpoint(out_dir, res.params, res.alpha, cfg.seed, cfg.steps);
    write_file_atomic((fs::path(out_dir) / "trace.csv").string(), trace_csv(res.trace));
    if (!res.trace.empty())
        std::cout << "final loss " << res.trace.back().loss << " after " << cfg.steps
                  << " steps (alpha " << res.alpha << ")\n";
    return 0;
}

inline int cmd_eval(const std::string& pairs_dir, const std::string& pred_dir,
                    const std::string& out_path, const std::string& pr_csv_dir,
                    bool gt_prefiltered, int jobs) {
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(pairs_dir))
        if (e.path().extension() == ".json") stems.push_back(e.path().stem().string());
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) throw ValidationError("no pair manifests in " + pairs_dir);

    std::vector<PairEvalInput> inputs(stems.size());
    run_indexed_jobs(int(stems.size()), jobs, [&](int idx) {
        const std::string& stem = stems[idx];
        LoadedPair pair = load_pair((fs::path(pairs_dir) / (stem + ".json")).string());
        if (!pair.gt) throw ValidationError("pair " + stem + " has no ground truth");
        fs::path pred_path = fs::path(pred_dir) / (stem + ".json");
        std::ifstream is(pred_path);
        if (!is) throw IoError("missing prediction: " + pred_path.string());
        nlohmann::json pj;
        try {
            is >> pj;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("prediction " + pred_path.string() + ": " + e.what());
        }

        PairEvalInput in;
        in.gt = *pair.gt;
        std::vector<bool> is_match(std::size_t(pair.masks_a.m) * pair.masks_b.m, false);
        for (auto [i, j] : pair.gt->matches) is_match[std::size_t(i) * pair.masks_b.m + j] = true;

        const auto& assignment = pj.at("assignment");
        const auto& scores = pj.at("scores");
        for (int i = 0; i < int(assignment.size()); ++i) {
            if (assignment[i].is_null()) continue;
            int j = assignment[i].get<int>();
            in.predictions.push_back(
                {i, j, scores[i].get<double>(), is_match[std::size_t(i) * pair.masks_b.m + j]});
        }
        in.score_matrix = Mat(pair.masks_a.m, pair.masks_b.m, -1e30);
        if (pj.contains("plan")) {
            const auto& plan = pj.at("plan");
            for (int i = 0; i < pair.masks_a.m; ++i)
                for (int j = 0; j < pair.masks_b.m; ++j)
                    in.score_matrix(i, j) = plan.at(i).at(j).get<double>();
        } else {
            for (const auto& p : in.predictions) in.score_matrix(p.i, p.j) = p.score;
        }
        if (pair.pose_a && pair.pose_b)
            in.geodesic_deg = geodesic_rotation_deg(pair.pose_a->rotation, pair.pose_b->rotation);
        inputs[idx] = std::move(in);
    });

    MetricReport report = evaluate_dataset(inputs, gt_prefiltered);
    write_file_atomic(out_path, report_to_json(report).dump(2) + "\n");
    if (!pr_csv_dir.empty()) {
        fs::create_directories(pr_csv_dir);
        for (const auto& bin : report.bins)
            write_file_atomic((fs::path(pr_csv_dir) / ("pr_" + bin.label + ".csv")).string(),
                              pr_curve_csv(bin));
    }
    std::cout << report_to_json(report).dump(2) << "\n";
    return 0;
}

inline int cmd_map(const std::string& frames_path, const std::string& out_dir,
                   const MatcherFlags& mf, FusionConfig fusion) {
    LoadedSequence seq = load_sequence(frames_path);
    PairwiseMapResult res = build_map_pairwise(seq.frames, mf.resolve(), DustbinParam{mf.alpha},
                                               fusion);
    fs::create_directories(out_dir);
    for (int k = 0; k < int(res.map.objects.size()); ++k) {
        const MapObject& obj = res.map.objects[k];
        std::vector<float> pts;
        pts.reserve(obj.points.size() * 3);
        for (const Vec3& p : obj.points) {
            pts.push_back(float(p.x));
            pts.push_back(float(p.y));
            pts.push_back(float(p.z));
        }
        std::string stem = "object_" + std::to_string(k);
        save_tensor(DenseTensor::make_f32({std::uint64_t(obj.points.size()), 3}, std::move(pts)),
                    (fs::path(out_dir) / (stem + ".points.sgt")).string());
        nlohmann::json j;
        j["descriptor"] = obj.unit_descriptor();
        j["n"] = obj.fusion_count;
        j["object_id"] = k;
        write_file_atomic((fs::path(out_dir) / (stem + ".json")).string(), j.dump(2) + "\n");
    }
    nlohmann::json summary;
    summary["objects"] = res.map.objects.size();
    summary["accepted_links"] = res.accepted_links.size();
    if (!seq.object_ids.empty()) {
        std::vector<PointCloud> gt = gt_instance_clouds(seq.frames, seq.object_ids,
                                                        fusion.voxel_size);
        std::vector<PointCloud> pred;
        for (const auto& o : res.map.objects) pred.push_back(o.points);
        ApResult ap = eval_instance_ap(pred, gt, fusion.iou_voxel_size);
        summary["ap"] = ap.ap;
        summary["ap50"] = ap.ap50;
    }
    write_file_atomic((fs::path(out_dir) / "map.json").string(), summary.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
    return 0;
}

inline int cmd_yaw(const std::string& segments_path, NavConfig cfg) {
    std::ifstream is(segments_path);
    if (!is) throw IoError("cannot open segments: " + segments_path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("segments: ") + e.what());
    }
    std::vector<NavSegment> segments;
    for (const auto& e : j) segments.push_back({e.at("x").get<double>(), e.at("p").get<double>()});
    std::cout << yaw(segments, cfg) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
    CLI::App app{"segment matching over dense features: synthesis, optimal-transport "
                 "matching, training, evaluation, instance mapping, navigation"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate synthetic pairs or a frame sequence");
    std::uint64_t gen_seed = 42;
    int gen_pairs = 1, gen_frames = 6, gen_jobs = 1;
    bool gen_sequence_mode = false;
    std::string gen_out;
    SceneFlags gen_scene;
    gen->add_option("--seed", gen_seed, "base seed");
    gen->add_option("--pairs", gen_pairs, "number of pairs");
    gen->add_flag("--sequence", gen_sequence_mode, "generate a frame sequence instead of pairs");
    gen->add_option("--frames", gen_frames, "frames in the sequence");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--jobs", gen_jobs, "parallel workers");
    gen_scene.attach(gen);

    // match
    auto* match = app.add_subcommand("match", "match one pair into a correspondences JSON");
    std::string match_pair, match_out, match_agg = "sum", match_head;
    MatcherFlags match_flags;
    match->add_option("--pair", match_pair, "pair manifest")->required();
    match->add_option("--out", match_out, "output JSON")->required();
    match->add_option("--agg", match_agg, "descriptor aggregation: sum | mean");
    match->add_option("--head", match_head, "trained head checkpoint directory");
    match_flags.attach(match);

    // vote
    auto* vote = app.add_subcommand("vote", "keypoint-voting baseline assignment");
    std::string vote_pair, vote_kps, vote_out;
    vote->add_option("--pair", vote_pair, "pair manifest")->required();
    vote->add_option("--keypoints", vote_kps, "keypoint matches JSON")->required();
    vote->add_option("--out", vote_out, "output JSON")->required();

    // train
    auto* train = app.add_subcommand("train", "desk-scale head training on synthetic pairs");
    std::string train_out;
    TrainConfig train_cfg;
    SceneFlags train_scene;
    train_scene.cfg = TrainConfig::desk_scene();
    MatcherFlags train_matcher;
    train_matcher.cfg = TrainConfig::desk_matcher();
    train->add_option("--out", train_out, "checkpoint directory")->required();
    train->add_option("--steps", train_cfg.steps, "training steps");
    train->add_option("--batch", train_cfg.batch_size, "batch size");
    train->add_option("--epochs", train_cfg.epochs, "epochs over the pair pool");
    train->add_option("--seed", train_cfg.seed, "seed");
    train->add_option("--hidden", train_cfg.hidden, "hidden width");
    train->add_option("--dim-out", train_cfg.dim_out, "descriptor dimension");
    train_scene.attach(train);
    train_matcher.attach(train);

    // eval
    auto* eval = app.add_subcommand("eval", "aggregate matched pairs into a metric report");
    std::string eval_pairs, eval_pred, eval_out, eval_pr;
    bool eval_prefiltered = false;
    int eval_jobs = 1;
    eval->add_option("--pairs", eval_pairs, "directory of pair manifests")->required();
    eval->add_option("--pred", eval_pred, "directory of match outputs")->required();
    eval->add_option("--out", eval_out, "report JSON path")->required();
    eval->add_option("--pr-csv", eval_pr, "directory for per-bin PR curves");
    eval->add_flag("--gt-prefiltered", eval_prefiltered, "mark gt as externally pre-filtered");
    eval->add_option("--jobs", eval_jobs, "parallel workers");

    // map
    auto* map = app.add_subcommand("map", "build a 3D instance map from a frame sequence");
    std::string map_frames, map_out;
    MatcherFlags map_matcher;
    FusionConfig map_fusion;
    map->add_option("--frames", map_frames, "sequence manifest")->required();
    map->add_option("--out", map_out, "output directory")->required();
    map->add_option("--blend", map_fusion.blend_alpha, "semantic/geometric blend alpha");
    map->add_option("--sim-threshold", map_fusion.sim_threshold, "merge similarity threshold");
    map->add_option("--nn-tol", map_fusion.nn_tolerance, "nearest-neighbour tolerance (m)");
    map->add_option("--voxel", map_fusion.voxel_size, "map voxel size (m)");
    map->add_option("--iou-threshold", map_fusion.iou_threshold, "link IoU threshold");
    map->add_option("--iou-voxel", map_fusion.iou_voxel_size, "IoU voxel size (m)");
    map_matcher.attach(map);

    // yaw
    auto* yaw_cmd = app.add_subcommand("yaw", "segment-weighted steering command");
    std::string yaw_segments;
    NavConfig yaw_cfg;
    yaw_cfg.width = 100;
    yaw_cmd->add_option("--segments", yaw_segments, "JSON list of {x, p}")->required();
    yaw_cmd->add_option("--tau", yaw_cfg.temperature, "softmax temperature");
    yaw_cmd->add_option("--gain", yaw_cfg.gain, "proportional gain");
    yaw_cmd->add_option("--width", yaw_cfg.width, "image width (pixels)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen(gen_seed, gen_pairs, gen_sequence_mode, gen_frames, gen_out, gen_scene,
                           gen_jobs);
        if (match->parsed()) return cmd_match(match_pair, match_out, match_flags, match_agg, match_head);
        if (vote->parsed()) return cmd_vote(vote_pair, vote_kps, vote_out);
        if (train->parsed()) {
            train_cfg.scene = train_scene.resolve();
            train_cfg.matcher = train_matcher.resolve();
            train_cfg.dustbin.alpha = train_matcher.alpha;
            return cmd_train(train_out, train_cfg);
        }
        if (eval->parsed())
            return cmd_eval(eval_pairs, eval_pred, eval_out, eval_pr, eval_prefiltered, eval_jobs);
        if (map->parsed()) return cmd_map(map_frames, map_out, map_matcher, map_fusion);
        if (yaw_cmd->parsed()) return cmd_yaw(yaw_segments, yaw_cfg);
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace segot::cli
