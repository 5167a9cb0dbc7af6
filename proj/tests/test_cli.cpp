#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "segot/cli_app.hpp"
#include "test_util.hpp"

using namespace segot;
namespace fs = std::filesystem;

namespace {

int run(std::initializer_list<std::string> args) {
    return cli::run(std::vector<std::string>(args));
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is);
    nlohmann::json j;
    is >> j;
    return j;
}

}  // namespace

TEST_CASE("unknown subcommands exit with code 1") {
    CHECK(run({"frobnicate"}) == 1);
    CHECK(run({}) == 1);
}

TEST_CASE("gen produces the requested number of deterministic manifests") {
    std::string da = test::make_temp_dir("cli_gen_a");
    std::string db = test::make_temp_dir("cli_gen_b");
    CHECK(run({"gen", "--seed", "42", "--pairs", "3", "--out", da, "--height", "16", "--width",
               "16", "--min-segments", "3", "--max-segments", "5"}) == 0);
    CHECK(run({"gen", "--seed", "42", "--pairs", "3", "--out", db, "--height", "16", "--width",
               "16", "--min-segments", "3", "--max-segments", "5"}) == 0);
    for (int k = 0; k < 3; ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%04d.json", k);
        REQUIRE(fs::exists(fs::path(da) / stem));
        std::ifstream a(fs::path(da) / stem), b(fs::path(db) / stem);
        std::string sa((std::istreambuf_iterator<char>(a)), {});
        std::string sb((std::istreambuf_iterator<char>(b)), {});
        CHECK(sa == sb);
    }
}

TEST_CASE("parallel generation produces the same files as sequential") {
    std::string seq = test::make_temp_dir("cli_seq");
    std::string par = test::make_temp_dir("cli_par");
    for (auto [dir, jobs] : std::vector<std::pair<std::string, const char*>>{{seq, "1"}, {par, "3"}})
        REQUIRE(run({"gen", "--seed", "11", "--pairs", "6", "--out", dir, "--height", "16",
                     "--width", "16", "--min-segments", "3", "--max-segments", "5", "--jobs",
                     jobs}) == 0);
    for (int k = 0; k < 6; ++k) {
        char stem[40];
        std::snprintf(stem, sizeof stem, "pair_%04d.features_a.sgt", k);
        std::ifstream a(fs::path(seq) / stem, std::ios::binary);
        std::ifstream b(fs::path(par) / stem, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), {});
        std::string sb((std::istreambuf_iterator<char>(b)), {});
        CHECK(sa == sb);
    }
}

TEST_CASE("gen then match then eval round trip") {
    std::string pairs = test::make_temp_dir("cli_pairs");
    std::string preds = test::make_temp_dir("cli_preds");
    std::string report = test::make_temp_dir("cli_report") + "/report.json";
    REQUIRE(run({"gen", "--seed", "7", "--pairs", "4", "--out", pairs, "--height", "16", "--width",
                 "16", "--min-segments", "3", "--max-segments", "5", "--sigma", "0.05",
                 "--max-angle", "120"}) == 0);
    for (int k = 0; k < 4; ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%04d", k);
        std::string pair = (fs::path(pairs) / (std::string(stem) + ".json")).string();
        std::string out = (fs::path(preds) / (std::string(stem) + ".json")).string();
        REQUIRE(run({"match", "--pair", pair, "--tau", "0.1", "--iters", "50", "--alpha", "-5",
                     "--out", out}) == 0);
        nlohmann::json m = read_json(out);
        CHECK(m.contains("assignment"));
        CHECK(m.contains("plan_checksum"));
    }
    CHECK(run({"eval", "--pairs", pairs, "--pred", preds, "--out", report}) == 0);
    nlohmann::json rep = read_json(report);
    // Near-noiseless pairs with a suppressed dustbin should match perfectly.
    CHECK(rep.at("overall").at("auprc").get<double>() == doctest::Approx(1.0));
    CHECK(rep.at("overall").at("r1").get<double>() == doctest::Approx(1.0));
}

TEST_CASE("match exit codes distinguish validation from io failures") {
    CHECK(run({"match", "--pair", "/nonexistent/pair.json", "--out", "/tmp/x.json"}) == 2);
    std::string dir = test::make_temp_dir("cli_badpair");
    std::string bad = dir + "/bad.json";
    {
        std::ofstream os(bad);
        os << "{ not json";
    }
    CHECK(run({"match", "--pair", bad, "--out", dir + "/out.json"}) == 1);
}

TEST_CASE("invalid inputs never leave partial output files") {
    std::string pairs = test::make_temp_dir("cli_atomic");
    REQUIRE(run({"gen", "--seed", "3", "--pairs", "1", "--out", pairs, "--height", "16", "--width",
                 "16", "--min-segments", "3", "--max-segments", "4"}) == 0);
    // Corrupt the manifest so loading fails mid-way (missing tensor file).
    nlohmann::json j = read_json((fs::path(pairs) / "pair_0000.json").string());
    j["features_b"] = "missing.sgt";
    {
        std::ofstream os((fs::path(pairs) / "pair_0000.json").string());
        os << j.dump();
    }
    std::string out = pairs + "/match.json";
    CHECK(run({"match", "--pair", (fs::path(pairs) / "pair_0000.json").string(), "--out", out}) == 2);
    CHECK_FALSE(fs::exists(out));
    CHECK_FALSE(fs::exists(out + ".tmp"));
}

TEST_CASE("vote subcommand runs the keypoint baseline") {
    std::string pairs = test::make_temp_dir("cli_vote");
    REQUIRE(run({"gen", "--seed", "5", "--pairs", "1", "--out", pairs, "--height", "16", "--width",
                 "16", "--min-segments", "3", "--max-segments", "3"}) == 0);
    std::string kps = pairs + "/kps.json";
    {
        std::ofstream os(kps);
        os << "[[[0,0],[0,0]],[[5,5],[5,5]],[[10,10],[10,10]]]";
    }
    std::string out = pairs + "/votes.json";
    CHECK(run({"vote", "--pair", (fs::path(pairs) / "pair_0000.json").string(), "--keypoints", kps,
               "--out", out}) == 0);
    nlohmann::json v = read_json(out);
    CHECK(v.at("assignment").size() == 3);
    CHECK(v.at("votes").size() == 3);
}

TEST_CASE("train writes a loadable checkpoint and a loss trace") {
    std::string out = test::make_temp_dir("cli_train");
    CHECK(run({"train", "--out", out, "--steps", "3", "--batch", "2", "--seed", "9", "--height",
               "16", "--width", "16", "--min-segments", "3", "--max-segments", "4", "--latent-dim",
               "8", "--hidden", "8", "--dim-out", "4", "--iters", "10"}) == 0);
    HeadCheckpoint ck = load_head_checkpoint(out);
    CHECK(ck.params.dim_in == 8);
    CHECK(ck.steps == 3);
    std::ifstream trace(out + "/trace.csv");
    std::string header;
    std::getline(trace, header);
    CHECK(header == "step,lr,loss");
    int rows = 0;
    for (std::string line; std::getline(trace, line);) rows += !line.empty();
    CHECK(rows == 3);
}

TEST_CASE("match can run a trained head checkpoint over a stored pair") {
    std::string dir = test::make_temp_dir("cli_headmatch");
    REQUIRE(run({"train", "--out", dir + "/ckpt", "--steps", "2", "--batch", "1", "--seed", "4",
                 "--height", "16", "--width", "16", "--min-segments", "3", "--max-segments", "4",
                 "--latent-dim", "8", "--hidden", "8", "--dim-out", "4", "--iters", "8"}) == 0);
    REQUIRE(run({"gen", "--seed", "6", "--pairs", "1", "--out", dir + "/pairs", "--height", "16",
                 "--width", "16", "--min-segments", "3", "--max-segments", "4", "--latent-dim",
                 "8"}) == 0);
    CHECK(run({"match", "--pair", dir + "/pairs/pair_0000.json", "--head", dir + "/ckpt", "--out",
               dir + "/m.json"}) == 0);
    CHECK(fs::exists(dir + "/m.json"));
}

TEST_CASE("map subcommand builds an instance map with AP against generator gt") {
    std::string dir = test::make_temp_dir("cli_map");
    REQUIRE(run({"gen", "--sequence", "--frames", "2", "--seed", "7", "--out", dir, "--height",
                 "48", "--width", "48", "--min-segments", "4", "--max-segments", "5",
                 "--latent-dim", "16", "--sigma", "0.05"}) == 0);
    CHECK(run({"map", "--frames", dir + "/seq.json", "--out", dir + "/map", "--alpha", "-5",
               "--iou-voxel", "0.2"}) == 0);
    nlohmann::json summary = read_json(dir + "/map/map.json");
    CHECK(summary.at("objects").get<int>() >= 1);
    CHECK(summary.contains("ap50"));
    int n = summary.at("objects").get<int>();
    for (int k = 0; k < n; ++k) {
        CHECK(fs::exists(dir + "/map/object_" + std::to_string(k) + ".points.sgt"));
        nlohmann::json obj = read_json(dir + "/map/object_" + std::to_string(k) + ".json");
        CHECK(obj.at("n").get<int>() >= 1);
    }
}

TEST_CASE("yaw subcommand prints the steering command") {
    std::string dir = test::make_temp_dir("cli_yaw");
    std::string segs = dir + "/segments.json";
    {
        std::ofstream os(segs);
        os << R"([{"x": 75.0, "p": 1.0}])";
    }
    CHECK(run({"yaw", "--segments", segs, "--width", "100"}) == 0);
    // Validation failure: x outside the image.
    std::string bad = dir + "/bad.json";
    {
        std::ofstream os(bad);
        os << R"([{"x": 150.0, "p": 1.0}])";
    }
    CHECK(run({"yaw", "--segments", bad, "--width", "100"}) == 1);
    CHECK(run({"yaw", "--segments", dir + "/none.json", "--width", "100"}) == 2);
}
