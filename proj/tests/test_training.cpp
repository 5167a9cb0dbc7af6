#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "segot/training.hpp"
#include "test_util.hpp"

using namespace segot;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1, double hi = 1) {
    Mat m(r, c);
    for (auto& v : m.data()) v = rng.uniform(lo, hi);
    return m;
}

/// Random partial ground truth over an (m+1) x (n+1) augmented problem.
GtAssignment random_gt(Rng& rng, int m, int n) {
    GtAssignment gt;
    std::vector<int> src(m), tgt(n);
    for (int i = 0; i < m; ++i) src[i] = i;
    for (int j = 0; j < n; ++j) tgt[j] = j;
    rng.shuffle(src);
    rng.shuffle(tgt);
    int k = int(rng.uniform_index(std::min(m, n) + 1));
    for (int i = 0; i < k; ++i) gt.matches.emplace_back(src[i], tgt[i]);
    int extra_a = int(rng.uniform_index(m - k + 1));
    for (int i = 0; i < extra_a; ++i) gt.unmatched_a.push_back(src[k + i]);
    int extra_b = int(rng.uniform_index(n - k + 1));
    for (int j = 0; j < extra_b; ++j) gt.unmatched_b.push_back(tgt[k + j]);
    return gt;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

double loss_of(const Mat& s_tilde, const GtAssignment& gt, double tau, int T) {
    TransportPlan p = sinkhorn_log(s_tilde, tau, T);
    return assignment_loss(p, gt);
}

}  // namespace

TEST_CASE("assignment_loss is zero when the plan is exactly one on gt entries") {
    TransportPlan plan;
    plan.m1 = 2;
    plan.m2 = 2;
    plan.p = Mat(3, 3);
    plan.p(0, 0) = 1.0;
    plan.p(1, 2) = 1.0;  // source 1 unmatched
    GtAssignment gt;
    gt.matches = {{0, 0}};
    gt.unmatched_a = {1};
    CHECK(assignment_loss(plan, gt) == doctest::Approx(0.0));
}

TEST_CASE("a single match with probability 1/e costs exactly one") {
    TransportPlan plan;
    plan.m1 = 1;
    plan.m2 = 1;
    plan.p = Mat(2, 2);
    plan.p(0, 0) = std::exp(-1.0);
    GtAssignment gt;
    gt.matches = {{0, 0}};
    CHECK(assignment_loss(plan, gt) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("assignment_loss equals a hand-summed reference on random plans") {
    Rng rng(100);
    TransportPlan plan;
    plan.m1 = 4;
    plan.m2 = 5;
    plan.p = random_mat(rng, 5, 6, 0.01, 1.0);
    GtAssignment gt = random_gt(rng, 4, 5);
    double ref = 0;
    for (auto [i, j] : gt.matches) ref -= std::log(plan.p(i, j));
    for (int i : gt.unmatched_a) ref -= std::log(plan.p(i, 5));
    for (int j : gt.unmatched_b) ref -= std::log(plan.p(4, j));
    CHECK(assignment_loss(plan, gt) == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("assignment_loss validates gt indices and is nonnegative") {
    TransportPlan plan;
    plan.m1 = 2;
    plan.m2 = 2;
    plan.p = Mat(3, 3, 0.5);
    GtAssignment bad;
    bad.matches = {{0, 2}};  // 2 == dustbin column, not a segment
    CHECK_THROWS_AS(assignment_loss(plan, bad), ValidationError);

    Rng rng(7);
    for (int t = 0; t < 10; ++t) {
        TransportPlan p2;
        p2.m1 = 3;
        p2.m2 = 3;
        p2.p = random_mat(rng, 4, 4, 0.0, 1.0);
        GtAssignment gt = random_gt(rng, 3, 3);
        CHECK(assignment_loss(p2, gt) >= 0.0);
    }
}

TEST_CASE("loss_backward with empty gt returns zero loss and zero gradients") {
    Rng rng(3);
    Mat st = random_mat(rng, 3, 4);
    GtAssignment gt;  // empty
    LossGradients lg = loss_backward(st, gt, 0.5, 10);
    CHECK(lg.loss == 0.0);
    CHECK(lg.d_alpha == 0.0);
    for (double v : lg.d_s_tilde.data()) CHECK(v == 0.0);
}

TEST_CASE("loss_backward matches central finite differences") {
    Rng rng(11);
    Mat st = random_mat(rng, 3, 4);  // 2x3 real block + dustbin
    GtAssignment gt;
    gt.matches = {{0, 1}};
    gt.unmatched_a = {1};
    gt.unmatched_b = {0, 2};
    double tau = 0.5;
    int T = 10;
    LossGradients lg = loss_backward(st, gt, tau, T);
    CHECK(lg.loss == doctest::Approx(loss_of(st, gt, tau, T)).epsilon(1e-12));
    double eps = 1e-5;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            Mat p = st, m = st;
            p(i, j) += eps;
            m(i, j) -= eps;
            double fd = (loss_of(p, gt, tau, T) - loss_of(m, gt, tau, T)) / (2 * eps);
            CHECK(rel_err(fd, lg.d_s_tilde(i, j)) < 1e-4);
        }
    // Alpha: every border entry moves together.
    Mat p = st, m = st;
    for (int j = 0; j < 4; ++j) {
        p(2, j) += eps;
        m(2, j) -= eps;
    }
    for (int i = 0; i < 2; ++i) {
        p(i, 3) += eps;
        m(i, 3) -= eps;
    }
    double fd_alpha = (loss_of(p, gt, tau, T) - loss_of(m, gt, tau, T)) / (2 * eps);
    CHECK(rel_err(fd_alpha, lg.d_alpha) < 1e-4);
}

TEST_CASE("gradients survive sharp temperatures and deep unrolls") {
    Rng rng(19);
    for (double tau : {0.05, 0.1, 1.0}) {
        for (int T : {5, 50}) {
            Mat st = random_mat(rng, 5, 6);
            GtAssignment gt = random_gt(rng, 4, 5);
            if (gt.matches.empty() && gt.unmatched_a.empty() && gt.unmatched_b.empty())
                gt.matches = {{0, 0}};
            LossGradients lg = loss_backward(st, gt, tau, T);
            double eps = 1e-4;
            double worst = 0;
            for (int i = 0; i < 5; ++i)
                for (int j = 0; j < 6; ++j) {
                    Mat p = st, m = st;
                    p(i, j) += eps;
                    m(i, j) -= eps;
                    double fd = (loss_of(p, gt, tau, T) - loss_of(m, gt, tau, T)) / (2 * eps);
                    worst = std::max(worst, rel_err(fd, lg.d_s_tilde(i, j)));
                }
            CHECK(worst < 1e-3);
        }
    }
}

TEST_CASE("shifting every logit by a constant changes neither loss nor gradient") {
    Rng rng(23);
    Mat st = random_mat(rng, 4, 5);
    GtAssignment gt = random_gt(rng, 3, 4);
    if (gt.matches.empty()) gt.matches = {{0, 0}};
    LossGradients a = loss_backward(st, gt, 0.3, 20);
    Mat shifted = st;
    for (auto& v : shifted.data()) v += 4.2;
    LossGradients b = loss_backward(shifted, gt, 0.3, 20);
    CHECK(std::abs(a.loss - b.loss) < 1e-9);
    for (std::size_t i = 0; i < a.d_s_tilde.data().size(); ++i)
        CHECK(std::abs(a.d_s_tilde.data()[i] - b.d_s_tilde.data()[i]) < 1e-9);
}

// ---------------------------------------------------------------------------
// Head-path gradients.
// ---------------------------------------------------------------------------

namespace {

PairSample tiny_sample(Rng& rng, int hp, int wp, int s, int dim_in, int n_masks) {
    PairSample sample;
    sample.patches_a = PatchGrid(hp, wp, dim_in);
    sample.patches_b = PatchGrid(hp, wp, dim_in);
    for (auto& v : sample.patches_a.v) v = rng.uniform(-1, 1);
    for (auto& v : sample.patches_b.v) v = rng.uniform(-1, 1);
    int h = hp * s, w = wp * s;
    sample.masks_a = MaskSet(n_masks, h, w);
    sample.masks_b = MaskSet(n_masks, h, w);
    // Deterministic stripes so every mask has pixels.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            sample.masks_a.set((y * w + x) % n_masks, y, x, 1);
            sample.masks_b.set((y * w + x + 1) % n_masks, y, x, 1);
        }
    for (int i = 0; i < n_masks; ++i) sample.gt.matches.emplace_back(i, (i + 1) % n_masks);
    return sample;
}

double head_loss(const PairSample& sample, const HeadParams& params, const MatcherConfig& cfg,
                 double alpha) {
    return head_backward(sample, params, cfg, DustbinParam{alpha}).loss;
}

}  // namespace

TEST_CASE("zero head parameters leave only the dustbin gradient") {
    Rng rng(31);
    PairSample sample = tiny_sample(rng, 2, 2, 2, 3, 2);
    HeadParams params = HeadParams::init(3, 4, 2, 2, 1);
    for (auto& v : params.w1.data()) v = 0;
    for (auto& v : params.w2.data()) v = 0;
    MatcherConfig cfg;
    cfg.iterations = 10;
    HeadGradients g = head_backward(sample, params, cfg, DustbinParam{0.5});
    for (double v : g.w1.data()) CHECK(v == 0.0);
    for (double v : g.w2.data()) CHECK(v == 0.0);
    for (double v : g.b1) CHECK(v == 0.0);
    for (double v : g.b2) CHECK(v == 0.0);
    CHECK(g.loss > 0.0);
}

TEST_CASE("single-pixel image gradient matches finite differences") {
    Rng rng(37);
    PairSample sample;
    sample.patches_a = PatchGrid(1, 1, 2);
    sample.patches_b = PatchGrid(1, 1, 2);
    sample.patches_a.at(0, 0, 0) = 0.4;
    sample.patches_a.at(0, 0, 1) = -0.7;
    sample.patches_b.at(0, 0, 0) = 0.3;
    sample.patches_b.at(0, 0, 1) = 0.9;
    sample.masks_a = MaskSet(1, 1, 1);
    sample.masks_a.set(0, 0, 0, 1);
    sample.masks_b = sample.masks_a;
    sample.gt.matches = {{0, 0}};
    HeadParams params = HeadParams::init(2, 3, 1, 2, 5);
    MatcherConfig cfg;
    cfg.iterations = 5;
    HeadGradients g = head_backward(sample, params, cfg, DustbinParam{0.2});
    std::vector<double> flat = params.flatten();
    double eps = 1e-5;
    for (std::size_t k = 0; k < flat.size(); ++k) {
        HeadParams pp = params, pm = params;
        std::vector<double> fp = flat, fm = flat;
        fp[k] += eps;
        fm[k] -= eps;
        pp.unflatten(fp);
        pm.unflatten(fm);
        double fd = (head_loss(sample, pp, cfg, 0.2) - head_loss(sample, pm, cfg, 0.2)) / (2 * eps);
        std::vector<double> ga = g.flatten_with_alpha();
        CHECK(rel_err(fd, ga[k]) < 1e-4);
    }
}

TEST_CASE("full-chain head gradient matches finite differences on a small pair") {
    Rng rng(41);
    PairSample sample = tiny_sample(rng, 2, 3, 2, 3, 3);
    HeadParams params = HeadParams::init(3, 5, 2, 4, 9);
    MatcherConfig cfg;
    cfg.iterations = 8;
    cfg.temperature = 0.5;
    double alpha = 0.3;
    HeadGradients g = head_backward(sample, params, cfg, DustbinParam{alpha});
    std::vector<double> analytic = g.flatten_with_alpha();
    std::vector<double> flat = params.flatten();
    double eps = 1e-3;
    double worst = 0;
    for (std::size_t k = 0; k < flat.size(); k += 7) {  // sample every 7th parameter
        HeadParams pp = params, pm = params;
        std::vector<double> fp = flat, fm = flat;
        fp[k] += eps;
        fm[k] -= eps;
        pp.unflatten(fp);
        pm.unflatten(fm);
        double fd =
            (head_loss(sample, pp, cfg, alpha) - head_loss(sample, pm, cfg, alpha)) / (2 * eps);
        worst = std::max(worst, rel_err(fd, analytic[k]));
    }
    // Alpha via its own perturbation.
    double fd_alpha =
        (head_loss(sample, params, cfg, alpha + eps) - head_loss(sample, params, cfg, alpha - eps)) /
        (2 * eps);
    worst = std::max(worst, rel_err(fd_alpha, g.d_alpha));
    CHECK(worst < 1e-3);
}

TEST_CASE("two identical pairs in a batch double the gradient") {
    Rng rng(43);
    PairSample sample = tiny_sample(rng, 2, 2, 2, 3, 2);
    HeadParams params = HeadParams::init(3, 4, 2, 2, 2);
    MatcherConfig cfg;
    cfg.iterations = 6;
    HeadGradients single = head_backward(sample, params, cfg, DustbinParam{0.1});
    HeadGradients batch = HeadGradients::zeros(params);
    batch.add_scaled(single, 1.0);
    batch.add_scaled(single, 1.0);
    std::vector<double> a = single.flatten_with_alpha(), b = batch.flatten_with_alpha();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2 * a[i]).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Optimizer and schedule.
// ---------------------------------------------------------------------------

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 1000) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(cosine_lr(1000, 1000) == doctest::Approx(1e-6).epsilon(1e-12));
    CHECK(cosine_lr(500, 1000) == doctest::Approx((1e-4 + 1e-6) / 2).epsilon(1e-12));
    CHECK(cosine_lr(2000, 1000) == doctest::Approx(1e-6));
    CHECK_THROWS_AS(cosine_lr(-1, 10), ValidationError);
}

TEST_CASE("adamw with zero gradient and zero decay is a fixed point") {
    std::vector<double> params{1.5, -2.0};
    OptimHyper h;
    h.weight_decay = 0.0;
    OptimState st = OptimState::init(2, 100, h);
    adamw_step(params, {0.0, 0.0}, st);
    CHECK(params[0] == 1.5);
    CHECK(params[1] == -2.0);
}

TEST_CASE("first adamw step moves by about the learning rate") {
    std::vector<double> params{0.0};
    OptimHyper h;
    h.weight_decay = 0.0;
    OptimState st = OptimState::init(1, 1000000, h);  // lr ~ lr0 at step 0
    adamw_step(params, {1.0}, st);
    CHECK(params[0] == doctest::Approx(-1e-4).epsilon(1e-4));
}

TEST_CASE("adamw minimizes a scalar quadratic with a monotone tail") {
    std::vector<double> params{3.0};
    OptimHyper h;
    h.lr0 = 0.05;
    h.lr_min = 1e-4;
    h.weight_decay = 0.0;
    OptimState st = OptimState::init(1, 100, h);
    std::vector<double> losses;
    for (int step = 0; step < 100; ++step) {
        losses.push_back(0.5 * params[0] * params[0]);
        adamw_step(params, {params[0]}, st);
    }
    for (int step = 6; step < 100; ++step) CHECK(losses[step] < losses[step - 1]);
}

TEST_CASE("weight decay shrinks parameters independent of the gradient") {
    std::vector<double> params{1.0};
    OptimHyper h;
    h.weight_decay = 0.1;
    h.lr0 = 0.01;
    OptimState st = OptimState::init(1, 10, h);
    adamw_step(params, {0.0}, st);
    CHECK(params[0] == doctest::Approx(1.0 - 0.01 * 0.1).epsilon(1e-9));
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

namespace {

TrainConfig tiny_train_config(int steps) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg.seed = 7;
    cfg.scene.height = cfg.scene.width = 16;
    cfg.scene.min_segments = 3;
    cfg.scene.max_segments = 5;
    cfg.scene.latent_dim = 8;
    cfg.scene.noise_sigma = 0.3;
    cfg.scene.drop_fraction = 0.2;
    cfg.scene.latent_clusters = 2;
    cfg.hidden = 12;
    cfg.dim_out = 6;
    cfg.matcher.iterations = 10;
    return cfg;
}

}  // namespace

TEST_CASE("zero training steps return the initialization unchanged") {
    TrainConfig cfg = tiny_train_config(0);
    TrainResult res = train_head(cfg);
    HeadParams init = HeadParams::init(cfg.scene.latent_dim, cfg.hidden, cfg.scene.patch_size,
                                       cfg.dim_out, cfg.seed);
    CHECK(res.params.flatten() == init.flatten());
    CHECK(res.trace.empty());
}

TEST_CASE("training is deterministic for a fixed seed") {
    TrainConfig cfg = tiny_train_config(4);
    TrainResult a = train_head(cfg);
    TrainResult b = train_head(cfg);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        CHECK(a.trace[i].loss == b.trace[i].loss);
        CHECK(a.trace[i].lr == b.trace[i].lr);
    }
    CHECK(a.params.flatten() == b.params.flatten());
    CHECK(a.alpha == b.alpha);
}

TEST_CASE("trace serializes as step,lr,loss csv") {
    std::vector<TraceRow> trace{{0, 1e-4, 2.0}, {1, 9e-5, 1.5}};
    std::string csv = trace_csv(trace);
    CHECK(csv.rfind("step,lr,loss\n", 0) == 0);
    CHECK(csv.find("0,0.0001,2\n") != std::string::npos);
}

TEST_CASE("checkpoints round trip through the on-disk format") {
    TrainConfig cfg = tiny_train_config(2);
    TrainResult res = train_head(cfg);
    std::string dir = test::make_temp_dir("ckpt");
    save_head_checkpoint(dir, res.params, res.alpha, cfg.seed, cfg.steps);
    HeadCheckpoint ck = load_head_checkpoint(dir);
    CHECK(ck.params.dim_in == res.params.dim_in);
    CHECK(ck.params.patch_size == res.params.patch_size);
    CHECK(ck.steps == 2);
    // f32 storage: equal within float precision.
    std::vector<double> a = res.params.flatten(), b = ck.params.flatten();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-6);
    CHECK(std::abs(ck.alpha - res.alpha) < 1e-12);
}
