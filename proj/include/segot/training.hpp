// Assignment loss, exact reverse-mode gradients through the unrolled
// log-domain Sinkhorn, AdamW with cosine annealing, and the desk-scale
// training loop for the segment-feature head.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "segot/common.hpp"
#include "segot/evaluation.hpp"
#include "segot/manifest.hpp"
#include "segot/ot_matcher.hpp"
#include "segot/segment_features.hpp"
#include "segot/synth_scene.hpp"
#include "segot/tensor.hpp"

namespace segot {

constexpr double kLossClamp = 1e-30;

/// L = -sum log P_ij over matches - sum log P_{i,dustbin} over unmatched_a
///   - sum log P_{dustbin,j} over unmatched_b, entries clamped at 1e-30.
inline double assignment_loss(const TransportPlan& plan, const GtAssignment& gt) {
    gt.validate(plan.m1, plan.m2);
    double loss = 0;
    auto term = [&](double p) { loss -= std::log(std::max(p, kLossClamp)); };
    for (auto [i, j] : gt.matches) term(plan.p(i, j));
    for (int i : gt.unmatched_a) term(plan.p(i, plan.dustbin_col()));
    for (int j : gt.unmatched_b) term(plan.p(plan.dustbin_row(), j));
    return loss;
}

struct LossGradients {
    double loss = 0;
    Mat d_s_tilde;
    double d_alpha = 0;
};

/// Exact reverse-mode differentiation of assignment_loss through the T
/// unrolled row/column normalizations. d_alpha sums d_s_tilde over the
/// dustbin border (last row and column), which share the single logit.
inline LossGradients loss_backward(const Mat& s_tilde, const GtAssignment& gt, double tau,
                                   int iterations) {
    int m = s_tilde.rows(), n = s_tilde.cols();
    gt.validate(m - 1, n - 1);
    auto tr = detail::sinkhorn_log_halfsteps(s_tilde, tau, 2 * iterations,
                                             detail::FirstAxis::row, /*keep_history=*/true);
    const Mat& L = tr.scaled;
    const double log_clamp = std::log(kLossClamp);

    LossGradients out;
    out.d_s_tilde = Mat(m, n);
    Mat g_l(m, n);
    std::vector<double> ubar(m, 0.0), vbar(n, 0.0);

    const auto& u_final = tr.us.back();
    const auto& v_final = tr.vs.back();
    auto select = [&](int i, int j) {
        double lp = L(i, j) + u_final[i] + v_final[j];
        out.loss -= std::max(lp, log_clamp);
        if (lp > log_clamp) {  // clamp region has zero gradient
            g_l(i, j) -= 1.0;
            ubar[i] -= 1.0;
            vbar[j] -= 1.0;
        }
    };
    for (auto [i, j] : gt.matches) select(i, j);
    for (int i : gt.unmatched_a) select(i, n - 1);
    for (int j : gt.unmatched_b) select(m - 1, j);

    // Walk the iterations backwards; softmax weights are recomputed from the
    // stored u/v histories rather than stored as full matrices.
    std::vector<double> buf(std::max(m, n));
    for (int t = iterations - 1; t >= 0; --t) {
        const auto& u_t = tr.us[t];        // u after iteration t+1's row step
        const auto& v_prev = tr.vs[t];     // v entering that iteration
        // v_t = -lse_i(L_ij + u_t_i): softmax over rows per column.
        for (int j = 0; j < n; ++j) {
            if (vbar[j] == 0.0) continue;
            double mx = -1e300;
            for (int i = 0; i < m; ++i) {
                buf[i] = L(i, j) + u_t[i];
                mx = std::max(mx, buf[i]);
            }
            double z = 0;
            for (int i = 0; i < m; ++i) {
                buf[i] = std::exp(buf[i] - mx);
                z += buf[i];
            }
            for (int i = 0; i < m; ++i) {
                double w = buf[i] / z;
                g_l(i, j) -= vbar[j] * w;
                ubar[i] -= vbar[j] * w;
            }
        }
        // u_t = -lse_j(L_ij + v_prev_j): softmax over columns per row.
        std::vector<double> vbar_next(n, 0.0);
        for (int i = 0; i < m; ++i) {
            if (ubar[i] == 0.0) continue;
            const double* Li = L.row_ptr(i);
            double mx = -1e300;
            for (int j = 0; j < n; ++j) {
                buf[j] = Li[j] + v_prev[j];
                mx = std::max(mx, buf[j]);
            }
            double z = 0;
            for (int j = 0; j < n; ++j) {
                buf[j] = std::exp(buf[j] - mx);
                z += buf[j];
            }
            for (int j = 0; j < n; ++j) {
                double w = buf[j] / z;
                g_l(i, j) -= ubar[i] * w;
                vbar_next[j] -= ubar[i] * w;
            }
        }
        std::fill(ubar.begin(), ubar.end(), 0.0);
        vbar.swap(vbar_next);
    }

    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.d_s_tilde(i, j) = g_l(i, j) / tau;
    for (int j = 0; j < n; ++j) out.d_alpha += out.d_s_tilde(m - 1, j);
    for (int i = 0; i < m - 1; ++i) out.d_alpha += out.d_s_tilde(i, n - 1);
    if (!out.d_s_tilde.all_finite() || !std::isfinite(out.loss))
        throw NumericError("loss_backward: non-finite result");
    return out;
}

// ---------------------------------------------------------------------------
// Backward through the full head path (aggregation, normalization, affinity).
// ---------------------------------------------------------------------------

struct PairSample {
    PatchGrid patches_a, patches_b;
    MaskSet masks_a, masks_b;
    GtAssignment gt;
};

struct HeadGradients {
    Mat w1;
    std::vector<double> b1;
    Mat w2;
    std::vector<double> b2;
    double d_alpha = 0;
    double loss = 0;

    static HeadGradients zeros(const HeadParams& p) {
        HeadGradients g;
        g.w1 = Mat(p.w1.rows(), p.w1.cols());
        g.b1.assign(p.b1.size(), 0.0);
        g.w2 = Mat(p.w2.rows(), p.w2.cols());
        g.b2.assign(p.b2.size(), 0.0);
        return g;
    }

    void add_scaled(const HeadGradients& other, double scale) {
        for (std::size_t i = 0; i < w1.data().size(); ++i) w1.data()[i] += scale * other.w1.data()[i];
        for (std::size_t i = 0; i < b1.size(); ++i) b1[i] += scale * other.b1[i];
        for (std::size_t i = 0; i < w2.data().size(); ++i) w2.data()[i] += scale * other.w2.data()[i];
        for (std::size_t i = 0; i < b2.size(); ++i) b2[i] += scale * other.b2[i];
        d_alpha += scale * other.d_alpha;
        loss += scale * other.loss;
    }

    std::vector<double> flatten_with_alpha() const {
        std::vector<double> out;
        out.reserve(w1.data().size() + b1.size() + w2.data().size() + b2.size() + 1);
        out.insert(out.end(), w1.data().begin(), w1.data().end());
        out.insert(out.end(), b1.begin(), b1.end());
        out.insert(out.end(), w2.data().begin(), w2.data().end());
        out.insert(out.end(), b2.begin(), b2.end());
        out.push_back(d_alpha);
        return out;
    }
};

namespace detail {

struct HeadForwardCache {
    std::vector<double> pre;  // patches x hidden
    std::vector<double> act;  // patches x hidden
    FeatureMap features;
    SegmentDescriptors descs;       // raw (unnormalized) sums
    std::vector<double> row_norms;  // per compacted row
    Mat unit_rows;                  // compacted + normalized rows
    std::vector<int> index;         // compacted row -> slot
};

inline HeadForwardCache head_forward_cached(const PatchGrid& patches, const HeadParams& p,
                                            const MaskSet& masks, bool normalize) {
    p.validate_against(patches);
    HeadForwardCache cache;
    int np = patches.height_p * patches.width_p;
    cache.pre.resize(std::size_t(np) * p.hidden);
    cache.act.resize(std::size_t(np) * p.hidden);
    int s = p.patch_size;
    cache.features = FeatureMap(patches.height_p * s, patches.width_p * s, p.dim_out);
    std::vector<double> o(p.out_per_patch());
    for (int pi = 0; pi < np; ++pi) {
        int py = pi / patches.width_p, px = pi % patches.width_p;
        head_mlp_forward(p, patches.patch(py, px), o.data(),
                         cache.pre.data() + std::size_t(pi) * p.hidden,
                         cache.act.data() + std::size_t(pi) * p.hidden);
        for (int sy = 0; sy < s; ++sy)
            for (int sx = 0; sx < s; ++sx) {
                double* dst = cache.features.pixel(py * s + sy, px * s + sx);
                const double* src = o.data() + (sy * s + sx) * p.dim_out;
                for (int c = 0; c < p.dim_out; ++c) dst[c] = src[c];
            }
    }
    cache.descs = aggregate_sum(cache.features, masks);
    cache.unit_rows = compact_rows(cache.descs, cache.index);
    cache.row_norms.assign(cache.index.size(), 0.0);
    for (int r = 0; r < cache.unit_rows.rows(); ++r) {
        double* row = cache.unit_rows.row_ptr(r);
        double n2 = 0;
        for (int c = 0; c < cache.unit_rows.cols(); ++c) n2 += row[c] * row[c];
        cache.row_norms[r] = std::sqrt(n2);
        if (normalize) {
            if (cache.row_norms[r] < 1e-12) {
                for (int c = 0; c < cache.unit_rows.cols(); ++c) row[c] = 0.0;
            } else {
                for (int c = 0; c < cache.unit_rows.cols(); ++c) row[c] /= cache.row_norms[r];
            }
        }
    }
    return cache;
}

/// Pixel-feature gradients -> head parameter gradients for one image.
inline void head_backward_image(const PatchGrid& patches, const HeadParams& p,
                                const HeadForwardCache& cache, const Mat& d_features,
                                HeadGradients& grads) {
    int s = p.patch_size;
    int no = p.out_per_patch();
    std::vector<double> d_out(no), d_h(p.hidden);
    for (int py = 0; py < patches.height_p; ++py)
        for (int px = 0; px < patches.width_p; ++px) {
            int pi = py * patches.width_p + px;
            bool any = false;
            for (int sy = 0; sy < s; ++sy)
                for (int sx = 0; sx < s; ++sx) {
                    const double* df =
                        d_features.row_ptr((py * s + sy) * patches.width_p * s + (px * s + sx));
                    double* dst = d_out.data() + (sy * s + sx) * p.dim_out;
                    for (int c = 0; c < p.dim_out; ++c) {
                        dst[c] = df[c];
                        any |= (df[c] != 0.0);
                    }
                }
            if (!any) continue;
            const double* act = cache.act.data() + std::size_t(pi) * p.hidden;
            const double* pre = cache.pre.data() + std::size_t(pi) * p.hidden;
            std::fill(d_h.begin(), d_h.end(), 0.0);
            for (int o = 0; o < no; ++o) {
                double g = d_out[o];
                grads.b2[o] += g;
                if (g == 0.0) continue;
                double* w2r = grads.w2.row_ptr(o);
                const double* w2p = p.w2.row_ptr(o);
                for (int i = 0; i < p.hidden; ++i) {
                    w2r[i] += g * act[i];
                    d_h[i] += g * w2p[i];
                }
            }
            const double* x = patches.patch(py, px);
            for (int i = 0; i < p.hidden; ++i) {
                double dp = d_h[i] * gelu_derivative(pre[i]);
                if (dp == 0.0) continue;
                grads.b1[i] += dp;
                double* w1r = grads.w1.row_ptr(i);
                for (int c = 0; c < p.dim_in; ++c) w1r[c] += dp * x[c];
            }
        }
}

}  // namespace detail

/// Loss and exact gradients for one training pair through the whole chain:
/// head MLP -> pixel shuffle -> mask aggregation -> (optional) row
/// normalization -> affinity -> dustbin -> Sinkhorn -> assignment loss.
inline HeadGradients head_backward(const PairSample& sample, const HeadParams& params,
                                   const MatcherConfig& matcher, const DustbinParam& dustbin) {
    matcher.validate();
    auto ca = detail::head_forward_cached(sample.patches_a, params, sample.masks_a,
                                          matcher.normalize_descriptors);
    auto cb = detail::head_forward_cached(sample.patches_b, params, sample.masks_b,
                                          matcher.normalize_descriptors);

    // Affinity over compacted unit rows.
    int m1 = ca.unit_rows.rows(), m2 = cb.unit_rows.rows();
    int d = params.dim_out;
    Mat s(m1, m2);
    for (int i = 0; i < m1; ++i)
        for (int j = 0; j < m2; ++j) {
            double acc = 0;
            const double* ra = ca.unit_rows.row_ptr(i);
            const double* rb = cb.unit_rows.row_ptr(j);
            for (int c = 0; c < d; ++c) acc += ra[c] * rb[c];
            s(i, j) = acc;
        }
    Mat s_tilde = augment_dustbin(s, dustbin);

    // Remap gt slots to compacted indices.
    std::vector<int> inv_a(sample.masks_a.m, -1), inv_b(sample.masks_b.m, -1);
    for (int r = 0; r < m1; ++r) inv_a[ca.index[r]] = r;
    for (int r = 0; r < m2; ++r) inv_b[cb.index[r]] = r;
    GtAssignment gt;
    auto remap = [](const std::vector<int>& inv, int slot) {
        if (slot < 0 || slot >= int(inv.size()) || inv[slot] < 0)
            throw ValidationError("head_backward: gt references an invalid or empty slot");
        return inv[slot];
    };
    for (auto [i, j] : sample.gt.matches)
        gt.matches.emplace_back(remap(inv_a, i), remap(inv_b, j));
    for (int i : sample.gt.unmatched_a) gt.unmatched_a.push_back(remap(inv_a, i));
    for (int j : sample.gt.unmatched_b) gt.unmatched_b.push_back(remap(inv_b, j));

    LossGradients lg = loss_backward(s_tilde, gt, matcher.temperature, matcher.iterations);

    HeadGradients grads = HeadGradients::zeros(params);
    grads.loss = lg.loss;
    grads.d_alpha = lg.d_alpha;

    // dS (real block) -> descriptor gradients.
    Mat d_unit_a(m1, d), d_unit_b(m2, d);
    for (int i = 0; i < m1; ++i)
        for (int j = 0; j < m2; ++j) {
            double g = lg.d_s_tilde(i, j);
            if (g == 0.0) continue;
            const double* ra = ca.unit_rows.row_ptr(i);
            const double* rb = cb.unit_rows.row_ptr(j);
            for (int c = 0; c < d; ++c) {
                d_unit_a(i, c) += g * rb[c];
                d_unit_b(j, c) += g * ra[c];
            }
        }

    auto to_pixels = [&](const detail::HeadForwardCache& cache, const Mat& d_unit,
                         const MaskSet& masks) {
        int h = cache.features.h, w = cache.features.w;
        Mat d_feat(h * w, d);
        for (int r = 0; r < d_unit.rows(); ++r) {
            // Through the L2 normalization (or identity when disabled).
            std::vector<double> d_raw(d, 0.0);
            const double* du = d_unit.row_ptr(r);
            if (matcher.normalize_descriptors) {
                double nrm = cache.row_norms[r];
                if (nrm < 1e-12) continue;  // zero rows carry no gradient
                const double* unit = cache.unit_rows.row_ptr(r);
                double dot = 0;
                for (int c = 0; c < d; ++c) dot += du[c] * unit[c];
                for (int c = 0; c < d; ++c) d_raw[c] = (du[c] - dot * unit[c]) / nrm;
            } else {
                for (int c = 0; c < d; ++c) d_raw[c] = du[c];
            }
            int slot = cache.index[r];
            const std::uint8_t* mb = masks.bits.data() + std::size_t(slot) * h * w;
            for (int pix = 0; pix < h * w; ++pix) {
                if (!mb[pix]) continue;
                double* row = d_feat.row_ptr(pix);
                for (int c = 0; c < d; ++c) row[c] += d_raw[c];
            }
        }
        return d_feat;
    };

    Mat d_feat_a = to_pixels(ca, d_unit_a, sample.masks_a);
    Mat d_feat_b = to_pixels(cb, d_unit_b, sample.masks_b);
    detail::head_backward_image(sample.patches_a, params, ca, d_feat_a, grads);
    detail::head_backward_image(sample.patches_b, params, cb, d_feat_b, grads);
    return grads;
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

struct OptimHyper {
    double lr0 = 1e-4;
    double weight_decay = 1e-4;
    double lr_min = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// lr(step) = lr_min + (lr0 - lr_min)(1 + cos(pi * step/total)) / 2,
/// clamping to lr_min beyond the schedule end.
inline double cosine_lr(long step, long total_steps, double lr0 = 1e-4, double lr_min = 1e-6) {
    if (step < 0 || total_steps < 1) throw ValidationError("cosine_lr: invalid step");
    if (step > total_steps) return lr_min;
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(kPi * double(step) / double(total_steps)));
}

struct OptimState {
    std::vector<double> m, v;
    std::vector<std::uint8_t> decay;  // per-parameter weight-decay switch
    long step = 0;
    long total_steps = 1;
    OptimHyper hyper;

    static OptimState init(std::size_t n_params, long total_steps, OptimHyper hyper = {}) {
        OptimState s;
        s.m.assign(n_params, 0.0);
        s.v.assign(n_params, 0.0);
        s.decay.assign(n_params, 1);
        s.total_steps = total_steps;
        s.hyper = hyper;
        return s;
    }
};

/// One AdamW step with decoupled weight decay and bias-corrected moments; the
/// learning rate comes from the cosine schedule at the current step.
inline void adamw_step(std::vector<double>& params, const std::vector<double>& grads,
                       OptimState& state) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ValidationError("adamw: parameter/gradient/state size mismatch");
    const OptimHyper& h = state.hyper;
    double lr = cosine_lr(state.step, state.total_steps, h.lr0, h.lr_min);
    double t = double(state.step + 1);
    double bc1 = 1.0 - std::pow(h.beta1, t);
    double bc2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
        if (state.decay[i]) params[i] -= lr * h.weight_decay * params[i];
    }
    state.step += 1;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    int epochs = 120;  // sizes the cycled pair pool: ceil(steps*batch/epochs)
    std::uint64_t seed = 42;
    MatcherConfig matcher = desk_matcher();
    DustbinParam dustbin{1.0};
    SceneConfig scene = desk_scene();
    int hidden = 96;
    int dim_out = 24;
    OptimHyper optim{};

    static SceneConfig desk_scene() {
        SceneConfig sc;
        sc.height = sc.width = 32;
        sc.min_segments = 8;
        sc.max_segments = 12;
        sc.latent_dim = 32;
        sc.noise_sigma = 0.5;
        sc.drop_fraction = 0.0;
        sc.patch_size = 2;
        sc.latent_clusters = 2;
        sc.cluster_spread = 0.28;
        return sc;
    }

    static MatcherConfig desk_matcher() {
        MatcherConfig mc;
        mc.temperature = 0.05;
        return mc;
    }

    void validate() const {
        if (steps < 0 || batch_size < 1 || epochs < 1)
            throw ValidationError("train: counts must be positive");
        scene.validate();
        matcher.validate();
    }
};

struct TraceRow {
    int step = 0;
    double lr = 0;
    double loss = 0;
};

struct TrainResult {
    HeadParams params;
    double alpha = 0;
    std::vector<TraceRow> trace;
};

inline std::uint64_t pair_seed(std::uint64_t base, int index) {
    Rng r(base ^ 0x5851f42d4c957f2dULL);
    return r.next_u64() + std::uint64_t(index) * 0x9e3779b97f4a7c15ULL;
}

inline PairSample sample_from_pair(const SynthPair& p) {
    return {p.patches_a, p.patches_b, p.masks_a, p.masks_b, p.gt};
}

/// Deterministic training: a fixed pool of generator seeds cycled in order,
/// per-pair losses summed and averaged over the batch. Aborts with the step
/// index if the loss goes non-finite.
inline TrainResult train_head(const TrainConfig& config) {
    config.validate();
    TrainResult out;
    out.params = HeadParams::init(config.scene.latent_dim, config.hidden, config.scene.patch_size,
                                  config.dim_out, config.seed);
    out.alpha = config.dustbin.alpha;
    if (config.steps == 0) return out;

    long pool_size = std::max<long>(
        1, (long(config.steps) * config.batch_size + config.epochs - 1) / config.epochs);

    // Small pools are kept in memory; large ones are regenerated on demand
    // (identical pairs either way, the generator is seeded per index).
    std::vector<PairSample> cached;
    if (pool_size <= 2048) {
        cached.reserve(pool_size);
        for (long i = 0; i < pool_size; ++i)
            cached.push_back(sample_from_pair(gen_pair(config.scene, pair_seed(config.seed, int(i)))));
    }
    PairSample scratch;
    auto sample_at = [&](long idx) -> const PairSample& {
        if (!cached.empty()) return cached[idx];
        scratch = sample_from_pair(gen_pair(config.scene, pair_seed(config.seed, int(idx))));
        return scratch;
    };

    std::vector<double> params = out.params.flatten();
    params.push_back(out.alpha);
    OptimState state = OptimState::init(params.size(), config.steps, config.optim);
    state.decay.back() = 0;  // the dustbin logit is exempt from weight decay

    for (int step = 0; step < config.steps; ++step) {
        HeadGradients batch = HeadGradients::zeros(out.params);
        for (int b = 0; b < config.batch_size; ++b) {
            long idx = (long(step) * config.batch_size + b) % pool_size;
            HeadGradients g = head_backward(sample_at(idx), out.params, config.matcher,
                                            DustbinParam{out.alpha});
            batch.add_scaled(g, 1.0 / config.batch_size);
        }
        if (!std::isfinite(batch.loss))
            throw NumericError("training diverged at step " + std::to_string(step));
        double lr = cosine_lr(state.step, state.total_steps, config.optim.lr0, config.optim.lr_min);
        out.trace.push_back({step, lr, batch.loss});
        std::vector<double> grads = batch.flatten_with_alpha();
        adamw_step(params, grads, state);
        out.params.unflatten(std::vector<double>(params.begin(), params.end() - 1));
        out.alpha = params.back();
    }
    return out;
}

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::string out = "step,lr,loss\n";
    char buf[96];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g\n", r.step, r.lr, r.loss);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: SGT1 tensors plus JSON metadata.
// ---------------------------------------------------------------------------

inline void save_head_checkpoint(const std::string& dir, const HeadParams& p, double alpha,
                                 std::uint64_t seed, int steps) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto mat_tensor = [](const Mat& m) {
        std::vector<float> v(m.data().size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(m.data()[i]);
        return DenseTensor::make_f32({std::uint64_t(m.rows()), std::uint64_t(m.cols())},
                                     std::move(v));
    };
    auto vec_tensor = [](const std::vector<double>& d) {
        std::vector<float> v(d.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(d[i]);
        return DenseTensor::make_f32({std::uint64_t(d.size())}, std::move(v));
    };
    save_tensor(mat_tensor(p.w1), (fs::path(dir) / "w1.sgt").string());
    save_tensor(vec_tensor(p.b1), (fs::path(dir) / "b1.sgt").string());
    save_tensor(mat_tensor(p.w2), (fs::path(dir) / "w2.sgt").string());
    save_tensor(vec_tensor(p.b2), (fs::path(dir) / "b2.sgt").string());
    nlohmann::json j;
    j["dim_in"] = p.dim_in;
    j["hidden"] = p.hidden;
    j["patch_size"] = p.patch_size;
    j["dim_out"] = p.dim_out;
    j["seed"] = seed;
    j["steps"] = steps;
    j["alpha"] = alpha;
    write_file_atomic((fs::path(dir) / "head.json").string(), j.dump(2) + "\n");
}

struct HeadCheckpoint {
    HeadParams params;
    double alpha = 1.0;
    std::uint64_t seed = 0;
    int steps = 0;
};

inline HeadCheckpoint load_head_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is((fs::path(dir) / "head.json").string());
    if (!is) throw IoError("cannot open checkpoint metadata in " + dir);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    HeadCheckpoint ck;
    ck.params.dim_in = j.at("dim_in").get<int>();
    ck.params.hidden = j.at("hidden").get<int>();
    ck.params.patch_size = j.at("patch_size").get<int>();
    ck.params.dim_out = j.at("dim_out").get<int>();
    ck.alpha = j.at("alpha").get<double>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.steps = j.at("steps").get<int>();

    auto mat_from = [&](const std::string& name, int rows, int cols) {
        DenseTensor t = load_tensor((fs::path(dir) / name).string());
        if (t.dtype != Dtype::f32 || t.shape.size() != 2 || int(t.shape[0]) != rows ||
            int(t.shape[1]) != cols)
            throw ValidationError("checkpoint tensor " + name + " has unexpected shape");
        Mat m(rows, cols);
        for (std::size_t i = 0; i < t.f32.size(); ++i) m.data()[i] = t.f32[i];
        return m;
    };
    auto vec_from = [&](const std::string& name, int n) {
        DenseTensor t = load_tensor((fs::path(dir) / name).string());
        if (t.dtype != Dtype::f32 || t.shape.size() != 1 || int(t.shape[0]) != n)
            throw ValidationError("checkpoint tensor " + name + " has unexpected shape");
        return std::vector<double>(t.f32.begin(), t.f32.end());
    };
    int out = ck.params.out_per_patch();
    ck.params.w1 = mat_from("w1.sgt", ck.params.hidden, ck.params.dim_in);
    ck.params.b1 = vec_from("b1.sgt", ck.params.hidden);
    ck.params.w2 = mat_from("w2.sgt", out, ck.params.hidden);
    ck.params.b2 = vec_from("b2.sgt", out);
    return ck;
}

// ---------------------------------------------------------------------------
// Held-out evaluation helpers (trained pipeline vs raw-feature baseline).
// ---------------------------------------------------------------------------

/// R@1 of the trained head on one pair: descriptors from the head on patch
/// inputs, scores from the transport plan's non-dustbin block.
inline std::optional<double> pipeline_r1(const SynthPair& pair, const HeadParams& params,
                                         double alpha, const MatcherConfig& matcher) {
    SegmentDescriptors ga = aggregate_sum(head_forward(pair.patches_a, params), pair.masks_a);
    SegmentDescriptors gb = aggregate_sum(head_forward(pair.patches_b, params), pair.masks_b);
    MatchOutput mo = match_segments(ga, gb, matcher, DustbinParam{alpha});
    Mat scores(pair.masks_a.m, pair.masks_b.m, -1e30);
    for (int r = 0; r < int(mo.src_index.size()); ++r)
        for (int c = 0; c < int(mo.tgt_index.size()); ++c)
            scores(mo.src_index[r], mo.tgt_index[c]) = mo.plan.p(r, c);
    return recall_at_k(scores, pair.gt, 1);
}

/// R@1 of the masked-average-pooling + cosine baseline on raw pixel features.
inline std::optional<double> baseline_r1(const SynthPair& pair) {
    SegmentDescriptors ga = aggregate_mean(pair.features_a, pair.masks_a);
    SegmentDescriptors gb = aggregate_mean(pair.features_b, pair.masks_b);
    AffinityResult aff = affinity(ga, gb, /*normalize=*/true);
    Mat scores(pair.masks_a.m, pair.masks_b.m, -1e30);
    for (int r = 0; r < int(aff.src_index.size()); ++r)
        for (int c = 0; c < int(aff.tgt_index.size()); ++c)
            scores(aff.src_index[r], aff.tgt_index[c]) = aff.s(r, c);
    return recall_at_k(scores, pair.gt, 1);
}

}  // namespace segot
