#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <span>
#include <vector>

#include "llgs/core.hpp"
#include "llgs/losses.hpp"
#include "llgs/mcolor.hpp"
#include "llgs/mlp.hpp"
#include "llgs/rasterizer.hpp"
#include "llgs/scene.hpp"

namespace llgs {

struct LearningRates {
    double position_init = 1.6e-4;
    double position_final = 1.6e-6;
    double rotation = 1e-3;
    double scale = 5e-3;
    double opacity = 5e-2;
    double nets = 1e-3;
};

struct TrainConfig {
    long iterations = 30000;
    LearningRates lr;
    long densify_interval = 100;
    double densify_grad_threshold = 2e-4;
    double prune_opacity = 5e-3;
    long densify_from = 500;
    long densify_until = 15000;
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    double percent_dense = 0.01;
    std::size_t max_gaussians = 4096;
    /// Enhancement losses are off for the first `warmup` iterations.
    long warmup = 500;
    bool disable_preprocess = false;
    bool disable_gradient_loss = false;
    std::uint64_t seed = 0;
    double init_opacity = 0.1;
    Vector3d background = Vector3d::Zero();
    int threads = default_thread_count();

    void validate() const {
        if (iterations < 0) throw InvalidParameter("train: iterations must be nonnegative");
        for (double v : {lr.position_init, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.nets})
            if (!(v > 0.0)) throw InvalidParameter("train: learning rates must be positive");
        if (densify_until > iterations) throw InvalidParameter("train: densify_until exceeds iterations");
        if (densify_interval <= 0) throw InvalidParameter("train: densify_interval must be positive");
        if (!(init_opacity > 0.0 && init_opacity < 1.0)) throw InvalidParameter("train: init_opacity must lie in (0,1)");
    }
};

struct IterationLog {
    long iteration = 0;
    double l_image = 0.0;
    double l_color = 0.0;
    double l_grad = 0.0;
    double total = 0.0;
    std::size_t gaussian_count = 0;
};

/// Adam moments for the per-Gaussian parameters, one entry per Gaussian.
struct CloudAdam {
    std::vector<GaussianGrad> m;
    std::vector<GaussianGrad> v;
    long step = 0;
    long skipped_tensors = 0;
};

struct TrainState {
    GaussianCloud cloud;
    MColorNets nets;
    CloudAdam cloud_adam;
    AdamState feature_adam, light_adam, color_adam, enhance_adam;
    std::vector<double> grad_accum;  // summed screen-space gradient norms
    std::vector<int> grad_count;
    long iteration = 0;
    double scene_extent = 1.0;
    std::vector<IterationLog> history;
};

// ---------------------------------------------------------------------------
// Initialization

/// Mean distance to the 3 nearest neighbours, used as the initial isotropic
/// scale.
inline std::vector<double> neighbour_scales(std::span<const Vector3d> pts) {
    std::vector<double> out(pts.size(), 0.1);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        std::vector<double> d2;
        for (std::size_t j = 0; j < pts.size(); ++j)
            if (j != i) d2.push_back((pts[i] - pts[j]).squaredNorm());
        if (d2.empty()) continue;
        const std::size_t k = std::min<std::size_t>(3, d2.size());
        std::partial_sort(d2.begin(), d2.begin() + static_cast<long>(k), d2.end());
        const double mean = std::accumulate(d2.begin(), d2.begin() + static_cast<long>(k), 0.0) / k;
        out[i] = std::sqrt(std::max(mean, 1e-14));
    }
    return out;
}

inline AdamState make_net_adam(const MlpParams& p, double lr) { return AdamState::for_params(p, lr); }

inline TrainState init_state(const TrainConfig& cfg, std::span<const Vector3d> init_points, const SceneBounds& bounds) {
    if (init_points.empty()) throw InvalidParameter("train: at least one init point is required");
    TrainState s;
    const auto scales = neighbour_scales(init_points);
    for (std::size_t i = 0; i < init_points.size(); ++i) {
        Gaussian g;
        g.position = init_points[i];
        g.log_scale = Vector3d::Constant(std::log(scales[i]));
        g.opacity_logit = logit(cfg.init_opacity);
        s.cloud.push_back(g);
    }
    s.nets = MColorNets::create(bounds, cfg.seed);
    s.cloud_adam.m.assign(s.cloud.size(), {});
    s.cloud_adam.v.assign(s.cloud.size(), {});
    s.feature_adam = make_net_adam(s.nets.feature_net, cfg.lr.nets);
    s.light_adam = make_net_adam(s.nets.light_net, cfg.lr.nets);
    s.color_adam = make_net_adam(s.nets.color_net, cfg.lr.nets);
    s.enhance_adam = make_net_adam(s.nets.enhance_net, cfg.lr.nets);
    s.grad_accum.assign(s.cloud.size(), 0.0);
    s.grad_count.assign(s.cloud.size(), 0);
    s.scene_extent = 0.5 * (bounds.max - bounds.min).norm();
    return s;
}

// ---------------------------------------------------------------------------
// Optimizer steps

inline double position_lr(const TrainConfig& cfg, long iteration) {
    if (cfg.iterations <= 0) return cfg.lr.position_init;
    const double t = std::clamp(static_cast<double>(iteration) / static_cast<double>(cfg.iterations), 0.0, 1.0);
    return std::exp((1.0 - t) * std::log(cfg.lr.position_init) + t * std::log(cfg.lr.position_final));
}

namespace detail {

template <typename Field>
void cloud_group_step(GaussianCloud& cloud, std::span<const GaussianGrad> grads, CloudAdam& adam, double lr,
                      Field field, const AdamConfig& ac) {
    // The group is one tensor: any non-finite entry skips it entirely.
    for (const auto& g : grads)
        if (!field(g).allFinite()) {
            ++adam.skipped_tensors;
            return;
        }
    auto span_of = [](auto& v) { return std::span(v.data(), static_cast<std::size_t>(v.size())); };
    for (std::size_t i = 0; i < cloud.size(); ++i)
        adam_update(span_of(field(cloud[i])), span_of(field(grads[i])), span_of(field(adam.m[i])),
                    span_of(field(adam.v[i])), adam.step, lr, ac);
}

inline void opacity_group_step(GaussianCloud& cloud, std::span<const GaussianGrad> grads, CloudAdam& adam, double lr,
                               const AdamConfig& ac) {
    for (const auto& g : grads)
        if (!std::isfinite(g.opacity_logit)) {
            ++adam.skipped_tensors;
            return;
        }
    for (std::size_t i = 0; i < cloud.size(); ++i)
        adam_update({&cloud[i].opacity_logit, 1}, {&grads[i].opacity_logit, 1}, {&adam.m[i].opacity_logit, 1},
                    {&adam.v[i].opacity_logit, 1}, adam.step, lr, ac);
}

}  // namespace detail

/// One Adam step over every Gaussian parameter group, followed by quaternion
/// renormalization.
inline void cloud_adam_step(GaussianCloud& cloud, std::span<const GaussianGrad> grads, CloudAdam& adam,
                            const TrainConfig& cfg, double pos_lr) {
    if (grads.size() != cloud.size() || adam.m.size() != cloud.size())
        throw InvalidState("cloud_adam_step: gradient or moment buffers do not match the cloud");
    ++adam.step;
    const AdamConfig ac{};
    detail::cloud_group_step(cloud, grads, adam, pos_lr, [](auto& x) -> auto& { return x.position; }, ac);
    detail::cloud_group_step(cloud, grads, adam, cfg.lr.rotation, [](auto& x) -> auto& { return x.rotation; }, ac);
    detail::cloud_group_step(cloud, grads, adam, cfg.lr.scale, [](auto& x) -> auto& { return x.log_scale; }, ac);
    detail::opacity_group_step(cloud, grads, adam, cfg.lr.opacity, ac);
    for (auto& g : cloud) {
        const double n = g.rotation.norm();
        g.rotation = n > 0.0 && std::isfinite(n) ? Vector4d(g.rotation / n) : Vector4d(1, 0, 0, 0);
    }
}

// ---------------------------------------------------------------------------
// Densification

struct DensifyThresholds {
    double grad_threshold = 2e-4;
    double prune_opacity = 5e-3;
    double split_scale = 0.01;  // absolute: percent_dense * scene extent
    std::size_t max_gaussians = 4096;
};

struct DensifyStats {
    std::size_t cloned = 0;
    std::size_t split = 0;
    std::size_t pruned = 0;
};

inline constexpr double kSplitScaleDivisor = 1.6;

/// Clone small high-gradient Gaussians, split large ones into two children
/// placed symmetrically about the parent, then drop near-transparent ones.
/// Adam moments follow their Gaussians; new Gaussians start from zero moments.
inline DensifyStats densify_and_prune(TrainState& s, const DensifyThresholds& th, std::mt19937_64& rng) {
    const std::size_t n = s.cloud.size();
    if (s.grad_accum.size() != n || s.grad_count.size() != n || s.cloud_adam.m.size() != n)
        throw InvalidState("densify: accumulators do not match the cloud");
    DensifyStats stats;

    std::vector<std::pair<double, std::size_t>> candidates;
    for (std::size_t i = 0; i < n; ++i) {
        if (s.grad_count[i] == 0) continue;
        const double mean = s.grad_accum[i] / s.grad_count[i];
        if (mean > th.grad_threshold) candidates.emplace_back(mean, i);
    }
    // Highest gradients first, so the cap keeps the most useful ones.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });

    GaussianCloud next;
    CloudAdam adam;
    adam.step = s.cloud_adam.step;
    adam.skipped_tensors = s.cloud_adam.skipped_tensors;
    std::vector<char> action(n, 0);  // 0 keep, 1 clone, 2 split
    std::size_t budget = th.max_gaussians > n ? th.max_gaussians - n : 0;
    for (const auto& [g, i] : candidates) {
        if (budget == 0) break;
        action[i] = s.cloud[i].scale().maxCoeff() > th.split_scale ? 2 : 1;
        --budget;
    }

    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const Gaussian& g = s.cloud[i];
        if (action[i] == 2) {
            const Vector3d z(normal(rng), normal(rng), normal(rng));
            const Vector3d delta = rotation_from_quaternion(g.rotation) * g.scale().cwiseProduct(z);
            for (const double sign : {1.0, -1.0}) {
                Gaussian c = g;
                c.position = g.position + sign * delta;
                c.log_scale = g.log_scale.array() - std::log(kSplitScaleDivisor);
                next.push_back(c);
                adam.m.emplace_back();
                adam.v.emplace_back();
            }
            ++stats.split;
            continue;
        }
        next.push_back(g);
        adam.m.push_back(s.cloud_adam.m[i]);
        adam.v.push_back(s.cloud_adam.v[i]);
        if (action[i] == 1) {
            next.push_back(g);
            adam.m.emplace_back();
            adam.v.emplace_back();
            ++stats.cloned;
        }
    }

    GaussianCloud kept;
    CloudAdam kept_adam;
    kept_adam.step = adam.step;
    kept_adam.skipped_tensors = adam.skipped_tensors;
    for (std::size_t i = 0; i < next.size(); ++i) {
        if (next[i].opacity() < th.prune_opacity) {
            ++stats.pruned;
            continue;
        }
        kept.push_back(next[i]);
        kept_adam.m.push_back(adam.m[i]);
        kept_adam.v.push_back(adam.v[i]);
    }
    if (kept.empty())
        throw TrainingError("densify_and_prune: every Gaussian fell below the prune opacity (opacity collapse)");

    s.cloud = std::move(kept);
    s.cloud_adam = std::move(kept_adam);
    s.grad_accum.assign(s.cloud.size(), 0.0);
    s.grad_count.assign(s.cloud.size(), 0);
    return stats;
}

// ---------------------------------------------------------------------------
// Training loop

/// Loss weights in effect at a given iteration (warm-up and ablations applied).
inline LossConfig effective_loss(const LossConfig& base, const TrainConfig& cfg, long iteration) {
    LossConfig l = base;
    if (iteration <= cfg.warmup) {
        l.w_color = 0.0;
        l.w_grad = 0.0;
    }
    if (cfg.disable_gradient_loss) l.w_grad = 0.0;
    return l;
}

using ProgressCallback = std::function<void(const TrainState&, const IterationLog&)>;

/// Runs `cfg.iterations - s.iteration` more iterations on `s`. One view per
/// iteration, visiting views in a freshly shuffled order every epoch.
inline void train_continue(TrainState& s, const TrainConfig& cfg, const LossConfig& loss_cfg,
                           std::span<const CameraView> views, const ProgressCallback& progress = {}) {
    cfg.validate();
    loss_cfg.validate();
    if (views.size() < 2) throw InvalidParameter("train: at least two views are required");
    for (const auto& v : views) {
        validate_camera(v);
        if (v.input_image.empty() || v.preprocessed_image.empty())
            throw InvalidParameter("train: every training view needs input and preprocessed images");
    }

    std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    // Replay the view stream up to the current iteration so resumed runs
    // match uninterrupted ones.
    auto next_view = [&] {
        if (cursor == order.size()) {
            order.resize(views.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        return order[cursor++];
    };
    for (long i = 0; i < s.iteration; ++i) next_view();

    const RenderOptions ropts{RenderMode::both, cfg.background, cfg.threads};
    while (s.iteration < cfg.iterations) {
        const long it = s.iteration + 1;
        const std::size_t vi = next_view();
        const CameraView& view = views[vi];
        const LossConfig lc = effective_loss(loss_cfg, cfg, it);

        const RenderOutput out = render(s.cloud, s.nets, view, ropts);
        const LossReport rep = total_loss(out, view, lc);
        if (!std::isfinite(rep.total)) {
            std::ostringstream msg;
            msg << "train: non-finite loss at iteration " << it << " on view " << vi << " (image " << rep.l_image
                << ", color " << rep.l_color << ", grad " << rep.l_grad << ", gaussians " << s.cloud.size()
                << ", visible " << out.visible_count() << ")";
            throw TrainingError(msg.str());
        }
        const SceneGrads grads = render_backward(s.cloud, s.nets, view, out, rep.upstream, cfg.threads);

        cloud_adam_step(s.cloud, grads.gaussians, s.cloud_adam, cfg, position_lr(cfg, it) * s.scene_extent);
        adam_step(s.nets.feature_net, grads.nets.feature, s.feature_adam);
        adam_step(s.nets.light_net, grads.nets.light, s.light_adam);
        adam_step(s.nets.color_net, grads.nets.color, s.color_adam);
        if (!s.nets.pin) adam_step(s.nets.enhance_net, grads.nets.enhance, s.enhance_adam);

        for (std::size_t i = 0; i < s.cloud.size(); ++i) {
            if (!grads.visible[i]) continue;
            s.grad_accum[i] += grads.screen_grad_norm[i];
            s.grad_count[i] += 1;
        }

        s.iteration = it;
        if (it >= cfg.densify_from && it <= cfg.densify_until && it % cfg.densify_interval == 0) {
            std::mt19937_64 drng(cfg.seed + static_cast<std::uint64_t>(it));
            densify_and_prune(s,
                              {cfg.densify_grad_threshold, cfg.prune_opacity, cfg.percent_dense * s.scene_extent,
                               cfg.max_gaussians},
                              drng);
        }

        // The logged total uses the configured weights so the series is
        // comparable across the warm-up boundary.
        const LossConfig logged = effective_loss(loss_cfg, cfg, cfg.warmup + 1);
        const double total = rep.l_image + logged.w_color * rep.l_color + logged.w_grad * rep.l_grad;
        IterationLog log{it, rep.l_image, rep.l_color, rep.l_grad, total, s.cloud.size()};
        s.history.push_back(log);
        if (progress) progress(s, log);
    }
}

inline TrainState train(const TrainConfig& cfg, const LossConfig& loss_cfg, std::span<const CameraView> views,
                        std::span<const Vector3d> init_points, const SceneBounds& bounds,
                        const ProgressCallback& progress = {}) {
    cfg.validate();
    TrainState s = init_state(cfg, init_points, bounds);
    train_continue(s, cfg, loss_cfg, views, progress);
    return s;
}

// ---------------------------------------------------------------------------
// Evaluation

inline constexpr double kPsnrCap = 99.0;

inline double mse(const Image& a, const Image& b) {
    require_same_shape(a, b, "mse");
    if (a.data.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return s / static_cast<double>(a.data.size());
}

/// 10 log10(1 / MSE) for [0,1] images, capped at 99 dB.
inline double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

struct ViewMetrics {
    std::size_t view = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    double mean_intensity = 0.0;
};

struct EvalReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double mean_intensity = 0.0;
};

/// Renders each view (enhanced by default) and scores it against its reference.
inline EvalReport evaluate(const GaussianCloud& cloud, const MColorNets& nets, std::span<const CameraView> views,
                           std::span<const Image> references, RenderMode mode = RenderMode::enhanced,
                           const Vector3d& background = Vector3d::Zero(), int threads = default_thread_count()) {
    if (views.size() != references.size()) throw InvalidParameter("evaluate: one reference per view is required");
    EvalReport r;
    for (std::size_t i = 0; i < views.size(); ++i) {
        const auto out = render(cloud, nets, views[i], {mode, background, threads});
        const Image& img = mode == RenderMode::raw ? out.image_raw : out.image_enhanced;
        if (!img.same_shape(references[i])) throw InvalidParameter("evaluate: reference shape mismatch");
        ViewMetrics m{i, psnr(img, references[i]), ssim(img, references[i]).value, img.mean()};
        r.mean_psnr += m.psnr;
        r.mean_ssim += m.ssim;
        r.mean_intensity += m.mean_intensity;
        r.views.push_back(m);
    }
    if (!r.views.empty()) {
        const double inv = 1.0 / static_cast<double>(r.views.size());
        r.mean_psnr *= inv;
        r.mean_ssim *= inv;
        r.mean_intensity *= inv;
    }
    return r;
}

inline EvalReport evaluate(const TrainState& s, std::span<const CameraView> views, std::span<const Image> references,
                           const TrainConfig& cfg = {}) {
    return evaluate(s.cloud, s.nets, views, references, RenderMode::enhanced, cfg.background, cfg.threads);
}

}  // namespace llgs
