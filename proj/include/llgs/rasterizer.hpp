#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "llgs/core.hpp"
#include "llgs/mcolor.hpp"
#include "llgs/scene.hpp"

namespace llgs {

/// Compositing stops once transmittance falls below this; the ignored tail
/// is bounded by it, which keeps the tiled renderer within 1e-6 of the
/// reference.
inline constexpr double kTransmittanceStop = 1e-7;
inline constexpr double kSingularDeterminant = 1e-12;
inline constexpr int kTileSize = 16;

struct RenderOptions {
    RenderMode mode = RenderMode::both;
    Vector3d background = Vector3d::Zero();
    int threads = default_thread_count();
};

/// A screen-space splat ready for compositing.
struct Splat {
    Vector2d mean;
    Matrix2d conic;  // inverse of cov2d
    double opacity = 0.0;
    double radius = 0.0;
    double depth = 0.0;
};

struct Contributor {
    std::uint32_t splat = 0;  // index into the depth-sorted splat list
    double alpha = 0.0;
    double transmittance = 0.0;  // before this splat
    double footprint = 0.0;      // G^2D at the pixel
};

/// Per-pixel compositing record, kept for the backward pass.
struct CompositeTrace {
    std::vector<Contributor> contributors;
    std::vector<std::uint32_t> offsets;  // pixel p owns [offsets[2p], offsets[2p+1])
    std::vector<double> final_transmittance;
    long early_terminations = 0;
};

struct CompositeResult {
    std::vector<Image> layers;  // one RGB image per color layer
    Image alpha_map;            // H x W x 1, accumulated sum of alpha * T
    CompositeTrace trace;
};

namespace detail {

inline Vector2d pixel_center(int x, int y) { return {x + 0.5, y + 0.5}; }

inline double footprint(const Splat& s, const Vector2d& pix) {
    const Vector2d d = pix - s.mean;
    const double q = d.x() * (s.conic(0, 0) * d.x() + s.conic(0, 1) * d.y()) +
                     d.y() * (s.conic(1, 0) * d.x() + s.conic(1, 1) * d.y());
    return std::exp(-0.5 * q);
}

struct TileGrid {
    int tiles_x = 0, tiles_y = 0;
    TileGrid(int w, int h) : tiles_x((w + kTileSize - 1) / kTileSize), tiles_y((h + kTileSize - 1) / kTileSize) {}
    [[nodiscard]] std::size_t count() const { return static_cast<std::size_t>(tiles_x) * tiles_y; }
};

}  // namespace detail

/// Front-to-back alpha compositing of depth-sorted splats over a tile grid.
/// `layers[l][i]` is splat i's color in layer l; `backgrounds[l]` fills the
/// remaining transmittance of layer l.
inline CompositeResult composite(std::span<const Splat> splats, std::span<const std::vector<Vector3d>> layers,
                                 std::span<const Vector3d> backgrounds, int width, int height, int threads) {
    const std::size_t n_layers = layers.size();
    CompositeResult out;
    for (std::size_t l = 0; l < n_layers; ++l) out.layers.emplace_back(width, height, 3);
    out.alpha_map = Image(width, height, 1);
    const std::size_t n_pix = static_cast<std::size_t>(width) * height;
    out.trace.final_transmittance.assign(n_pix, 1.0);

    const detail::TileGrid grid(width, height);
    struct TileWork {
        std::vector<Contributor> contributors;
        std::vector<std::pair<std::size_t, std::uint32_t>> pixel_counts;  // (pixel, count) in order
        long early = 0;
    };
    std::vector<TileWork> work(grid.count());

    parallel_for(grid.count(), threads, [&](std::size_t t) {
        const int tx = static_cast<int>(t % grid.tiles_x), ty = static_cast<int>(t / grid.tiles_x);
        const int x0 = tx * kTileSize, y0 = ty * kTileSize;
        const int x1 = std::min(x0 + kTileSize, width), y1 = std::min(y0 + kTileSize, height);

        std::vector<std::uint32_t> bin;
        for (std::uint32_t i = 0; i < splats.size(); ++i) {
            const auto& s = splats[i];
            if (s.mean.x() + s.radius < x0 || s.mean.x() - s.radius > x1 || s.mean.y() + s.radius < y0 ||
                s.mean.y() - s.radius > y1)
                continue;
            bin.push_back(i);
        }

        auto& tw = work[t];
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * width + x;
                const Vector2d pix = detail::pixel_center(x, y);
                double T = 1.0;
                double acc_alpha = 0.0;
                std::array<Vector3d, 3> acc{Vector3d::Zero(), Vector3d::Zero(), Vector3d::Zero()};
                std::uint32_t count = 0;
                for (const std::uint32_t i : bin) {
                    const auto& s = splats[i];
                    const double g = detail::footprint(s, pix);
                    const double alpha = s.opacity * g;
                    if (alpha < kExtentAlpha) continue;
                    const double w = alpha * T;
                    for (std::size_t l = 0; l < n_layers; ++l) acc[l] += w * layers[l][i];
                    acc_alpha += w;
                    tw.contributors.push_back({i, alpha, T, g});
                    ++count;
                    T *= 1.0 - alpha;
                    if (T < kTransmittanceStop) {
                        ++tw.early;
                        break;
                    }
                }
                for (std::size_t l = 0; l < n_layers; ++l) {
                    const Vector3d c = acc[l] + T * backgrounds[l];
                    for (int ch = 0; ch < 3; ++ch) out.layers[l].at(x, y, ch) = c[ch];
                }
                out.alpha_map.at(x, y) = acc_alpha;
                out.trace.final_transmittance[p] = T;
                tw.pixel_counts.emplace_back(p, count);
            }
        }
    });

    // Flatten per-tile traces into per-pixel ranges.
    std::vector<std::uint32_t> counts(n_pix, 0), starts(n_pix, 0);
    std::size_t total = 0;
    for (const auto& tw : work) total += tw.contributors.size();
    out.trace.contributors.reserve(total);
    for (const auto& tw : work) {
        std::size_t cursor = 0;
        for (const auto& [p, c] : tw.pixel_counts) {
            starts[p] = static_cast<std::uint32_t>(out.trace.contributors.size() + cursor);
            counts[p] = c;
            cursor += c;
        }
        out.trace.contributors.insert(out.trace.contributors.end(), tw.contributors.begin(), tw.contributors.end());
        out.trace.early_terminations += tw.early;
    }
    out.trace.offsets.resize(2 * n_pix);
    for (std::size_t p = 0; p < n_pix; ++p) {
        out.trace.offsets[2 * p] = starts[p];
        out.trace.offsets[2 * p + 1] = starts[p] + counts[p];
    }
    return out;
}

// ---------------------------------------------------------------------------

struct RenderOutput {
    Image image_raw;       // I_r
    Image image_enhanced;  // I_e
    Image material_map;
    Image alpha_map;

    RenderMode mode = RenderMode::both;
    Vector3d background = Vector3d::Zero();
    std::vector<std::optional<ProjectedGaussian>> projections;  // per cloud Gaussian
    ColorBatch colors;                                           // per visible Gaussian
    std::vector<std::uint32_t> sorted;                           // splat order -> batch entry
    std::vector<Splat> splats;                                   // depth-sorted
    CompositeTrace trace;
    long skipped_singular = 0;

    [[nodiscard]] std::size_t visible_count() const { return colors.size(); }
};

namespace detail {

inline Vector3d clamp01(const Vector3d& v) { return v.cwiseMax(0.0).cwiseMin(1.0); }

/// Projection, coloring and depth sort shared by both renderers.
struct PreparedScene {
    std::vector<std::optional<ProjectedGaussian>> projections;
    ColorBatch colors;
    std::vector<std::uint32_t> sorted;
    std::vector<Splat> splats;
    long skipped_singular = 0;
};

inline PreparedScene prepare(const GaussianCloud& cloud, const MColorNets& nets, const CameraView& cam,
                             RenderMode mode, bool screen_cull) {
    PreparedScene ps;
    ps.projections.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        auto pg = project_gaussian(cloud[i], cam, {.screen_cull = screen_cull});
        if (pg && pg->cov2d.determinant() < kSingularDeterminant) {
            ++ps.skipped_singular;
            pg.reset();
        }
        ps.projections[i] = pg;
    }
    ps.colors = color_all(cloud, ps.projections, nets, mode);
    const std::size_t n = ps.colors.size();
    ps.sorted.resize(n);
    std::iota(ps.sorted.begin(), ps.sorted.end(), 0u);
    std::stable_sort(ps.sorted.begin(), ps.sorted.end(), [&](std::uint32_t a, std::uint32_t b) {
        return ps.projections[ps.colors.indices[a]]->depth < ps.projections[ps.colors.indices[b]]->depth;
    });
    ps.splats.reserve(n);
    for (const std::uint32_t e : ps.sorted) {
        const std::size_t gi = ps.colors.indices[e];
        const auto& pg = *ps.projections[gi];
        ps.splats.push_back({pg.mean2d, pg.cov2d.inverse(), cloud[gi].opacity(), pg.radius, pg.depth});
    }
    return ps;
}

struct LayerSet {
    std::vector<std::vector<Vector3d>> colors;
    std::vector<Vector3d> backgrounds;
    int raw = -1, enhanced = -1, material = -1;
};

inline LayerSet make_layers(const PreparedScene& ps, RenderMode mode, const Vector3d& background) {
    LayerSet ls;
    auto add = [&](auto get, const Vector3d& bg) {
        std::vector<Vector3d> c;
        c.reserve(ps.sorted.size());
        for (const std::uint32_t e : ps.sorted) c.push_back(clamp01(get(ps.colors.colors[e])));
        ls.colors.push_back(std::move(c));
        ls.backgrounds.push_back(bg);
        return static_cast<int>(ls.colors.size()) - 1;
    };
    if (wants_raw(mode)) ls.raw = add([](const GaussianColor& c) { return c.raw_color; }, background);
    if (wants_enhanced(mode)) ls.enhanced = add([](const GaussianColor& c) { return c.enhanced_color; }, background);
    ls.material = add([](const GaussianColor& c) { return c.material; }, Vector3d::Zero());
    return ls;
}

}  // namespace detail

/// Tiled renderer: project, color, depth-sort, composite front to back.
inline RenderOutput render(const GaussianCloud& cloud, const MColorNets& nets, const CameraView& cam,
                           const RenderOptions& opts = {}) {
    auto ps = detail::prepare(cloud, nets, cam, opts.mode, true);
    auto ls = detail::make_layers(ps, opts.mode, opts.background);
    auto comp = composite(ps.splats, ls.colors, ls.backgrounds, cam.width, cam.height, opts.threads);

    RenderOutput out;
    out.mode = opts.mode;
    out.background = opts.background;
    if (ls.raw >= 0) out.image_raw = std::move(comp.layers[static_cast<std::size_t>(ls.raw)]);
    if (ls.enhanced >= 0) out.image_enhanced = std::move(comp.layers[static_cast<std::size_t>(ls.enhanced)]);
    out.material_map = std::move(comp.layers[static_cast<std::size_t>(ls.material)]);
    out.alpha_map = std::move(comp.alpha_map);
    out.trace = std::move(comp.trace);
    out.projections = std::move(ps.projections);
    out.colors = std::move(ps.colors);
    out.sorted = std::move(ps.sorted);
    out.splats = std::move(ps.splats);
    out.skipped_singular = ps.skipped_singular;
    return out;
}

/// Per-pixel reference renderer: every Gaussian in depth order for every
/// pixel, no tiles, no screen culling, no early termination. Returns images
/// only (no backward caches).
inline RenderOutput render_reference(const GaussianCloud& cloud, const MColorNets& nets, const CameraView& cam,
                                     const RenderOptions& opts = {}) {
    auto ps = detail::prepare(cloud, nets, cam, opts.mode, false);
    auto ls = detail::make_layers(ps, opts.mode, opts.background);
    const std::size_t n_layers = ls.colors.size();

    std::vector<Image> images(n_layers, Image(cam.width, cam.height, 3));
    Image alpha(cam.width, cam.height, 1);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const Vector2d pix(x + 0.5, y + 0.5);
            std::vector<Vector3d> acc(n_layers, Vector3d::Zero());
            double T = 1.0;
            double a_sum = 0.0;
            for (std::size_t k = 0; k < ps.splats.size(); ++k) {
                const std::size_t gi = ps.colors.indices[ps.sorted[k]];
                const auto& pg = *ps.projections[gi];
                const Vector2d d = pix - pg.mean2d;
                const double q = d.dot(pg.cov2d.ldlt().solve(d));
                const double a = cloud[gi].opacity() * std::exp(-0.5 * q);
                for (std::size_t l = 0; l < n_layers; ++l) acc[l] += ls.colors[l][k] * (a * T);
                a_sum += a * T;
                T *= 1.0 - a;
            }
            for (std::size_t l = 0; l < n_layers; ++l) {
                const Vector3d c = acc[l] + T * ls.backgrounds[l];
                for (int ch = 0; ch < 3; ++ch) images[l].at(x, y, ch) = c[ch];
            }
            alpha.at(x, y) = a_sum;
        }
    }
    RenderOutput out;
    out.mode = opts.mode;
    out.background = opts.background;
    if (ls.raw >= 0) out.image_raw = std::move(images[static_cast<std::size_t>(ls.raw)]);
    if (ls.enhanced >= 0) out.image_enhanced = std::move(images[static_cast<std::size_t>(ls.enhanced)]);
    out.material_map = std::move(images[static_cast<std::size_t>(ls.material)]);
    out.alpha_map = std::move(alpha);
    out.projections = std::move(ps.projections);
    out.colors = std::move(ps.colors);
    out.skipped_singular = ps.skipped_singular;
    return out;
}

/// Renders Gaussians with fixed per-Gaussian RGB colors (no networks). Used to
/// produce ground-truth images.
inline Image render_fixed_colors(const GaussianCloud& cloud, std::span<const Vector3d> colors, const CameraView& cam,
                                 const Vector3d& background = Vector3d::Zero(), int threads = default_thread_count()) {
    if (colors.size() != cloud.size()) throw InvalidParameter("render_fixed_colors: one color per Gaussian");
    std::vector<std::pair<double, std::size_t>> order;
    std::vector<std::optional<ProjectedGaussian>> proj(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        proj[i] = project_gaussian(cloud[i], cam);
        if (proj[i] && proj[i]->cov2d.determinant() >= kSingularDeterminant) order.emplace_back(proj[i]->depth, i);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<Splat> splats;
    std::vector<std::vector<Vector3d>> layer(1);
    for (const auto& [depth, i] : order) {
        splats.push_back({proj[i]->mean2d, proj[i]->cov2d.inverse(), cloud[i].opacity(), proj[i]->radius, depth});
        layer[0].push_back(detail::clamp01(colors[i]));
    }
    const std::array<Vector3d, 1> bg{background};
    auto comp = composite(splats, layer, bg, cam.width, cam.height, threads);
    return std::move(comp.layers[0]);
}

// ---------------------------------------------------------------------------
// Backward

/// Loss gradients on the rendered buffers. Empty images contribute nothing.
/// `gamma` holds dL/dgamma per visible Gaussian (3 x visible_count) or is empty.
struct RenderUpstream {
    Image raw;
    Image enhanced;
    Image material;
    Matrix3Xd gamma;
};

struct SceneGrads {
    std::vector<GaussianGrad> gaussians;  // one per cloud Gaussian
    MColorGrads nets;
    /// |dL/dmean2d| per cloud Gaussian, in normalized device units (pixel
    /// gradient scaled by half the image size), zero when not visible.
    std::vector<double> screen_grad_norm;
    std::vector<bool> visible;
};

namespace detail {

struct SplatGrad {
    Vector2d mean = Vector2d::Zero();
    Matrix2d cov = Matrix2d::Zero();
    double opacity = 0.0;
    std::array<Vector3d, 3> color{Vector3d::Zero(), Vector3d::Zero(), Vector3d::Zero()};

    SplatGrad& operator+=(const SplatGrad& o) {
        mean += o.mean;
        cov += o.cov;
        opacity += o.opacity;
        for (int l = 0; l < 3; ++l) color[l] += o.color[l];
        return *this;
    }
};

}  // namespace detail

/// Exact gradients of the render with respect to every Gaussian parameter and
/// every network parameter. Per-tile partial sums are reduced in tile order,
/// so the result does not depend on the thread schedule.
inline SceneGrads render_backward(const GaussianCloud& cloud, const MColorNets& nets, const CameraView& cam,
                                  const RenderOutput& fwd, const RenderUpstream& up,
                                  int threads = default_thread_count()) {
    const int width = cam.width, height = cam.height;
    const std::size_t n_splats = fwd.splats.size();
    if (fwd.trace.offsets.size() != 2 * static_cast<std::size_t>(width) * height)
        throw InvalidState("render_backward: forward caches do not match camera");

    // Layers in fixed order: 0 raw, 1 enhanced, 2 material.
    const std::array<const Image*, 3> up_img{&up.raw, &up.enhanced, &up.material};
    std::array<bool, 3> active{};
    for (int l = 0; l < 3; ++l) {
        active[l] = !up_img[l]->empty();
        if (active[l] && (up_img[l]->width != width || up_img[l]->height != height || up_img[l]->channels != 3))
            throw InvalidParameter("render_backward: upstream image shape mismatch");
    }
    if (active[0] && !wants_raw(fwd.mode)) throw InvalidState("render_backward: raw image was not rendered");
    if (active[1] && !wants_enhanced(fwd.mode)) throw InvalidState("render_backward: enhanced image was not rendered");

    // Clamped splat colors per layer, in sorted order.
    std::array<std::vector<Vector3d>, 3> col;
    std::array<Vector3d, 3> bg{fwd.background, fwd.background, Vector3d::Zero()};
    for (const std::uint32_t e : fwd.sorted) {
        const auto& c = fwd.colors.colors[e];
        col[0].push_back(detail::clamp01(c.raw_color));
        col[1].push_back(detail::clamp01(c.enhanced_color));
        col[2].push_back(detail::clamp01(c.material));
    }

    const detail::TileGrid grid(width, height);
    std::vector<std::vector<detail::SplatGrad>> partial(grid.count());
    parallel_for(grid.count(), threads, [&](std::size_t t) {
        auto& acc = partial[t];
        acc.assign(n_splats, {});
        const int tx = static_cast<int>(t % grid.tiles_x), ty = static_cast<int>(t / grid.tiles_x);
        const int x0 = tx * kTileSize, y0 = ty * kTileSize;
        const int x1 = std::min(x0 + kTileSize, width), y1 = std::min(y0 + kTileSize, height);
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * width + x;
                const std::uint32_t begin = fwd.trace.offsets[2 * p], end = fwd.trace.offsets[2 * p + 1];
                if (begin == end) continue;
                std::array<Vector3d, 3> g;
                std::array<Vector3d, 3> rest;
                for (int l = 0; l < 3; ++l) {
                    g[l] = active[l] ? Vector3d(up_img[l]->at(x, y, 0), up_img[l]->at(x, y, 1), up_img[l]->at(x, y, 2))
                                     : Vector3d::Zero();
                    rest[l] = bg[l];
                }
                const Vector2d pix = detail::pixel_center(x, y);
                for (std::uint32_t k = end; k-- > begin;) {
                    const auto& c = fwd.trace.contributors[k];
                    const auto& s = fwd.splats[c.splat];
                    auto& sg = acc[c.splat];
                    const double w = c.alpha * c.transmittance;
                    double d_alpha = 0.0;
                    for (int l = 0; l < 3; ++l) {
                        if (!active[l]) continue;
                        const Vector3d& ci = col[l][c.splat];
                        sg.color[l] += w * g[l];
                        d_alpha += c.transmittance * g[l].dot(ci - rest[l]);
                        rest[l] = c.alpha * ci + (1.0 - c.alpha) * rest[l];
                    }
                    sg.opacity += d_alpha * c.footprint;
                    const double d_g = d_alpha * s.opacity;
                    const double d_q = -0.5 * c.footprint * d_g;
                    const Vector2d d = pix - s.mean;
                    const Vector2d qd = s.conic * d;
                    sg.mean += d_q * (-(qd + s.conic.transpose() * d));
                    // q = d^T Q d, Q = cov^-1: dq/dcov = -Q^T d d^T Q^T
                    sg.cov += -d_q * ((s.conic.transpose() * d) * qd.transpose());
                }
            }
        }
    });

    std::vector<detail::SplatGrad> total(n_splats);
    for (const auto& part : partial)
        for (std::size_t i = 0; i < n_splats; ++i) total[i] += part[i];

    // Back to batch-entry order, through the color clamp.
    const Eigen::Index nb = static_cast<Eigen::Index>(fwd.colors.size());
    ColorUpstream cu = ColorUpstream::zeros(nb);
    auto in_range = [](double v) { return v >= 0.0 && v <= 1.0 ? 1.0 : 0.0; };
    for (std::size_t k = 0; k < n_splats; ++k) {
        const std::uint32_t e = fwd.sorted[k];
        const auto& c = fwd.colors.colors[e];
        for (int ch = 0; ch < 3; ++ch) {
            cu.raw_color(ch, e) = total[k].color[0][ch] * in_range(c.raw_color[ch]);
            cu.enhanced_color(ch, e) = total[k].color[1][ch] * in_range(c.enhanced_color[ch]);
            cu.material(ch, e) = total[k].color[2][ch] * in_range(c.material[ch]);
        }
    }
    if (up.gamma.cols() != 0) {
        if (up.gamma.cols() != nb) throw InvalidParameter("render_backward: gamma gradient does not match visible set");
        cu.gamma = up.gamma;
    }
    auto cb = color_batch_backward(nets, fwd.colors, cu);

    SceneGrads out;
    out.gaussians.assign(cloud.size(), {});
    out.screen_grad_norm.assign(cloud.size(), 0.0);
    out.visible.assign(cloud.size(), false);
    out.nets = std::move(cb.nets);
    for (std::size_t k = 0; k < n_splats; ++k) {
        const std::uint32_t e = fwd.sorted[k];
        const std::size_t gi = fwd.colors.indices[e];
        const Gaussian& gauss = cloud[gi];
        ProjectionGrad pgrad;
        pgrad.mean2d = total[k].mean;
        pgrad.cov2d = total[k].cov;
        pgrad.view_dir = cb.view_dir.col(e);
        GaussianGrad gg = project_gaussian_backward(gauss, cam, pgrad);
        gg.position += cb.position.col(e);
        const double o = gauss.opacity();
        gg.opacity_logit = total[k].opacity * o * (1.0 - o);
        out.gaussians[gi] = gg;
        out.visible[gi] = true;
        out.screen_grad_norm[gi] =
            Vector2d(total[k].mean.x() * 0.5 * width, total[k].mean.y() * 0.5 * height).norm();
    }
    return out;
}

}  // namespace llgs
