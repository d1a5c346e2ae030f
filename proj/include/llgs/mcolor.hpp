#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "llgs/core.hpp"
#include "llgs/mlp.hpp"
#include "llgs/scene.hpp"

namespace llgs {

using Matrix3Xd = Eigen::Matrix<double, 3, Eigen::Dynamic>;

inline constexpr int kFeatureDim = 64;
inline constexpr double kMuEpsilon = 1e-4;
inline constexpr double kMinExponentDenominator = 0.1;
inline constexpr double kDefaultGamma0 = 2.2;

/// Axis-aligned box used to map positions into [-1, 1]^3 before encoding.
struct SceneBounds {
    Vector3d min = Vector3d::Constant(-1.0);
    Vector3d max = Vector3d::Constant(1.0);

    [[nodiscard]] Vector3d extent() const { return (max - min).cwiseMax(1e-9); }
    [[nodiscard]] Vector3d normalize(const Vector3d& p) const {
        return (2.0 * (p - min).array() / extent().array() - 1.0).matrix();
    }
    /// d normalize / d p (diagonal).
    [[nodiscard]] Vector3d normalize_scale() const { return (2.0 / extent().array()).matrix(); }

    /// Box around the points, expanded by `margin` of its size on every side.
    static SceneBounds around(std::span<const Vector3d> points, double margin = 0.1) {
        SceneBounds b;
        if (points.empty()) return b;
        b.min = b.max = points.front();
        for (const auto& p : points) {
            b.min = b.min.cwiseMin(p);
            b.max = b.max.cwiseMax(p);
        }
        const Vector3d pad = ((b.max - b.min) * margin).cwiseMax(1e-3);
        b.min -= pad;
        b.max += pad;
        return b;
    }
};

/// Replaces the enhancement network's (gamma, mu) outputs with fixed values.
struct EnhancePin {
    Vector3d gamma = Vector3d::Zero();
    Vector3d mu = Vector3d::Ones();
};

struct MColorNets {
    MlpParams feature_net;  // encode(p) -> f
    MlpParams light_net;    // [f, view_dir] -> light
    MlpParams color_net;    // f -> material
    MlpParams enhance_net;  // light -> [gamma, mu_raw]
    double gamma0 = kDefaultGamma0;
    SceneBounds bounds;
    std::optional<EnhancePin> pin;

    void validate() const {
        if (!(gamma0 > 0.0)) throw InvalidParameter("mcolor: gamma0 must be positive");
        for (const MlpParams* p : {&feature_net, &light_net, &color_net, &enhance_net}) p->validate();
        if (feature_net.input_dim() != kEncodingDim || color_net.input_dim() != feature_net.output_dim() ||
            light_net.input_dim() != feature_net.output_dim() + 3 || color_net.output_dim() != 3 ||
            light_net.output_dim() != 3 || enhance_net.input_dim() != 3 || enhance_net.output_dim() != 6)
            throw InvalidParameter("mcolor: network shapes do not chain");
    }

    [[nodiscard]] std::size_t parameter_count() const {
        return feature_net.parameter_count() + light_net.parameter_count() + color_net.parameter_count() +
               enhance_net.parameter_count();
    }

    /// Default architecture with seeded uniform(+-1/sqrt(fan_in)) weights.
    /// Initial light is ~1 and the enhancement starts near gamma = 0, mu = 1.
    static MColorNets create(const SceneBounds& bounds, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        using A = Activation;
        MColorNets n;
        n.bounds = bounds;
        n.feature_net = make_mlp(std::array{kEncodingDim, 64, kFeatureDim}, std::array{A::relu, A::relu}, rng);
        n.light_net = make_mlp(std::array{kFeatureDim + 3, 64, 3}, std::array{A::relu, A::softplus}, rng);
        n.color_net = make_mlp(std::array{kFeatureDim, 64, 3}, std::array{A::relu, A::sigmoid}, rng);
        n.enhance_net = make_mlp(std::array{3, 32, 6}, std::array{A::relu, A::linear}, rng);
        n.light_net.layers.back().bias.setConstant(inverse_softplus(1.0));
        auto& last = n.enhance_net.layers.back();
        last.weight *= 0.01;
        last.bias.head<3>().setZero();
        last.bias.tail<3>().setConstant(inverse_softplus(1.0 - kMuEpsilon));
        return n;
    }
};

struct MColorGrads {
    MlpGrads feature;
    MlpGrads light;
    MlpGrads color;
    MlpGrads enhance;

    static MColorGrads zeros_like(const MColorNets& n) {
        return {MlpGrads::zeros_like(n.feature_net), MlpGrads::zeros_like(n.light_net),
                MlpGrads::zeros_like(n.color_net), MlpGrads::zeros_like(n.enhance_net)};
    }
    MColorGrads& operator+=(const MColorGrads& o) {
        feature += o.feature;
        light += o.light;
        color += o.color;
        enhance += o.enhance;
        return *this;
    }
};

struct GaussianColor {
    Vector3d material = Vector3d::Zero();
    Vector3d light = Vector3d::Zero();
    Vector3d enhanced_light = Vector3d::Zero();
    Vector3d raw_color = Vector3d::Zero();
    Vector3d enhanced_color = Vector3d::Zero();
    Vector3d gamma = Vector3d::Zero();
    Vector3d mu = Vector3d::Ones();
};

enum class RenderMode : std::uint8_t { raw, enhanced, both };

inline bool wants_enhanced(RenderMode m) { return m != RenderMode::raw; }
inline bool wants_raw(RenderMode m) { return m != RenderMode::enhanced; }

// ---------------------------------------------------------------------------
// Single-Gaussian operations

struct Decomposition {
    Vector3d material;
    Vector3d light;
};

inline Decomposition decompose(const Vector3d& position, const Vector3d& view_dir, const MColorNets& nets) {
    const VectorXd f = mlp_forward(nets.feature_net, positional_encoding(nets.bounds.normalize(position)));
    VectorXd light_in(f.size() + 3);
    light_in << f, view_dir;
    return {mlp_forward(nets.color_net, f), mlp_forward(nets.light_net, light_in)};
}

struct Enhancement {
    Vector3d enhanced_light;
    Vector3d gamma;
    Vector3d mu;
};

namespace detail {

inline Vector3d enhance_apply(const Vector3d& light, const Vector3d& gamma, const Vector3d& mu, double gamma0) {
    Vector3d out;
    for (int c = 0; c < 3; ++c) {
        const double denom = std::max(gamma0 + gamma[c], kMinExponentDenominator);
        out[c] = std::pow(light[c] / mu[c], 1.0 / denom);
    }
    return out;
}

}  // namespace detail

/// enhanced = (light / mu)^(1 / (gamma0 + gamma)) per channel, with
/// (gamma, mu_raw) from the enhancement network and mu = softplus(mu_raw) + eps.
inline Enhancement enhance_light(const Vector3d& light, const MColorNets& nets) {
    Enhancement e;
    if (nets.pin) {
        e.gamma = nets.pin->gamma;
        e.mu = nets.pin->mu;
    } else {
        const VectorXd out = mlp_forward(nets.enhance_net, VectorXd(light));
        e.gamma = out.head<3>();
        for (int c = 0; c < 3; ++c) e.mu[c] = softplus(out[3 + c]) + kMuEpsilon;
    }
    e.enhanced_light = detail::enhance_apply(light, e.gamma, e.mu, nets.gamma0);
    return e;
}

inline Vector3d compose(const Vector3d& material, const Vector3d& light) { return material.cwiseProduct(light); }

// ---------------------------------------------------------------------------
// Batched driver

/// Forward results for every non-culled Gaussian plus what the backward pass
/// needs.
struct ColorBatch {
    RenderMode mode = RenderMode::both;
    std::vector<std::size_t> indices;  // cloud index of each entry
    std::vector<GaussianColor> colors;
    Matrix3Xd positions;
    Matrix3Xd view_dirs;
    MlpCache feature_cache;
    MlpCache light_cache;
    MlpCache color_cache;
    MlpCache enhance_cache;
    Matrix3Xd mu_raw;

    [[nodiscard]] std::size_t size() const { return indices.size(); }
};

inline ColorBatch color_batch(const Matrix3Xd& positions, const Matrix3Xd& view_dirs, const MColorNets& nets,
                              RenderMode mode) {
    ColorBatch b;
    b.mode = mode;
    b.positions = positions;
    b.view_dirs = view_dirs;
    const Eigen::Index n = positions.cols();
    b.colors.resize(static_cast<std::size_t>(n));
    if (n == 0) return b;

    MatrixXd enc(kEncodingDim, n);
    for (Eigen::Index i = 0; i < n; ++i) enc.col(i) = positional_encoding(nets.bounds.normalize(positions.col(i)));
    const MatrixXd f = mlp_forward(nets.feature_net, enc, &b.feature_cache);
    MatrixXd light_in(f.rows() + 3, n);
    light_in << f, view_dirs;
    const MatrixXd material = mlp_forward(nets.color_net, f, &b.color_cache);
    const MatrixXd light = mlp_forward(nets.light_net, light_in, &b.light_cache);

    MatrixXd enh_out;
    if (wants_enhanced(mode) && !nets.pin) {
        enh_out = mlp_forward(nets.enhance_net, light, &b.enhance_cache);
        b.mu_raw = enh_out.bottomRows<3>();
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        auto& c = b.colors[static_cast<std::size_t>(i)];
        c.material = material.col(i);
        c.light = light.col(i);
        c.raw_color = compose(c.material, c.light);
        if (!wants_enhanced(mode)) continue;
        if (nets.pin) {
            c.gamma = nets.pin->gamma;
            c.mu = nets.pin->mu;
        } else {
            c.gamma = enh_out.col(i).head<3>();
            for (int k = 0; k < 3; ++k) c.mu[k] = softplus(enh_out(3 + k, i)) + kMuEpsilon;
        }
        c.enhanced_light = detail::enhance_apply(c.light, c.gamma, c.mu, nets.gamma0);
        c.enhanced_color = compose(c.material, c.enhanced_light);
    }
    return b;
}

/// Colors every Gaussian whose projection is present.
inline ColorBatch color_all(const GaussianCloud& cloud, std::span<const std::optional<ProjectedGaussian>> projections,
                            const MColorNets& nets, RenderMode mode) {
    if (projections.size() != cloud.size()) throw InvalidParameter("color_all: projections do not match cloud");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (projections[i]) idx.push_back(i);
    Matrix3Xd pos(3, static_cast<Eigen::Index>(idx.size()));
    Matrix3Xd dirs(3, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        pos.col(static_cast<Eigen::Index>(k)) = cloud[idx[k]].position;
        dirs.col(static_cast<Eigen::Index>(k)) = projections[idx[k]]->view_dir;
    }
    auto b = color_batch(pos, dirs, nets, mode);
    b.indices = std::move(idx);
    return b;
}

/// Upstream gradients per batch entry (3 x N each; zero-sized means none).
struct ColorUpstream {
    Matrix3Xd raw_color;
    Matrix3Xd enhanced_color;
    Matrix3Xd material;
    Matrix3Xd gamma;

    static ColorUpstream zeros(Eigen::Index n) {
        return {Matrix3Xd::Zero(3, n), Matrix3Xd::Zero(3, n), Matrix3Xd::Zero(3, n), Matrix3Xd::Zero(3, n)};
    }
};

struct ColorBackward {
    MColorGrads nets;
    Matrix3Xd position;
    Matrix3Xd view_dir;
};

inline ColorBackward color_batch_backward(const MColorNets& nets, const ColorBatch& b, const ColorUpstream& up) {
    const Eigen::Index n = static_cast<Eigen::Index>(b.colors.size());
    ColorBackward out;
    out.nets = MColorGrads::zeros_like(nets);
    out.position = Matrix3Xd::Zero(3, n);
    out.view_dir = Matrix3Xd::Zero(3, n);
    if (n == 0) return out;
    auto cols_ok = [n](const Matrix3Xd& m) { return m.cols() == 0 || m.cols() == n; };
    if (!cols_ok(up.raw_color) || !cols_ok(up.enhanced_color) || !cols_ok(up.material) || !cols_ok(up.gamma))
        throw InvalidState("color backward: upstream does not match batch");

    const bool enhanced = wants_enhanced(b.mode);
    MatrixXd d_material = MatrixXd::Zero(3, n);
    MatrixXd d_light = MatrixXd::Zero(3, n);
    MatrixXd d_enh_out = MatrixXd::Zero(6, n);

    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& c = b.colors[static_cast<std::size_t>(i)];
        Vector3d dm = Vector3d::Zero();
        Vector3d dl = Vector3d::Zero();
        if (up.material.cols()) dm += up.material.col(i);
        if (up.raw_color.cols()) {
            dm += up.raw_color.col(i).cwiseProduct(c.light);
            dl += up.raw_color.col(i).cwiseProduct(c.material);
        }
        if (enhanced) {
            Vector3d d_enh_light = Vector3d::Zero();
            if (up.enhanced_color.cols()) {
                dm += up.enhanced_color.col(i).cwiseProduct(c.enhanced_light);
                d_enh_light = up.enhanced_color.col(i).cwiseProduct(c.material);
            }
            Vector3d d_gamma = up.gamma.cols() ? Vector3d(up.gamma.col(i)) : Vector3d::Zero();
            Vector3d d_mu = Vector3d::Zero();
            for (int k = 0; k < 3; ++k) {
                const double denom_raw = nets.gamma0 + c.gamma[k];
                const double denom = std::max(denom_raw, kMinExponentDenominator);
                const double e = 1.0 / denom;
                const double base = c.light[k] / c.mu[k];
                const double out = c.enhanced_light[k];
                // d out / d base = e * base^(e-1)
                const double d_base = d_enh_light[k] * e * std::pow(base, e - 1.0);
                dl[k] += d_base / c.mu[k];
                d_mu[k] = -d_base * c.light[k] / (c.mu[k] * c.mu[k]);
                if (denom_raw > kMinExponentDenominator) {
                    const double d_e = d_enh_light[k] * out * std::log(base);
                    d_gamma[k] += -d_e / (denom * denom);
                }
            }
            if (!nets.pin) {
                d_enh_out.col(i).head<3>() = d_gamma;
                for (int k = 0; k < 3; ++k) d_enh_out(3 + k, i) = d_mu[k] * sigmoid(b.mu_raw(k, i));
            }
        }
        d_material.col(i) = dm;
        d_light.col(i) = dl;
    }

    if (enhanced && !nets.pin) {
        auto eb = mlp_backward(nets.enhance_net, b.enhance_cache, d_enh_out);
        out.nets.enhance = std::move(eb.params);
        d_light += eb.input;
    }
    auto lb = mlp_backward(nets.light_net, b.light_cache, d_light);
    out.nets.light = std::move(lb.params);
    auto cb = mlp_backward(nets.color_net, b.color_cache, d_material);
    out.nets.color = std::move(cb.params);
    MatrixXd d_f = cb.input + lb.input.topRows(kFeatureDim);
    out.view_dir = lb.input.bottomRows<3>();
    auto fb = mlp_backward(nets.feature_net, b.feature_cache, d_f);
    out.nets.feature = std::move(fb.params);

    const Vector3d norm_scale = nets.bounds.normalize_scale();
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector3d np = nets.bounds.normalize(b.positions.col(i));
        out.position.col(i) = positional_encoding_backward(np, fb.input.col(i)).cwiseProduct(norm_scale);
    }
    return out;
}

}  // namespace llgs
