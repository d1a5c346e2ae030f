#pragma once

// Shared scene generators and finite-difference helpers for the test suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "llgs/mcolor.hpp"
#include "llgs/rasterizer.hpp"
#include "llgs/scene.hpp"

namespace llgs::testing {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Vector4d random_quaternion(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector4d q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized();
}

/// Hamilton product of (w, x, y, z) quaternions, written out independently
/// of the library.
inline Vector4d quat_multiply(const Vector4d& a, const Vector4d& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

/// Camera at the origin looking down +z with a centered principal point.
inline CameraView make_camera(int width, int height, double focal = -1.0) {
    CameraView cam;
    cam.width = width;
    cam.height = height;
    const double f = focal > 0.0 ? focal : static_cast<double>(width);
    cam.intrinsics = {f, f, 0.5 * width, 0.5 * height};
    return cam;
}

/// Camera with a random orientation whose optical axis passes near `target`.
inline CameraView random_camera(Rng& rng, int width, int height, const Vector3d& target = Vector3d::Zero()) {
    CameraView cam = make_camera(width, height, uniform(rng, 0.8, 1.3) * width);
    const Matrix3d r = rotation_from_quaternion(random_quaternion(rng));
    const double dist = uniform(rng, 3.0, 5.0);
    // Camera centre sits `dist` behind the target along the camera's +z axis.
    const Vector3d forward = r.row(2).transpose();
    const Vector3d center = target - dist * forward;
    cam.world_to_camera.rotation = r;
    cam.world_to_camera.translation = -r * center;
    cam.intrinsics.cx += uniform(rng, -1.0, 1.0);
    cam.intrinsics.cy += uniform(rng, -1.0, 1.0);
    return cam;
}

/// Gaussian whose centre projects inside the image of `cam`.
inline Gaussian random_gaussian(Rng& rng, const CameraView& cam, double min_scale = 0.05, double max_scale = 0.4,
                                double min_opacity = 0.2, double max_opacity = 0.95) {
    const double z = uniform(rng, 2.0, 5.0);
    const double u = uniform(rng, 0.1, 0.9) * cam.width;
    const double v = uniform(rng, 0.1, 0.9) * cam.height;
    const Vector3d t((u - cam.intrinsics.cx) * z / cam.intrinsics.fx, (v - cam.intrinsics.cy) * z / cam.intrinsics.fy, z);
    Gaussian g;
    g.position = cam.world_to_camera.rotation.transpose() * (t - cam.world_to_camera.translation);
    g.rotation = random_quaternion(rng) * uniform(rng, 0.7, 1.4);
    for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(uniform(rng, min_scale, max_scale));
    g.opacity_logit = logit(uniform(rng, min_opacity, max_opacity));
    return g;
}

inline GaussianCloud random_cloud(Rng& rng, const CameraView& cam, int n, double min_scale = 0.05,
                                  double max_scale = 0.4) {
    GaussianCloud c;
    for (int i = 0; i < n; ++i) c.push_back(random_gaussian(rng, cam, min_scale, max_scale));
    return c;
}

/// Bounds enclosing the cloud (with margin), so positional encodings are
/// well conditioned.
inline SceneBounds bounds_of(const GaussianCloud& cloud) {
    std::vector<Vector3d> p;
    for (const auto& g : cloud) p.push_back(g.position);
    return SceneBounds::around(p, 0.1);
}

/// Default networks with the enhancement head perturbed so gamma and mu are
/// away from their initial values.
inline MColorNets random_nets(std::uint64_t seed, const SceneBounds& bounds = {}) {
    MColorNets n = MColorNets::create(bounds, seed);
    Rng rng(seed + 17);
    auto& last = n.enhance_net.layers.back();
    for (Eigen::Index i = 0; i < last.weight.size(); ++i) last.weight.data()[i] += uniform(rng, -0.3, 0.3);
    for (Eigen::Index i = 0; i < last.bias.size(); ++i) last.bias[i] += uniform(rng, -0.3, 0.3);
    return n;
}

/// Central difference of f with respect to the scalar x, restoring x.
inline double central_difference(const std::function<double()>& f, double& x, double h) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2.0 * h);
}

/// Central difference together with a bound on its rounding noise,
/// eps * |f| / h with headroom for cancellation inside f.
struct Difference {
    double value = 0.0;
    double noise = 0.0;
};

inline Difference central_difference_noise(const std::function<double()>& f, double& x, double h) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    constexpr double kHeadroom = 64.0;
    const double noise = kHeadroom * std::numeric_limits<double>::epsilon() * std::max(std::abs(fp), std::abs(fm)) / h;
    return {(fp - fm) / (2.0 * h), noise};
}

/// Relative error with a noise floor tied to the overall gradient magnitude.
inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Relative error where differences inside the finite-difference noise band
/// count as agreement: the floor is the noise divided by the tolerance.
inline double fd_relative_error(double analytic, const Difference& d, double tol) {
    return relative_error(analytic, d.value, d.noise / tol);
}

/// Every `stride`-th network parameter paired with its analytic gradient.
inline std::vector<std::pair<double*, double>> net_entries(MColorNets& n, const MColorGrads& g, int stride,
                                                          int offset = 0) {
    std::vector<std::pair<double*, double>> out;
    const std::array<std::pair<MlpParams*, const MlpGrads*>, 4> nets{
        {{&n.feature_net, &g.feature}, {&n.light_net, &g.light}, {&n.color_net, &g.color}, {&n.enhance_net, &g.enhance}}};
    int counter = offset;
    for (auto [p, gr] : nets) {
        for (std::size_t l = 0; l < p->layers.size(); ++l) {
            auto& layer = p->layers[l];
            for (Eigen::Index i = 0; i < layer.weight.size(); ++i)
                if (counter++ % stride == 0) out.emplace_back(layer.weight.data() + i, gr->weight[l].data()[i]);
            for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
                if (counter++ % stride == 0) out.emplace_back(layer.bias.data() + i, gr->bias[l][i]);
        }
    }
    return out;
}

struct GradientCheck {
    double worst = 0.0;
    int checked = 0;
    int unstable = 0;  // the difference quotient itself changed with the step
    std::vector<std::string> failures;
};

/// Compares analytic gradients with central differences. An entry that
/// disagrees is retried at a tenth of the step; if the two quotients also
/// disagree with each other the stencil straddles a kink and the entry is
/// counted as unstable rather than checked.
inline GradientCheck check_gradients(std::vector<std::pair<double*, double>> entries, const std::function<double()>& f,
                                     double h, double tol) {
    GradientCheck r;
    double scale = 1.0;
    for (const auto& [ptr, a] : entries) scale = std::max(scale, std::abs(a));
    const auto err = [&](double a, const Difference& d) {
        return relative_error(a, d.value, std::max(1e-6 * scale, d.noise / tol));
    };
    for (const auto& [ptr, a] : entries) {
        const auto d1 = central_difference_noise(f, *ptr, h);
        double e = err(a, d1);
        if (e > tol) {
            const auto d2 = central_difference_noise(f, *ptr, h / 10);
            const double e2 = err(a, d2);
            if (e2 > tol) {
                const double drift = relative_error(d1.value, d2.value, std::max(1e-6 * scale, d2.noise / tol));
                if (drift > tol) {
                    ++r.unstable;
                    continue;
                }
                r.failures.push_back("analytic " + std::to_string(a) + " numeric " + std::to_string(d1.value));
            }
            e = e2;
        }
        r.worst = std::max(r.worst, e);
        ++r.checked;
    }
    return r;
}

/// Random image with values in [lo, hi].
inline Image random_image(Rng& rng, int w, int h, int c = 3, double lo = 0.0, double hi = 1.0) {
    Image img(w, h, c);
    for (double& v : img.data) v = uniform(rng, lo, hi);
    return img;
}

inline double max_abs_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline double dot(const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

}  // namespace llgs::testing
