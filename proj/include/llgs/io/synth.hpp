#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

#include "llgs/io/dataset.hpp"
#include "llgs/io/png.hpp"
#include "llgs/preprocess.hpp"
#include "llgs/rasterizer.hpp"

namespace llgs::io {

inline constexpr double kDarkMeanLimit = 50.0 / 255.0;

struct SynthSpec {
    std::uint64_t seed = 7;
    int n_gaussians = 40;
    int n_views = 8;
    int resolution = 64;
    double darkness_gamma = 2.2;
    double noise_sigma = 0.01;
    std::size_t holdout_every = 4;
    double camera_distance = 3.2;

    void validate() const {
        if (n_views < 2) throw InvalidParameter("synth: n_views must be at least 2");
        if (n_gaussians < 1) throw InvalidParameter("synth: n_gaussians must be positive");
        if (resolution < 8) throw InvalidParameter("synth: resolution must be at least 8");
        if (!(darkness_gamma > 0.0)) throw InvalidParameter("synth: darkness gamma must be positive");
        if (!(noise_sigma >= 0.0)) throw InvalidParameter("synth: noise sigma must be nonnegative");
        if (!(camera_distance > 1.5)) throw InvalidParameter("synth: camera distance must exceed the scene radius");
    }
};

struct SynthResult {
    Dataset dataset;  // dark inputs as view images, bright images as references
    GaussianCloud ground_truth;
    std::vector<Vector3d> ground_truth_colors;
    double dark_mean = 0.0;
};

/// World-to-camera transform for a camera at `center` looking at `target`
/// (x right, y down, z forward).
inline RigidTransform look_at(const Vector3d& center, const Vector3d& target, const Vector3d& up = Vector3d::UnitZ()) {
    const Vector3d f = (target - center).normalized();
    Vector3d r = f.cross(up);
    if (r.norm() < 1e-9) r = f.cross(Vector3d::UnitX());
    r.normalize();
    const Vector3d d = f.cross(r);
    RigidTransform t;
    t.rotation.row(0) = r;
    t.rotation.row(1) = d;
    t.rotation.row(2) = f;
    t.translation = -t.rotation * center;
    return t;
}

/// Random desk-scale scene: Gaussians inside [-1,1]^3 with fixed colors,
/// cameras on a sphere around the origin, bright references, and inputs
/// darkened with the inverse power law plus noise.
inline SynthResult synth(const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    SynthResult res;
    for (int i = 0; i < spec.n_gaussians; ++i) {
        Gaussian g;
        for (int k = 0; k < 3; ++k) g.position[k] = -0.9 + 1.8 * unit(rng);
        for (int k = 0; k < 4; ++k) g.rotation[k] = normal(rng);
        g.rotation.normalize();
        for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(0.18 + 0.22 * unit(rng));
        g.opacity_logit = logit(0.7 + 0.25 * unit(rng));
        Vector3d c;
        const double base = 0.3 + 0.4 * unit(rng);
        for (int k = 0; k < 3; ++k) c[k] = std::clamp(base + 0.15 * normal(rng), 0.05, 0.95);
        res.ground_truth.push_back(g);
        res.ground_truth_colors.push_back(c);
    }

    Dataset& d = res.dataset;
    const double f = 1.1 * spec.resolution;
    const double c0 = 0.5 * spec.resolution;
    PreprocessConfig darken;
    darken.gamma_pre = 1.0 / spec.darkness_gamma;
    double dark_sum = 0.0;
    std::size_t dark_count = 0;
    for (int v = 0; v < spec.n_views; ++v) {
        const double azimuth = 2.0 * std::numbers::pi * (v + 0.3 * unit(rng)) / spec.n_views;
        const double elevation = -0.25 + 0.75 * unit(rng);
        const Vector3d center = spec.camera_distance * Vector3d(std::cos(elevation) * std::cos(azimuth),
                                                               std::cos(elevation) * std::sin(azimuth),
                                                               std::sin(elevation));
        CameraView cam;
        cam.world_to_camera = look_at(center, Vector3d::Zero());
        cam.intrinsics = {f, f, c0, c0};
        cam.width = cam.height = spec.resolution;

        const Image bright = quantized(render_fixed_colors(res.ground_truth, res.ground_truth_colors, cam), 16);
        Image dark = inverse_gamma(bright, darken);
        for (double& px : dark.data) px += spec.noise_sigma * normal(rng);
        dark = quantized(dark, 8);
        for (double px : dark.data) dark_sum += px;
        dark_count += dark.data.size();

        cam.input_image = std::move(dark);
        d.views.push_back(std::move(cam));
        d.references.push_back(bright);
        d.image_paths.emplace_back();
        d.reference_paths.emplace_back();
    }
    res.dark_mean = dark_sum / static_cast<double>(dark_count);
    if (!(res.dark_mean < kDarkMeanLimit)) {
        std::ostringstream msg;
        msg << "synth: mean dark intensity " << res.dark_mean * 255.0
            << "/255 is not below 50/255; use a stronger darkness gamma (currently " << spec.darkness_gamma << ")";
        throw InvalidParameter(msg.str());
    }

    for (std::size_t i = 0; i < res.ground_truth.size(); ++i) {
        InitPoint p;
        p.position = res.ground_truth[i].position;
        for (int k = 0; k < 3; ++k) p.position[k] += 0.05 * normal(rng);
        for (int k = 0; k < 3; ++k) p.color[k] = std::pow(res.ground_truth_colors[i][k], spec.darkness_gamma);
        d.points.push_back(p);
    }
    split_every(d, spec.holdout_every);
    d.recompute_bounds();
    return res;
}

}  // namespace llgs::io
