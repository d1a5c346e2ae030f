#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <vector>

#include "llgs/core.hpp"

namespace llgs {

using Eigen::Matrix2d;
using Eigen::Matrix3d;
using Eigen::Vector2d;
using Eigen::Vector3d;
using Eigen::Vector4d;

/// One learnable Gaussian. Scale and opacity are stored unconstrained
/// (log-scale, pre-sigmoid logit) and activated at use. Quaternions are
/// stored (w, x, y, z) and normalized at use.
struct Gaussian {
    Vector3d position = Vector3d::Zero();
    Vector4d rotation = Vector4d(1.0, 0.0, 0.0, 0.0);
    Vector3d log_scale = Vector3d::Zero();
    double opacity_logit = 0.0;

    [[nodiscard]] Vector3d scale() const { return log_scale.array().exp().matrix(); }
    [[nodiscard]] double opacity() const { return sigmoid(opacity_logit); }
};

using GaussianCloud = std::vector<Gaussian>;

/// Gradient (or optimizer moment) with the same layout as Gaussian's stored
/// parameters.
struct GaussianGrad {
    Vector3d position = Vector3d::Zero();
    Vector4d rotation = Vector4d::Zero();
    Vector3d log_scale = Vector3d::Zero();
    double opacity_logit = 0.0;

    GaussianGrad& operator+=(const GaussianGrad& o) {
        position += o.position;
        rotation += o.rotation;
        log_scale += o.log_scale;
        opacity_logit += o.opacity_logit;
        return *this;
    }
};

/// x_cam = rotation * x_world + translation.
struct RigidTransform {
    Matrix3d rotation = Matrix3d::Identity();
    Vector3d translation = Vector3d::Zero();

    [[nodiscard]] Vector3d apply(const Vector3d& p) const { return rotation * p + translation; }
    [[nodiscard]] Vector3d camera_center() const { return -rotation.transpose() * translation; }
    [[nodiscard]] Eigen::Matrix4d matrix() const {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        m.topLeftCorner<3, 3>() = rotation;
        m.topRightCorner<3, 1>() = translation;
        return m;
    }
};

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
};

/// Pinhole camera, right-handed with +z forward. Pixel (i, j) is sampled at
/// image coordinate (i + 0.5, j + 0.5).
struct CameraView {
    RigidTransform world_to_camera;
    Intrinsics intrinsics;
    int width = 0;
    int height = 0;
    Image input_image;
    Image preprocessed_image;
};

inline constexpr double kOrthonormalTolerance = 1e-9;

inline bool is_orthonormal(const Matrix3d& r, double tol = kOrthonormalTolerance) {
    return ((r.transpose() * r - Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol) &&
           std::abs(r.determinant() - 1.0) <= tol;
}

/// Throws InvalidParameter when the pose is not a proper rotation or the
/// attached images disagree with the declared size. Empty images are allowed
/// (render-only poses).
inline void validate_camera(const CameraView& cam) {
    if (cam.width <= 0 || cam.height <= 0) throw InvalidParameter("camera: non-positive image size");
    if (!cam.world_to_camera.rotation.allFinite() || !cam.world_to_camera.translation.allFinite())
        throw InvalidParameter("camera: non-finite pose");
    if (!is_orthonormal(cam.world_to_camera.rotation))
        throw InvalidParameter("camera: world_to_camera rotation is not orthonormal");
    for (const Image* img : {&cam.input_image, &cam.preprocessed_image}) {
        if (!img->empty() && (img->width != cam.width || img->height != cam.height || img->channels != 3))
            throw InvalidParameter("camera: image does not match declared width/height");
    }
}

// ---------------------------------------------------------------------------
// Rotation and covariance

/// Rotation matrix of the normalized quaternion (w, x, y, z).
inline Matrix3d rotation_from_quaternion(const Vector4d& q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw InvalidParameter("quaternion must be finite and nonzero");
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Pulls dL/dR back to the raw (unnormalized) quaternion.
inline Vector4d rotation_from_quaternion_backward(const Vector4d& q, const Matrix3d& d) {
    const double n = q.norm();
    const Vector4d u = q / n;
    const double w = u[0], x = u[1], y = u[2], z = u[3];
    Vector4d du;
    du[0] = 2 * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1));
    du[1] = 2 * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - 2 * x * d(1, 1) - w * d(1, 2) + z * d(2, 0) +
                 w * d(2, 1) - 2 * x * d(2, 2));
    du[2] = 2 * (-2 * y * d(0, 0) + x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) - w * d(2, 0) +
                 z * d(2, 1) - 2 * y * d(2, 2));
    du[3] = 2 * (-2 * z * d(0, 0) - w * d(0, 1) + x * d(0, 2) + w * d(1, 0) - 2 * z * d(1, 1) + y * d(1, 2) +
                 x * d(2, 0) + y * d(2, 1));
    return (du - u * u.dot(du)) / n;
}

/// Sigma = R S S^T R^T with S = diag(scale).
inline Matrix3d covariance_from(const Vector4d& rotation, const Vector3d& scale) {
    if (!rotation.allFinite() || !scale.allFinite()) throw InvalidParameter("covariance_from: non-finite input");
    if ((scale.array() <= 0.0).any()) throw InvalidParameter("covariance_from: scale must be positive");
    const Matrix3d r = rotation_from_quaternion(rotation);
    const Vector3d s2 = scale.array().square();
    return r * s2.asDiagonal() * r.transpose();
}

struct CovarianceGrad {
    Vector4d rotation = Vector4d::Zero();
    Vector3d log_scale = Vector3d::Zero();
};

/// Given dL/dSigma (any 3x3), returns gradients on the raw quaternion and on
/// the log-scale.
inline CovarianceGrad covariance_backward(const Vector4d& rotation, const Vector3d& log_scale,
                                          const Matrix3d& d_sigma) {
    const Matrix3d r = rotation_from_quaternion(rotation);
    const Vector3d s2 = (2.0 * log_scale).array().exp();
    const Matrix3d g = d_sigma + d_sigma.transpose();
    const Matrix3d d_r = g * r * s2.asDiagonal();
    const Matrix3d rgr = r.transpose() * d_sigma * r;
    CovarianceGrad out;
    out.rotation = rotation_from_quaternion_backward(rotation, d_r);
    // d(s^2)/d(log s) = 2 s^2
    for (int k = 0; k < 3; ++k) out.log_scale[k] = rgr(k, k) * 2.0 * s2[k];
    return out;
}

// ---------------------------------------------------------------------------
// Projection

inline constexpr double kNearPlane = 0.01;
inline constexpr double kLowPass = 0.3;
/// Screen extent of a splat is where its alpha falls below this value.
inline constexpr double kExtentAlpha = 1e-10;

struct ProjectedGaussian {
    Vector2d mean2d = Vector2d::Zero();
    Matrix2d cov2d = Matrix2d::Identity();
    double depth = 0.0;
    Vector3d view_dir = Vector3d::UnitZ();
    /// Screen radius (pixels) beyond which alpha < kExtentAlpha.
    double radius = 0.0;
};

struct ProjectOptions {
    /// When false only the near-plane rule applies.
    bool screen_cull = true;
};

namespace detail {

struct ProjectionTerms {
    Vector3d t;
    Eigen::Matrix<double, 2, 3> jac;
    Matrix3d cov_cam;
};

inline ProjectionTerms projection_terms(const Gaussian& g, const CameraView& cam) {
    ProjectionTerms p;
    const Matrix3d& w = cam.world_to_camera.rotation;
    p.t = cam.world_to_camera.apply(g.position);
    const double z = p.t.z();
    const auto& in = cam.intrinsics;
    p.jac << in.fx / z, 0.0, -in.fx * p.t.x() / (z * z),
             0.0, in.fy / z, -in.fy * p.t.y() / (z * z);
    p.cov_cam = w * covariance_from(g.rotation, g.scale()) * w.transpose();
    return p;
}

}  // namespace detail

inline double splat_radius(const Matrix2d& cov2d, double opacity) {
    if (opacity <= kExtentAlpha) return 0.0;
    const double mid = 0.5 * (cov2d(0, 0) + cov2d(1, 1));
    const double det = cov2d(0, 0) * cov2d(1, 1) - cov2d(0, 1) * cov2d(1, 0);
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
    return std::sqrt(2.0 * lambda_max * std::log(opacity / kExtentAlpha));
}

/// Projects a Gaussian into the camera. Returns nullopt when the Gaussian is
/// at or behind the near plane, or (with screen_cull) when its footprint
/// misses the image entirely.
inline std::optional<ProjectedGaussian> project_gaussian(const Gaussian& g, const CameraView& cam,
                                                         ProjectOptions opts = {}) {
    const Vector3d t = cam.world_to_camera.apply(g.position);
    if (!(t.z() > kNearPlane)) return std::nullopt;
    const auto terms = detail::projection_terms(g, cam);
    const auto& in = cam.intrinsics;

    ProjectedGaussian out;
    out.depth = t.z();
    out.mean2d = Vector2d(in.fx * t.x() / t.z() + in.cx, in.fy * t.y() / t.z() + in.cy);
    out.cov2d = terms.jac * terms.cov_cam * terms.jac.transpose() + kLowPass * Matrix2d::Identity();
    const Vector3d rel = g.position - cam.world_to_camera.camera_center();
    out.view_dir = rel.normalized();
    out.radius = splat_radius(out.cov2d, g.opacity());

    if (opts.screen_cull) {
        const double r = out.radius;
        if (r <= 0.0 || out.mean2d.x() + r < 0.0 || out.mean2d.x() - r > cam.width ||
            out.mean2d.y() + r < 0.0 || out.mean2d.y() - r > cam.height)
            return std::nullopt;
    }
    return out;
}

struct ProjectionGrad {
    Vector2d mean2d = Vector2d::Zero();
    Matrix2d cov2d = Matrix2d::Zero();
    Vector3d view_dir = Vector3d::Zero();
};

/// Exact gradients of project_gaussian's mean2d / cov2d / view_dir outputs with
/// respect to the stored position, raw quaternion and log-scale. The opacity
/// entry of the result is left at zero.
inline GaussianGrad project_gaussian_backward(const Gaussian& g, const CameraView& cam,
                                              const ProjectionGrad& up) {
    const auto terms = detail::projection_terms(g, cam);
    const Matrix3d& w = cam.world_to_camera.rotation;
    const auto& in = cam.intrinsics;
    const double x = terms.t.x(), y = terms.t.y(), z = terms.t.z();
    const double z2 = z * z, z3 = z2 * z;
    const auto& jac = terms.jac;
    const Matrix3d& m = terms.cov_cam;
    const Matrix2d& gc = up.cov2d;

    const Eigen::Matrix<double, 2, 3> d_jac = gc * jac * m.transpose() + gc.transpose() * jac * m;
    const Matrix3d d_m = jac.transpose() * gc * jac;
    const Matrix3d d_sigma = w.transpose() * d_m * w;

    Vector3d d_t = Vector3d::Zero();
    d_t.x() += up.mean2d.x() * in.fx / z;
    d_t.y() += up.mean2d.y() * in.fy / z;
    d_t.z() += -up.mean2d.x() * in.fx * x / z2 - up.mean2d.y() * in.fy * y / z2;

    d_t.z() += d_jac(0, 0) * (-in.fx / z2);
    d_t.x() += d_jac(0, 2) * (-in.fx / z2);
    d_t.z() += d_jac(0, 2) * (2.0 * in.fx * x / z3);
    d_t.z() += d_jac(1, 1) * (-in.fy / z2);
    d_t.y() += d_jac(1, 2) * (-in.fy / z2);
    d_t.z() += d_jac(1, 2) * (2.0 * in.fy * y / z3);

    GaussianGrad out;
    out.position = w.transpose() * d_t;

    const Vector3d rel = g.position - cam.world_to_camera.camera_center();
    const double len = rel.norm();
    const Vector3d v = rel / len;
    out.position += (up.view_dir - v * v.dot(up.view_dir)) / len;

    const auto cg = covariance_backward(g.rotation, g.log_scale, d_sigma);
    out.rotation = cg.rotation;
    out.log_scale = cg.log_scale;
    return out;
}

}  // namespace llgs
