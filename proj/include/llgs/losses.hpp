#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "llgs/core.hpp"
#include "llgs/mcolor.hpp"
#include "llgs/rasterizer.hpp"
#include "llgs/scene.hpp"

namespace llgs {

struct LossConfig {
    double e = 0.55;            // gray-world target level
    double lambda1 = 0.5;       // channel-variance weight
    double beta1 = 0.01;        // variance denominator offset
    double lambda2 = 0.01;      // gamma norm weight
    double lambda_ssim = 0.2;   // D-SSIM share of the image loss
    double w_color = 0.1;
    double w_grad = 0.1;

    void validate() const {
        for (double v : {e, lambda1, beta1, lambda2, lambda_ssim, w_color, w_grad})
            if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidParameter("loss config: values must be nonnegative");
        if (!(e > 0.0 && e < 1.0)) throw InvalidParameter("loss config: e must lie in (0,1)");
        if (lambda_ssim > 1.0) throw InvalidParameter("loss config: lambda_ssim must lie in [0,1]");
    }
};

/// A scalar loss and its gradient with respect to the first image argument.
struct ScalarWithGrad {
    double value = 0.0;
    Image grad;
};

// ---------------------------------------------------------------------------
// SSIM

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline std::array<double, kSsimWindow> ssim_kernel() {
    std::array<double, kSsimWindow> k{};
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double x = i - kSsimWindow / 2;
        k[i] = std::exp(-(x * x) / (2.0 * kSsimSigma * kSsimSigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

/// Separable Gaussian filter with zero padding and same-size output. The
/// kernel is symmetric, so this operator is its own adjoint.
inline std::vector<double> gaussian_blur(const std::vector<double>& plane, int w, int h) {
    static const auto k = ssim_kernel();
    constexpr int r = kSsimWindow / 2;
    std::vector<double> tmp(plane.size(), 0.0), out(plane.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) {
                const int xx = x + i;
                if (xx >= 0 && xx < w) s += k[i + r] * plane[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) {
                const int yy = y + i;
                if (yy >= 0 && yy < h) s += k[i + r] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    return out;
}

inline std::vector<double> channel_plane(const Image& img, int c) {
    std::vector<double> p(img.pixel_count());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * img.channels + c];
    return p;
}

}  // namespace detail

/// Mean local SSIM over all pixels and channels (11x11 Gaussian window,
/// sigma 1.5, zero padding), with the gradient with respect to `a`.
inline ScalarWithGrad ssim(const Image& a, const Image& b) {
    require_same_shape(a, b, "ssim");
    ScalarWithGrad out;
    out.grad = Image(a.width, a.height, a.channels);
    const int w = a.width, h = a.height;
    const std::size_t n = a.pixel_count();
    if (n == 0 || a.channels == 0) return out;
    const double inv_total = 1.0 / static_cast<double>(n * a.channels);

    double sum = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        const auto pa = detail::channel_plane(a, c);
        const auto pb = detail::channel_plane(b, c);
        std::vector<double> aa(n), bb(n), ab(n);
        for (std::size_t i = 0; i < n; ++i) {
            aa[i] = pa[i] * pa[i];
            bb[i] = pb[i] * pb[i];
            ab[i] = pa[i] * pb[i];
        }
        const auto mu_a = detail::gaussian_blur(pa, w, h);
        const auto mu_b = detail::gaussian_blur(pb, w, h);
        const auto e_aa = detail::gaussian_blur(aa, w, h);
        const auto e_bb = detail::gaussian_blur(bb, w, h);
        const auto e_ab = detail::gaussian_blur(ab, w, h);

        std::vector<double> g_mu(n), g_aa(n), g_ab(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
            const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            const double num_l = 2.0 * mu_a[i] * mu_b[i] + kSsimC1;
            const double num_c = 2.0 * cov + kSsimC2;
            const double den_l = mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kSsimC1;
            const double den_c = var_a + var_b + kSsimC2;
            const double s = (num_l * num_c) / (den_l * den_c);
            sum += s;

            const double d_mu_direct = 2.0 * mu_b[i] * num_c / (den_l * den_c) - s * 2.0 * mu_a[i] / den_l;
            const double d_var = -s / den_c;
            const double d_cov = 2.0 * num_l / (den_l * den_c);
            g_aa[i] = d_var * inv_total;
            g_ab[i] = d_cov * inv_total;
            g_mu[i] = (d_mu_direct + d_var * (-2.0 * mu_a[i]) + d_cov * (-mu_b[i])) * inv_total;
        }
        const auto bg_mu = detail::gaussian_blur(g_mu, w, h);
        const auto bg_aa = detail::gaussian_blur(g_aa, w, h);
        const auto bg_ab = detail::gaussian_blur(g_ab, w, h);
        for (std::size_t i = 0; i < n; ++i)
            out.grad.data[i * a.channels + c] = bg_mu[i] + 2.0 * pa[i] * bg_aa[i] + pb[i] * bg_ab[i];
    }
    out.value = sum * inv_total;
    return out;
}

// ---------------------------------------------------------------------------
// Sobel

inline constexpr double kSobelSmoothing = 1e-12;
inline constexpr std::array<std::array<double, 3>, 3> kSobelX{{{1, 0, -1}, {2, 0, -2}, {1, 0, -1}}};
inline constexpr std::array<std::array<double, 3>, 3> kSobelY{{{1, 2, 1}, {0, 0, 0}, {-1, -2, -1}}};

struct SobelResult {
    Image magnitude;  // sqrt(g1^2 + g2^2 + 1e-12)
    Image g1;
    Image g2;
};

/// Sobel gradient magnitude of a single-channel image. Kernel rows index the
/// vertical offset, columns the horizontal offset; borders replicate.
inline SobelResult sobel(const Image& img) {
    if (img.channels != 1) throw InvalidParameter("sobel: expects a single-channel image");
    const int w = img.width, h = img.height;
    SobelResult r{Image(w, h, 1), Image(w, h, 1), Image(w, h, 1)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double g1 = 0.0, g2 = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const double v = img.at(std::clamp(x + dx, 0, w - 1), std::clamp(y + dy, 0, h - 1));
                    g1 += kSobelX[dy + 1][dx + 1] * v;
                    g2 += kSobelY[dy + 1][dx + 1] * v;
                }
            r.g1.at(x, y) = g1;
            r.g2.at(x, y) = g2;
            r.magnitude.at(x, y) = std::sqrt(g1 * g1 + g2 * g2 + kSobelSmoothing);
        }
    return r;
}

inline Image sobel_backward(const SobelResult& fwd, const Image& d_magnitude) {
    const int w = fwd.magnitude.width, h = fwd.magnitude.height;
    Image d(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double m = fwd.magnitude.at(x, y);
            const double d1 = d_magnitude.at(x, y) * fwd.g1.at(x, y) / m;
            const double d2 = d_magnitude.at(x, y) * fwd.g2.at(x, y) / m;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    d.at(std::clamp(x + dx, 0, w - 1), std::clamp(y + dy, 0, h - 1)) +=
                        kSobelX[dy + 1][dx + 1] * d1 + kSobelY[dy + 1][dx + 1] * d2;
        }
    return d;
}

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

inline Image luminance(const Image& rgb) {
    if (rgb.channels != 3) throw InvalidParameter("luminance: expects RGB");
    Image y(rgb.width, rgb.height, 1);
    for (std::size_t i = 0; i < y.data.size(); ++i)
        y.data[i] = kLumaWeights[0] * rgb.data[3 * i] + kLumaWeights[1] * rgb.data[3 * i + 1] +
                    kLumaWeights[2] * rgb.data[3 * i + 2];
    return y;
}

// ---------------------------------------------------------------------------
// Losses

/// 1 - SSIM between the Sobel magnitudes of the luminances.
inline ScalarWithGrad gradient_loss(const Image& enhanced, const Image& input) {
    require_same_shape(enhanced, input, "gradient_loss");
    const auto ge = sobel(luminance(enhanced));
    const auto gi = sobel(luminance(input));
    const auto s = ssim(ge.magnitude, gi.magnitude);
    Image d_mag = s.grad;
    for (double& v : d_mag.data) v = -v;
    const Image d_lum = sobel_backward(ge, d_mag);
    ScalarWithGrad out;
    out.value = 1.0 - s.value;
    out.grad = Image(enhanced.width, enhanced.height, 3);
    for (std::size_t i = 0; i < d_lum.data.size(); ++i)
        for (int c = 0; c < 3; ++c) out.grad.data[3 * i + c] = kLumaWeights[c] * d_lum.data[i];
    return out;
}

/// (1 - lambda_ssim) * mean|a - b| + lambda_ssim * (1 - SSIM(a, b)) / 2.
inline ScalarWithGrad image_loss(const Image& rendered, const Image& target, const LossConfig& cfg) {
    require_same_shape(rendered, target, "image_loss");
    ScalarWithGrad out;
    out.grad = Image(rendered.width, rendered.height, rendered.channels);
    const std::size_t n = rendered.data.size();
    if (n == 0) return out;
    const double inv = 1.0 / static_cast<double>(n);
    double l1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = rendered.data[i] - target.data[i];
        l1 += std::abs(d);
        out.grad.data[i] = (1.0 - cfg.lambda_ssim) * inv * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    }
    l1 *= inv;
    out.value = (1.0 - cfg.lambda_ssim) * l1;
    if (cfg.lambda_ssim > 0.0) {
        const auto s = ssim(rendered, target);
        out.value += cfg.lambda_ssim * (1.0 - s.value) / 2.0;
        for (std::size_t i = 0; i < n; ++i) out.grad.data[i] -= cfg.lambda_ssim * 0.5 * s.grad.data[i];
    }
    return out;
}

struct GrayWorldResult {
    double value = 0.0;
    double term_level = 0.0;     // mean (C - e)^2
    double term_variance = 0.0;  // lambda1 * mean var_c(C) / (beta1 + var_c(material))
    double term_gamma = 0.0;     // lambda2 * mean |gamma|
    Image d_enhanced;
    Image d_material;
    Matrix3Xd d_gamma;
};

/// Gray-world colorimetric loss on the enhanced render. `gammas` holds one
/// enhancement gamma per Gaussian contributing to the view (3 x M).
inline GrayWorldResult gray_world_loss(const Image& enhanced, const Image& material, const Matrix3Xd& gammas,
                                       const LossConfig& cfg) {
    require_same_shape(enhanced, material, "gray_world_loss");
    if (enhanced.channels != 3) throw InvalidParameter("gray_world_loss: expects RGB");
    GrayWorldResult r;
    r.d_enhanced = Image(enhanced.width, enhanced.height, 3);
    r.d_material = Image(enhanced.width, enhanced.height, 3);
    r.d_gamma = Matrix3Xd::Zero(3, gammas.cols());
    const std::size_t n = enhanced.pixel_count();
    if (n > 0) {
        const double inv_n = 1.0 / static_cast<double>(n);
        const double inv_3n = inv_n / 3.0;
        for (std::size_t p = 0; p < n; ++p) {
            const double* c = &enhanced.data[3 * p];
            const double* m = &material.data[3 * p];
            const double c_mean = (c[0] + c[1] + c[2]) / 3.0;
            const double m_mean = (m[0] + m[1] + m[2]) / 3.0;
            double c_var = 0.0, m_var = 0.0;
            for (int k = 0; k < 3; ++k) {
                r.term_level += (c[k] - cfg.e) * (c[k] - cfg.e);
                r.d_enhanced.data[3 * p + k] = 2.0 * (c[k] - cfg.e) * inv_3n;
                c_var += (c[k] - c_mean) * (c[k] - c_mean);
                m_var += (m[k] - m_mean) * (m[k] - m_mean);
            }
            c_var /= 3.0;
            m_var /= 3.0;
            const double denom = cfg.beta1 + m_var;
            r.term_variance += c_var / denom;
            for (int k = 0; k < 3; ++k) {
                r.d_enhanced.data[3 * p + k] += cfg.lambda1 * inv_n * (2.0 / 3.0) * (c[k] - c_mean) / denom;
                r.d_material.data[3 * p + k] =
                    -cfg.lambda1 * inv_n * c_var / (denom * denom) * (2.0 / 3.0) * (m[k] - m_mean);
            }
        }
        r.term_level *= inv_3n;
        r.term_variance *= cfg.lambda1 * inv_n;
    }
    if (gammas.cols() > 0) {
        const double inv_m = 1.0 / static_cast<double>(gammas.cols());
        for (Eigen::Index i = 0; i < gammas.cols(); ++i) {
            const double norm = gammas.col(i).norm();
            r.term_gamma += norm;
            if (norm > 0.0) r.d_gamma.col(i) = cfg.lambda2 * inv_m * gammas.col(i) / norm;
        }
        r.term_gamma *= cfg.lambda2 * inv_m;
    }
    r.value = r.term_level + r.term_variance + r.term_gamma;
    return r;
}

struct LossReport {
    double l_color = 0.0;
    double l_grad = 0.0;
    double l_image = 0.0;
    double total = 0.0;
    RenderUpstream upstream;  // gradients on I_r, I_e, material map and gamma
};

inline Matrix3Xd gamma_matrix(const RenderOutput& out) {
    Matrix3Xd g(3, static_cast<Eigen::Index>(out.colors.size()));
    for (std::size_t i = 0; i < out.colors.size(); ++i) g.col(static_cast<Eigen::Index>(i)) = out.colors.colors[i].gamma;
    return g;
}

/// total = image_loss(I_r, I_g) + w_color * gray_world(I_e, ...) + w_grad * gradient_loss(I_e, I).
/// Component values are always reported; gradients flow only through terms
/// with nonzero weight.
inline LossReport total_loss(const RenderOutput& out, const CameraView& view, const LossConfig& cfg) {
    if (out.mode != RenderMode::both) throw InvalidState("total_loss: render must use mode=both");
    const auto img = image_loss(out.image_raw, view.preprocessed_image, cfg);
    const auto gw = gray_world_loss(out.image_enhanced, out.material_map, gamma_matrix(out), cfg);
    const auto gl = gradient_loss(out.image_enhanced, view.input_image);

    LossReport r;
    r.l_image = img.value;
    r.l_color = gw.value;
    r.l_grad = gl.value;
    r.total = r.l_image + cfg.w_color * r.l_color + cfg.w_grad * r.l_grad;

    r.upstream.raw = img.grad;
    r.upstream.enhanced = Image(out.image_enhanced.width, out.image_enhanced.height, 3);
    r.upstream.material = Image(out.material_map.width, out.material_map.height, 3);
    r.upstream.gamma = Matrix3Xd::Zero(3, gw.d_gamma.cols());
    if (cfg.w_color > 0.0) {
        for (std::size_t i = 0; i < r.upstream.enhanced.data.size(); ++i) {
            r.upstream.enhanced.data[i] += cfg.w_color * gw.d_enhanced.data[i];
            r.upstream.material.data[i] += cfg.w_color * gw.d_material.data[i];
        }
        r.upstream.gamma = cfg.w_color * gw.d_gamma;
    }
    if (cfg.w_grad > 0.0)
        for (std::size_t i = 0; i < r.upstream.enhanced.data.size(); ++i)
            r.upstream.enhanced.data[i] += cfg.w_grad * gl.grad.data[i];
    return r;
}

}  // namespace llgs
