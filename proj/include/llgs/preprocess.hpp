#pragma once

#include <algorithm>
#include <cmath>

#include "llgs/core.hpp"

namespace llgs {

/// Power-law brightening applied to training inputs: v -> A * v^gamma.
struct PreprocessConfig {
    double gain = 1.0;               // A
    double gamma_pre = 1.0 / 2.2;    // gamma
    bool enabled = true;

    void validate() const {
        if (!(gain > 0.0) || !std::isfinite(gain)) throw InvalidParameter("preprocess: gain must be positive");
        if (!(gamma_pre > 0.0) || !std::isfinite(gamma_pre))
            throw InvalidParameter("preprocess: gamma must be positive");
    }
};

inline double gamma_correct(double v, const PreprocessConfig& cfg) {
    return std::clamp(cfg.gain * std::pow(v, cfg.gamma_pre), 0.0, 1.0);
}

/// Exact inverse of gamma_correct wherever the forward map did not clamp.
inline double inverse_gamma(double v, const PreprocessConfig& cfg) {
    return std::pow(v / cfg.gain, 1.0 / cfg.gamma_pre);
}

inline Image gamma_correct(const Image& img, const PreprocessConfig& cfg) {
    cfg.validate();
    Image out = img;
    for (double& v : out.data) v = gamma_correct(v, cfg);
    return out;
}

inline Image inverse_gamma(const Image& img, const PreprocessConfig& cfg) {
    cfg.validate();
    Image out = img;
    for (double& v : out.data) v = inverse_gamma(v, cfg);
    return out;
}

/// The training target for an input: gamma-corrected, or the input itself
/// when preprocessing is disabled.
inline Image preprocess_input(const Image& img, const PreprocessConfig& cfg) {
    return cfg.enabled ? gamma_correct(img, cfg) : img;
}

}  // namespace llgs
