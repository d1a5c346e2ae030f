#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "llgs/core.hpp"

namespace llgs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation : std::uint8_t { relu = 0, sigmoid = 1, softplus = 2, linear = 3 };

struct Layer {
    MatrixXd weight;  // out x in
    VectorXd bias;    // out
    Activation activation = Activation::linear;
};

/// Fully connected network. Inputs and outputs are column vectors; batched
/// calls take one sample per column.
struct MlpParams {
    std::vector<Layer> layers;

    [[nodiscard]] int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
    [[nodiscard]] int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows()); }
    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }

    /// Throws InvalidParameter unless consecutive layer dimensions chain.
    void validate() const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].bias.size() != layers[i].weight.rows())
                throw InvalidParameter("mlp: bias length does not match layer output");
            if (i > 0 && layers[i].weight.cols() != layers[i - 1].weight.rows())
                throw InvalidParameter("mlp: layer dimensions do not chain");
        }
    }
};

/// Gradient / moment buffers shaped like MlpParams.
struct MlpGrads {
    std::vector<MatrixXd> weight;
    std::vector<VectorXd> bias;

    static MlpGrads zeros_like(const MlpParams& p) {
        MlpGrads g;
        for (const auto& l : p.layers) {
            g.weight.push_back(MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
            g.bias.push_back(VectorXd::Zero(l.bias.size()));
        }
        return g;
    }
    MlpGrads& operator+=(const MlpGrads& o) {
        for (std::size_t i = 0; i < weight.size(); ++i) {
            weight[i] += o.weight[i];
            bias[i] += o.bias[i];
        }
        return *this;
    }
};

struct MlpCache {
    std::vector<MatrixXd> inputs;  // input to each layer
    std::vector<MatrixXd> pre;     // pre-activation of each layer
};

namespace detail {

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::sigmoid: return sigmoid(x);
        case Activation::softplus: return softplus(x);
        case Activation::linear: return x;
    }
    return x;
}

inline double activate_derivative(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::sigmoid: {
            const double s = sigmoid(x);
            return s * (1.0 - s);
        }
        case Activation::softplus: return sigmoid(x);
        case Activation::linear: return 1.0;
    }
    return 1.0;
}

}  // namespace detail

inline MatrixXd mlp_forward(const MlpParams& params, const MatrixXd& input, MlpCache* cache = nullptr) {
    if (params.layers.empty()) throw InvalidParameter("mlp: no layers");
    if (input.rows() != params.input_dim())
        throw InvalidParameter("mlp: input length " + std::to_string(input.rows()) + " does not match first layer " +
                               std::to_string(params.input_dim()));
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    MatrixXd x = input;
    for (const auto& layer : params.layers) {
        if (layer.weight.cols() != x.rows()) throw InvalidParameter("mlp: layer dimensions do not chain");
        MatrixXd z = layer.weight * x;
        z.colwise() += layer.bias;
        if (cache) {
            cache->inputs.push_back(x);
            cache->pre.push_back(z);
        }
        x = z.unaryExpr([a = layer.activation](double v) { return detail::activate(a, v); });
    }
    return x;
}

inline VectorXd mlp_forward(const MlpParams& params, const VectorXd& input, MlpCache* cache = nullptr) {
    return mlp_forward(params, MatrixXd(input), cache);
}

struct MlpBackward {
    MlpGrads params;
    MatrixXd input;  // gradient w.r.t. the forward input, same shape
};

/// Exact reverse pass. Parameter gradients are summed over the batch columns.
inline MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, const MatrixXd& upstream) {
    const std::size_t n = params.layers.size();
    if (cache.inputs.size() != n || cache.pre.size() != n)
        throw InvalidState("mlp_backward: cache does not match network depth");
    const Eigen::Index batch = cache.inputs.front().cols();
    if (upstream.rows() != params.output_dim() || upstream.cols() != batch)
        throw InvalidState("mlp_backward: upstream shape does not match cached forward");
    for (std::size_t i = 0; i < n; ++i) {
        if (cache.inputs[i].rows() != params.layers[i].weight.cols() ||
            cache.pre[i].rows() != params.layers[i].weight.rows())
            throw InvalidState("mlp_backward: stale cache");
    }

    MlpBackward out;
    out.params = MlpGrads::zeros_like(params);
    MatrixXd grad = upstream;
    for (std::size_t k = n; k-- > 0;) {
        const auto& layer = params.layers[k];
        const MatrixXd dz =
            grad.cwiseProduct(cache.pre[k].unaryExpr([a = layer.activation](double v) {
                return detail::activate_derivative(a, v);
            }));
        out.params.weight[k] = dz * cache.inputs[k].transpose();
        out.params.bias[k] = dz.rowwise().sum();
        grad = layer.weight.transpose() * dz;
    }
    out.input = std::move(grad);
    return out;
}

/// Uniform(+-1/sqrt(fan_in)) initialization.
inline MlpParams make_mlp(std::span<const int> dims, std::span<const Activation> activations, std::mt19937_64& rng) {
    if (dims.size() < 2 || activations.size() != dims.size() - 1)
        throw InvalidParameter("make_mlp: need one activation per layer");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Layer l;
        l.weight.resize(dims[i + 1], dims[i]);
        l.bias.resize(dims[i + 1]);
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = dist(rng);
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = dist(rng);
        l.activation = activations[i];
        p.layers.push_back(std::move(l));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// In-place Adam on one tensor. Returns false (and leaves everything untouched)
/// when the gradient holds a non-finite value. `step` is the 1-based step count
/// used for bias correction.
inline bool adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, long step, double lr, const AdamConfig& cfg) {
    if (param.size() != grad.size() || m.size() != grad.size() || v.size() != grad.size())
        throw InvalidParameter("adam: shape mismatch");
    if (!all_finite(grad)) return false;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    return true;
}

namespace detail {
template <typename Derived>
std::span<double> as_span(Eigen::PlainObjectBase<Derived>& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename Derived>
std::span<const double> as_span(const Eigen::PlainObjectBase<Derived>& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}
}  // namespace detail

struct AdamState {
    MlpGrads m;
    MlpGrads v;
    long step = 0;
    AdamConfig config;
    long skipped_tensors = 0;

    static AdamState for_params(const MlpParams& p, double lr) {
        AdamState s;
        s.m = MlpGrads::zeros_like(p);
        s.v = MlpGrads::zeros_like(p);
        s.config.lr = lr;
        return s;
    }
};

inline void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state) {
    if (grads.weight.size() != params.layers.size() || state.m.weight.size() != params.layers.size())
        throw InvalidParameter("adam_step: shape mismatch");
    ++state.step;
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        auto& l = params.layers[i];
        if (grads.weight[i].rows() != l.weight.rows() || grads.weight[i].cols() != l.weight.cols() ||
            grads.bias[i].size() != l.bias.size())
            throw InvalidParameter("adam_step: gradient shape mismatch");
        if (!adam_update(detail::as_span(l.weight), detail::as_span(grads.weight[i]), detail::as_span(state.m.weight[i]),
                         detail::as_span(state.v.weight[i]), state.step, state.config.lr, state.config))
            ++state.skipped_tensors;
        if (!adam_update(detail::as_span(l.bias), detail::as_span(grads.bias[i]), detail::as_span(state.m.bias[i]),
                         detail::as_span(state.v.bias[i]), state.step, state.config.lr, state.config))
            ++state.skipped_tensors;
    }
}

// ---------------------------------------------------------------------------
// Positional encoding

inline constexpr int kEncodingFrequencies = 6;
inline constexpr int kEncodingDim = 3 + 2 * 3 * kEncodingFrequencies;

/// [p, sin(2^k pi p), cos(2^k pi p) for k = 0..L-1], axis-interleaved per band.
inline VectorXd positional_encoding(const Eigen::Vector3d& p) {
    VectorXd out(kEncodingDim);
    out.head<3>() = p;
    for (int k = 0; k < kEncodingFrequencies; ++k) {
        const double freq = std::ldexp(std::numbers::pi, k);
        for (int a = 0; a < 3; ++a) {
            out[3 + 6 * k + a] = std::sin(freq * p[a]);
            out[3 + 6 * k + 3 + a] = std::cos(freq * p[a]);
        }
    }
    return out;
}

/// Pulls a gradient on the encoding back to p.
inline Eigen::Vector3d positional_encoding_backward(const Eigen::Vector3d& p, const VectorXd& d_enc) {
    Eigen::Vector3d d = d_enc.head<3>();
    for (int k = 0; k < kEncodingFrequencies; ++k) {
        const double freq = std::ldexp(std::numbers::pi, k);
        for (int a = 0; a < 3; ++a) {
            d[a] += d_enc[3 + 6 * k + a] * freq * std::cos(freq * p[a]);
            d[a] -= d_enc[3 + 6 * k + 3 + a] * freq * std::sin(freq * p[a]);
        }
    }
    return d;
}

}  // namespace llgs
