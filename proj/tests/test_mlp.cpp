#include <gtest/gtest.h>

#include <array>
#include <limits>
#include <set>

#include "llgs/mlp.hpp"
#include "support.hpp"

using namespace llgs;
using namespace llgs::testing;

namespace {

MlpParams single_layer(const MatrixXd& w, const VectorXd& b, Activation a = Activation::linear) {
    MlpParams p;
    p.layers.push_back({w, b, a});
    return p;
}

// Straight-line evaluation with explicit loops.
VectorXd reference_forward(const MlpParams& p, const VectorXd& input) {
    std::vector<double> x(input.data(), input.data() + input.size());
    for (const auto& l : p.layers) {
        std::vector<double> y(static_cast<std::size_t>(l.weight.rows()));
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
            double s = l.bias[r];
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) s += l.weight(r, c) * x[static_cast<std::size_t>(c)];
            switch (l.activation) {
                case Activation::relu: s = s > 0 ? s : 0; break;
                case Activation::sigmoid: s = 1.0 / (1.0 + std::exp(-s)); break;
                case Activation::softplus: s = std::log(1.0 + std::exp(s)); break;
                case Activation::linear: break;
            }
            y[static_cast<std::size_t>(r)] = s;
        }
        x = std::move(y);
    }
    return Eigen::Map<VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
}

MlpParams random_net(Rng& rng, std::span<const int> dims, std::span<const Activation> acts) {
    return make_mlp(dims, acts, rng);
}

}  // namespace

TEST(MlpForward, IdentityLinearLayer) {
    const MlpParams p = single_layer(MatrixXd::Identity(4, 4), VectorXd::Zero(4));
    const VectorXd x = (VectorXd(4) << 0.3, -1.2, 5.0, 0.0).finished();
    EXPECT_EQ(mlp_forward(p, x), x);
}

TEST(MlpForward, ZeroWeightsReturnBias) {
    Rng rng(1);
    const VectorXd b = (VectorXd(3) << 0.5, -0.25, 2.0).finished();
    const MlpParams p = single_layer(MatrixXd::Zero(3, 5), b);
    EXPECT_EQ(mlp_forward(p, VectorXd(VectorXd::Random(5))), b);
}

TEST(MlpForward, MatchesStraightLineEvaluation) {
    Rng rng(2);
    using A = Activation;
    const std::array<int, 4> dims{7, 16, 12, 5};
    for (int trial = 0; trial < 50; ++trial) {
        const std::array<A, 3> acts{A(trial % 4), A((trial / 4) % 4), A((trial / 16) % 4)};
        const MlpParams p = random_net(rng, dims, acts);
        VectorXd x(7);
        for (auto& v : x) v = uniform(rng, -2, 2);
        const VectorXd got = mlp_forward(p, x);
        const VectorXd want = reference_forward(p, x);
        EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(MlpForward, BatchedColumnsMatchSingleCalls) {
    Rng rng(3);
    using A = Activation;
    const std::array<int, 3> dims{5, 8, 3};
    const std::array<A, 2> acts{A::relu, A::softplus};
    const MlpParams p = random_net(rng, dims, acts);
    const MatrixXd x = MatrixXd::Random(5, 9);
    const MatrixXd batched = mlp_forward(p, x);
    for (Eigen::Index c = 0; c < x.cols(); ++c)
        EXPECT_LT((batched.col(c) - mlp_forward(p, VectorXd(x.col(c)))).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(MlpForward, DimensionMismatchThrows) {
    const MlpParams p = single_layer(MatrixXd::Identity(3, 3), VectorXd::Zero(3));
    EXPECT_THROW(mlp_forward(p, VectorXd(VectorXd::Zero(4))), InvalidParameter);
}

TEST(MlpParamsShape, ValidateDetectsBrokenChain) {
    MlpParams p;
    p.layers.push_back({MatrixXd::Zero(4, 3), VectorXd::Zero(4), Activation::relu});
    p.layers.push_back({MatrixXd::Zero(2, 5), VectorXd::Zero(2), Activation::linear});
    EXPECT_THROW(p.validate(), InvalidParameter);
    p.layers[1].weight = MatrixXd::Zero(2, 4);
    EXPECT_NO_THROW(p.validate());
    p.layers[1].bias = VectorXd::Zero(3);
    EXPECT_THROW(p.validate(), InvalidParameter);
}

TEST(MlpBackward, ZeroUpstreamGivesZeroGradients) {
    Rng rng(4);
    using A = Activation;
    const std::array<int, 3> dims{4, 6, 2};
    const std::array<A, 2> acts{A::sigmoid, A::linear};
    const MlpParams p = random_net(rng, dims, acts);
    MlpCache cache;
    mlp_forward(p, VectorXd(VectorXd::Random(4)), &cache);
    const auto b = mlp_backward(p, cache, MatrixXd::Zero(2, 1));
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        EXPECT_EQ(b.params.weight[i].cwiseAbs().maxCoeff(), 0.0);
        EXPECT_EQ(b.params.bias[i].cwiseAbs().maxCoeff(), 0.0);
    }
    EXPECT_EQ(b.input.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MlpBackward, LinearLayerWeightGradientIsOuterProduct) {
    Rng rng(5);
    const MlpParams p = single_layer(MatrixXd::Random(3, 4), VectorXd::Random(3));
    const VectorXd x = VectorXd::Random(4);
    const VectorXd u = VectorXd::Random(3);
    MlpCache cache;
    mlp_forward(p, x, &cache);
    const auto b = mlp_backward(p, cache, u);
    EXPECT_LT((b.params.weight[0] - u * x.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((b.params.bias[0] - u).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((b.input - p.layers[0].weight.transpose() * u).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MlpBackward, StaleCacheThrows) {
    Rng rng(6);
    using A = Activation;
    const std::array<int, 3> d1{4, 6, 2}, d2{4, 5, 2};
    const std::array<A, 2> acts{A::relu, A::linear};
    const MlpParams p1 = random_net(rng, d1, acts);
    const MlpParams p2 = random_net(rng, d2, acts);
    MlpCache cache;
    mlp_forward(p1, VectorXd(VectorXd::Random(4)), &cache);
    EXPECT_THROW(mlp_backward(p2, cache, MatrixXd::Zero(2, 1)), InvalidState);
    EXPECT_THROW(mlp_backward(p1, cache, MatrixXd::Zero(3, 1)), InvalidState);
    EXPECT_THROW(mlp_backward(p1, MlpCache{}, MatrixXd::Zero(2, 1)), InvalidState);
}

// Finite differences over every parameter and input of random networks,
// covering the layer shapes used by the color model.
TEST(MlpBackward, MatchesFiniteDifferences) {
    Rng rng(7);
    using A = Activation;
    struct Shape {
        std::vector<int> dims;
        std::vector<A> acts;
    };
    const std::vector<Shape> shapes = {
        {{kEncodingDim, 64, 64}, {A::relu, A::relu}}, {{64, 64, 3}, {A::relu, A::sigmoid}},
        {{67, 64, 3}, {A::relu, A::softplus}},        {{3, 32, 6}, {A::relu, A::linear}},
        {{5, 7, 6, 4}, {A::softplus, A::sigmoid, A::linear}},
    };
    const double h = 1e-6;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Shape& s = shapes[static_cast<std::size_t>(trial) % shapes.size()];
        MlpParams p = make_mlp(s.dims, s.acts, rng);
        const Eigen::Index batch = 1 + trial % 3;
        MatrixXd x(s.dims.front(), batch);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -1, 1);
        MatrixXd u(s.dims.back(), batch);
        for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = uniform(rng, -1, 1);

        const auto objective = [&] { return (mlp_forward(p, x).array() * u.array()).sum(); };
        MlpCache cache;
        mlp_forward(p, x, &cache);
        const auto g = mlp_backward(p, cache, u);

        std::vector<std::pair<double*, double>> checks;
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            auto& layer = p.layers[l];
            // Large first layers: sample entries instead of all of them.
            const Eigen::Index stride = layer.weight.size() > 600 ? 37 : 1;
            for (Eigen::Index i = 0; i < layer.weight.size(); i += stride)
                checks.emplace_back(layer.weight.data() + i, g.params.weight[l].data()[i]);
            for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
                checks.emplace_back(layer.bias.data() + i, g.params.bias[l][i]);
        }
        for (Eigen::Index i = 0; i < x.size(); ++i) checks.emplace_back(x.data() + i, g.input.data()[i]);

        double scale = 1.0;
        for (const auto& [ptr, a] : checks) scale = std::max(scale, std::abs(a));
        for (const auto& [ptr, a] : checks) {
            // Skip entries whose step would cross a relu kink.
            const auto n = central_difference_noise(objective, *ptr, h);
            const double e = relative_error(a, n.value, std::max(1e-6 * scale, n.noise / 1e-5));
            if (e > 1e-5) {
                const auto n2 = central_difference_noise(objective, *ptr, h / 10);
                if (relative_error(a, n2.value, std::max(1e-6 * scale, n2.noise / 1e-5)) > 1e-5 &&
                    std::abs(n.value - n2.value) < 1e-7 * scale)
                    ADD_FAILURE() << "trial " << trial << " analytic " << a << " numeric " << n.value;
                continue;
            }
            worst = std::max(worst, e);
        }
    }
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Rng rng(8);
    using A = Activation;
    const std::array<int, 3> dims{3, 4, 2};
    const std::array<A, 2> acts{A::relu, A::linear};
    MlpParams p = random_net(rng, dims, acts);
    const MlpParams before = p;
    AdamState st = AdamState::for_params(p, 0.1);
    for (int i = 0; i < 10; ++i) adam_step(p, MlpGrads::zeros_like(p), st);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        EXPECT_EQ(p.layers[l].weight, before.layers[l].weight);
        EXPECT_EQ(p.layers[l].bias, before.layers[l].bias);
    }
    EXPECT_EQ(st.step, 10);
}

TEST(Adam, FirstStepClosedForm) {
    const double lr = 0.05;
    const AdamConfig cfg;
    for (double g : {3.0, -0.2, 1e-3, -7.5}) {
        std::array<double, 1> w{1.0}, m{0.0}, v{0.0};
        const std::array<double, 1> grad{g};
        ASSERT_TRUE(adam_update(w, grad, m, v, 1, lr, cfg));
        EXPECT_NEAR(w[0] - 1.0, -lr * g / (std::abs(g) + cfg.eps), 1e-15);
    }
}

TEST(Adam, ConvergesOnQuadratic) {
    MlpParams p = single_layer(MatrixXd::Constant(1, 1, 1.0), VectorXd::Zero(1));
    AdamState st = AdamState::for_params(p, 0.1);
    for (int i = 0; i < 1000; ++i) {
        MlpGrads g = MlpGrads::zeros_like(p);
        g.weight[0](0, 0) = 2.0 * p.layers[0].weight(0, 0);
        adam_step(p, g, st);
    }
    EXPECT_LT(std::abs(p.layers[0].weight(0, 0)), 1e-3);
}

TEST(Adam, NonFiniteGradientSkipsOnlyThatTensor) {
    MlpParams p = single_layer(MatrixXd::Constant(2, 2, 1.0), VectorXd::Constant(2, 1.0));
    AdamState st = AdamState::for_params(p, 0.1);
    MlpGrads g = MlpGrads::zeros_like(p);
    g.weight[0](1, 0) = std::numeric_limits<double>::quiet_NaN();
    g.bias[0].setConstant(1.0);
    adam_step(p, g, st);
    EXPECT_EQ(st.skipped_tensors, 1);
    EXPECT_EQ(p.layers[0].weight, MatrixXd::Constant(2, 2, 1.0));
    EXPECT_LT(p.layers[0].bias.maxCoeff(), 1.0);
    EXPECT_TRUE(p.layers[0].weight.allFinite());
    EXPECT_TRUE(st.m.weight[0].allFinite());
}

TEST(Adam, StepCountIncreases) {
    MlpParams p = single_layer(MatrixXd::Constant(1, 1, 1.0), VectorXd::Zero(1));
    AdamState st = AdamState::for_params(p, 0.1);
    for (long i = 1; i <= 5; ++i) {
        adam_step(p, MlpGrads::zeros_like(p), st);
        EXPECT_EQ(st.step, i);
    }
}

TEST(PositionalEncoding, ZeroInput) {
    const VectorXd e = positional_encoding(Eigen::Vector3d::Zero());
    ASSERT_EQ(e.size(), 39);
    EXPECT_EQ(kEncodingDim, 39);
    for (int k = 0; k < kEncodingFrequencies; ++k)
        for (int a = 0; a < 3; ++a) {
            EXPECT_EQ(e[3 + 6 * k + a], 0.0);
            EXPECT_EQ(e[3 + 6 * k + 3 + a], 1.0);
        }
    EXPECT_EQ(e.head<3>().cwiseAbs().maxCoeff(), 0.0);
}

TEST(PositionalEncoding, InjectiveOnGrid) {
    std::set<std::vector<double>> seen;
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j)
            for (int k = 0; k < 10; ++k) {
                const Eigen::Vector3d p(-1 + 2.0 * i / 9, -1 + 2.0 * j / 9, -1 + 2.0 * k / 9);
                const VectorXd e = positional_encoding(p);
                seen.insert(std::vector<double>(e.data(), e.data() + e.size()));
            }
    EXPECT_EQ(seen.size(), 1000u);
}

TEST(PositionalEncoding, BackwardMatchesFiniteDifferences) {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::Vector3d p(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
        VectorXd u(kEncodingDim);
        for (auto& v : u) v = uniform(rng, -1, 1);
        const Eigen::Vector3d g = positional_encoding_backward(p, u);
        for (int a = 0; a < 3; ++a) {
            const double n = central_difference([&] { return positional_encoding(p).dot(u); }, p[a], 1e-6);
            EXPECT_LE(relative_error(g[a], n, 1e-6 * std::max(1.0, g.cwiseAbs().maxCoeff())), 1e-5);
        }
    }
}
