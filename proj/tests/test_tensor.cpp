#include <gtest/gtest.h>

#include <cmath>

#include "kp3d/conv.hpp"
#include "kp3d/gradcheck_suite.hpp"
#include "kp3d/optim.hpp"
#include "kp3d/tensor.hpp"

using namespace kp3d;

using FT = Tensor<float>;
using DT = Tensor<double>;

TEST(TensorOps, AddFixture) {
    FT a = FT::from({2}, {1.0f, 2.0f});
    FT b = FT::from({2}, {3.0f, 4.0f});
    FT c = add(a, b);
    EXPECT_FLOAT_EQ(c.data()[0], 4.0f);
    EXPECT_FLOAT_EQ(c.data()[1], 6.0f);
}

TEST(TensorOps, SoftplusAtZeroIsLn2) {
    DT x = DT::scalar(0.0);
    DT y = softplus(x);
    EXPECT_NEAR(y.item(), std::log(2.0), 1e-12);
}

TEST(TensorOps, ShapeMismatchThrows) {
    FT a = FT::zeros({2});
    FT b = FT::zeros({3});
    EXPECT_THROW(add(a, b), ContractViolation);
    EXPECT_THROW(mul(a, b), ContractViolation);
}

TEST(TensorOps, ReshapeAndSlicePreserveData) {
    DT a = DT::from({2, 3}, {1, 2, 3, 4, 5, 6});
    DT r = reshape(a, {3, 2});
    EXPECT_EQ(r.shape(), Shape({3, 2}));
    EXPECT_EQ(r.data(), a.data());
    DT s = slice0(a, 1, 1);
    EXPECT_EQ(s.shape(), Shape({1, 3}));
    EXPECT_DOUBLE_EQ(s.data()[0], 4);
    EXPECT_DOUBLE_EQ(s.data()[2], 6);
}

TEST(TensorOps, SoftmaxVecNormalizes) {
    DT x = DT::from({3}, {0.3, -1.2, 2.0});
    DT y = softmax_vec(x);
    double total = 0;
    for (double v : y.data()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(TensorBackward, SumGradientIsOnes) {
    DT x = DT::from({3}, {1.0, -2.0, 0.5}, true);
    DT loss = sum(x);
    backward(loss);
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(TensorBackward, MulProductRule) {
    DT x = DT::from({2}, {2.0, 3.0}, true);
    DT y = DT::from({2}, {5.0, -1.0}, true);
    DT loss = sum(mul(x, y));
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
    EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(y.grad()[1], 3.0);
}

TEST(TensorBackward, RepeatedBackwardAccumulates) {
    DT x = DT::from({2}, {1.0, 4.0}, true);
    DT loss = sum(square(x));  // grad = 2x
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
    backward(loss);  // accumulates, no implicit zeroing
    EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 16.0);
    x.zero_grad();
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(TensorBackward, SharedSubexpressionGradOnce) {
    // loss = sum(x + x) -> grad 2
    DT x = DT::from({2}, {1.0, 2.0}, true);
    DT loss = sum(add(x, x));
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(TensorBackward, StopGradientProductRule) {
    // d/dx sum(x * sg(x)) = sg(x) = x, evaluated at x = [2] -> [2]
    DT x = DT::from({1}, {2.0}, true);
    DT loss = sum(mul(x, stop_gradient(x)));
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(loss.item(), 4.0);
}

TEST(TensorBackward, StopGradientBlocksPath) {
    DT x = DT::from({2}, {1.0, -3.0}, true);
    DT loss = sum(stop_gradient(square(x)));
    EXPECT_FALSE(loss.requires_grad());
    backward(loss);  // no-op
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(TensorBackward, NoGradGuardDisablesRecording) {
    DT x = DT::from({2}, {1.0, 2.0}, true);
    {
        NoGradGuard ng;
        DT y = square(x);
        EXPECT_FALSE(y.requires_grad());
    }
    DT y = square(x);
    EXPECT_TRUE(y.requires_grad());
}

TEST(TensorBackward, ScalarLossRequired) {
    DT x = DT::from({2}, {1.0, 2.0}, true);
    EXPECT_THROW(backward(square(x)), ContractViolation);
}

TEST(Conv, IdentityKernelReproducesInterior) {
    // 1-channel image, 3x3 kernel with center 1: output equals input
    // everywhere (zero padding only ever multiplies zero weights).
    Rng rng(7);
    std::vector<double> img(36);
    for (auto& v : img) v = rng.uniform(-1, 1);
    DT x = DT::from({1, 6, 6}, img);
    std::vector<double> w(9, 0.0);
    w[4] = 1.0;  // center tap
    DT wk = DT::from({1, 1, 3, 3}, w);
    DT b = DT::zeros({1});
    DT y = conv2d(x, wk, b, 1);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-12);
}

TEST(Conv, StrideTwoHalvesSpatialSize) {
    DT x = DT::zeros({2, 8, 8});
    DT w = DT::zeros({3, 2, 3, 3});
    DT b = DT::zeros({3});
    DT y = conv2d(x, w, b, 2);
    EXPECT_EQ(y.shape(), Shape({3, 4, 4}));
}

TEST(Conv, Upsample2NearestNeighbor) {
    DT x = DT::from({1, 2, 2}, {1, 2, 3, 4});
    DT y = upsample2(x);
    ASSERT_EQ(y.shape(), Shape({1, 4, 4}));
    EXPECT_DOUBLE_EQ(y.data()[0], 1);
    EXPECT_DOUBLE_EQ(y.data()[1], 1);
    EXPECT_DOUBLE_EQ(y.data()[2], 2);
    EXPECT_DOUBLE_EQ(y.data()[5], 1);
    EXPECT_DOUBLE_EQ(y.data()[15], 4);
}

TEST(AdamOpt, FirstStepApproachesSignedLr) {
    // With zero moments, one Adam step moves each coordinate by about
    // -lr * sign(g) (up to the epsilon regularizer).
    FT p = FT::from({3}, {1.0f, -2.0f, 0.5f}, true);
    Adam<float> adam({{"p", p}});
    p.grad() = {0.3f, -1.5f, 2.0f};
    adam.step(1e-3);
    EXPECT_NEAR(p.data()[0], 1.0f - 1e-3f, 1e-6);
    EXPECT_NEAR(p.data()[1], -2.0f + 1e-3f, 1e-6);
    EXPECT_NEAR(p.data()[2], 0.5f - 1e-3f, 1e-6);
    EXPECT_EQ(adam.step_count(), 1);
}

TEST(AdamOpt, NonFiniteGradientSkipsStep) {
    FT p = FT::from({2}, {1.0f, 1.0f}, true);
    Adam<float> adam({{"p", p}});
    p.grad() = {std::numeric_limits<float>::quiet_NaN(), 1.0f};
    adam.step(1e-2);
    EXPECT_FLOAT_EQ(p.data()[0], 1.0f);
    EXPECT_FLOAT_EQ(p.data()[1], 1.0f);
}

TEST(AdamOpt, GlobalNormClipScalesGradients) {
    FT p = FT::from({2}, {0.0f, 0.0f}, true);
    Adam<float> adam({{"p", p}});
    p.grad() = {3.0f, 4.0f};  // norm 5
    double norm = adam.clip_global_norm(1.0);
    EXPECT_NEAR(norm, 5.0, 1e-6);
    EXPECT_NEAR(p.grad()[0], 0.6f, 1e-6);
    EXPECT_NEAR(p.grad()[1], 0.8f, 1e-6);
}

TEST(GradCheckSuite, CoreOpsPassOnTwoSeeds) {
    auto results = run_gradcheck_suite(/*num_seeds=*/2, /*tol=*/1e-3);
    ASSERT_FALSE(results.empty());
    for (const auto& r : results) {
        EXPECT_TRUE(r.passed) << r.name << " worst_rel_error=" << r.worst_error;
    }
}

TEST(GradCheckSuite, DetectsBrokenBackward) {
    // A deliberately wrong backward must be flagged by the checker.
    auto broken = [](const DT& a) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * a.data()[i];
        return detail::make_op<double>("broken", a.shape(), std::move(out), {a},
                                       [](Node<double>& n) {
                                           auto& p = *n.parents[0];
                                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                                               p.grad[i] -= 2.0 * n.grad[i];  // wrong sign
                                       });
    };
    Rng rng(3);
    std::vector<double> v(6);
    for (auto& x : v) x = rng.uniform(-1, 1);
    DT a = DT::from({6}, v, true);
    auto rep = gradient_check([&](const std::vector<DT>& in) { return sum(broken(in[0])); }, {a});
    EXPECT_FALSE(rep.passed(1e-3));
}

TEST(GradCheckSuite, PiecewiseCheckerCatchesBrokenBackwardThroughRelu) {
    // The kink-aware checker discards probes that straddle a ReLU
    // boundary, but a systematically wrong backward disagrees with the
    // numeric derivative at every smooth coordinate and must still fail.
    auto broken_relu = [](const DT& a) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
        return detail::make_op<double>("broken_relu", a.shape(), std::move(out), {a},
                                       [](Node<double>& n) {
                                           auto& p = *n.parents[0];
                                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                                               if (n.value[i] > 0.0)
                                                   p.grad[i] += 0.5 * n.grad[i];  // wrong scale
                                       });
    };
    Rng rng(5);
    std::vector<double> v(32);
    for (auto& x : v) x = rng.uniform(-1, 1);
    DT a = DT::from({32}, v, true);
    auto fn = [&](const std::vector<DT>& in) { return sum(mul(broken_relu(in[0]), in[0])); };
    auto bad = gradient_check_piecewise(fn, {a}, 1e-4, /*coords_per_input=*/16, 9);
    EXPECT_FALSE(bad.passed(1e-3));
    EXPECT_GT(bad.coords_checked, 0);
}

TEST(GradCheckSuite, PiecewiseCheckerPassesCorrectReluGraph) {
    Rng rng(6);
    std::vector<double> v(32);
    for (auto& x : v) x = rng.uniform(-1, 1);
    DT a = DT::from({32}, v, true);
    auto fn = [&](const std::vector<DT>& in) { return sum(mul(relu(in[0]), in[0])); };
    auto rep = gradient_check_piecewise(fn, {a}, 1e-4, /*coords_per_input=*/16, 9);
    EXPECT_TRUE(rep.passed(1e-3)) << rep.max_rel_error;
    EXPECT_GT(rep.coords_checked, 0);
}
