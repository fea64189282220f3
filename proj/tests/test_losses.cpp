#include <gtest/gtest.h>

#include <cmath>

#include "kp3d/losses.hpp"
#include "kp3d/random.hpp"

using namespace kp3d;

using DT = Tensor<double>;

TEST(Losses, ReconstructionSingleViewFixture) {
    // constant difference of 0.5 over (3,64,64): sqrt(0.25 * 12288)
    DT recon = DT::filled({3, 64, 64}, 0.75);
    DT target = DT::filled({3, 64, 64}, 0.25);
    DT l = loss_ae(std::vector<DT>{recon}, std::vector<DT>{target});
    EXPECT_NEAR(l.item(), 0.5 * std::sqrt(12288.0), 1e-9);
}

TEST(Losses, ReconstructionSumsOverViews) {
    DT recon = DT::filled({3, 8, 8}, 1.0);
    DT target = DT::filled({3, 8, 8}, 0.0);
    DT one = loss_ae(std::vector<DT>{recon}, std::vector<DT>{target});
    DT two = loss_ae(std::vector<DT>{recon, recon}, std::vector<DT>{target, target});
    EXPECT_NEAR(two.item(), 2.0 * one.item(), 1e-9);
}

TEST(Losses, ReconstructionIsNotSquaredNorm) {
    // doubling the error doubles the (non-squared) loss
    DT target = DT::filled({3, 8, 8}, 0.0);
    DT r1 = DT::filled({3, 8, 8}, 0.1);
    DT r2 = DT::filled({3, 8, 8}, 0.2);
    double l1 = loss_ae(std::vector<DT>{r1}, std::vector<DT>{target}).item();
    double l2 = loss_ae(std::vector<DT>{r2}, std::vector<DT>{target}).item();
    EXPECT_NEAR(l2, 2.0 * l1, 1e-9);
}

TEST(Losses, MultiviewUnitOffsetFixture) {
    // K = 1, N = 2, unit offset: both ordered pairs contribute 1 -> 2.0
    DT a = DT::from({1, 3}, {0.0, 0.0, 0.0});
    DT b = DT::from({1, 3}, {1.0, 0.0, 0.0});
    DT l = loss_multiview(std::vector<DT>{a, b});
    EXPECT_NEAR(l.item(), 2.0, 1e-12);
}

TEST(Losses, MultiviewSingleViewIsZero) {
    DT a = DT::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_NEAR(loss_multiview(std::vector<DT>{a}).item(), 0.0, 1e-12);
}

TEST(Losses, MultiviewAgreementIsZero) {
    DT a = DT::from({2, 3}, {1, 2, 3, 4, 5, 6});
    DT b = DT::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_NEAR(loss_multiview(std::vector<DT>{a, b, b}).item(), 0.0, 1e-12);
}

TEST(Losses, MultiviewStopGradientOnSecondArgument) {
    // Each view is pulled toward detached peers: the gradient on view i
    // comes only from pairs where i is the first argument.
    DT a = DT::from({1, 3}, {0.0, 0.0, 0.0}, true);
    DT b = DT::from({1, 3}, {2.0, 0.0, 0.0}, true);
    DT l = loss_multiview(std::vector<DT>{a, b});
    backward(l);
    // d||a - sg(b)||/da = (a-b)/||a-b|| = (-1,0,0); likewise for b
    EXPECT_NEAR(a.grad()[0], -1.0, 1e-12);
    EXPECT_NEAR(b.grad()[0], 1.0, 1e-12);
    EXPECT_NEAR(a.grad()[1], 0.0, 1e-12);
    EXPECT_NEAR(b.grad()[2], 0.0, 1e-12);
}

TEST(Losses, SeparationCoincidentFixture) {
    // K = 2, coincident points: every ordered pair contributes 1, so
    // (1/4) * 4 = 1.0
    DT fused = DT::from({2, 3}, {0.3, 0.2, 0.1, 0.3, 0.2, 0.1});
    EXPECT_NEAR(loss_separation(fused, 1000.0).item(), 1.0, 1e-12);
}

TEST(Losses, SeparationUnitProductFixture) {
    // K = 2 with M * d^2 = 1: off-diagonal terms are 1/2 each ->
    // (1/4) * (2 + 1) = 0.75
    double M = 1000.0;
    double d = std::sqrt(1.0 / M);
    DT fused = DT::from({2, 3}, {0.0, 0.0, 0.0, d, 0.0, 0.0});
    EXPECT_NEAR(loss_separation(fused, M).item(), 0.75, 1e-12);
}

TEST(Losses, SeparationSingleKeypointIsOne) {
    DT fused = DT::from({1, 3}, {0.4, -0.2, 0.9});
    EXPECT_NEAR(loss_separation(fused, 1000.0).item(), 1.0, 1e-12);
}

TEST(Losses, SeparationDiagonalHasZeroGradient) {
    // K = 1: only the diagonal contributes, a constant with no gradient
    DT fused = DT::from({1, 3}, {0.4, -0.2, 0.9}, true);
    DT l = loss_separation(fused, 1000.0);
    backward(l);
    for (double g : fused.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Losses, SeparationRepelsCloseKeypoints) {
    DT fused = DT::from({2, 3}, {0.0, 0.0, 0.0, 0.01, 0.0, 0.0}, true);
    DT l = loss_separation(fused, 1000.0);
    backward(l);
    // descent (-grad) pushes the pair apart along x: the lower point has
    // positive gradient, the upper point negative
    EXPECT_GT(fused.grad()[0], 0.0);
    EXPECT_LT(fused.grad()[3], 0.0);
}

TEST(Losses, WeightedTotalFixture) {
    // perfect reconstruction and agreement, K = 2 coincident fused points:
    // total = 0.0025 * L_sep = 0.0025
    DT img = DT::filled({3, 8, 8}, 0.5);
    DT world = DT::from({2, 3}, {0.1, 0.1, 0.1, 0.1, 0.1, 0.1});
    LossWeights w;
    auto parts = loss_unsup(std::vector<DT>{img}, std::vector<DT>{img},
                            std::vector<DT>{world, world}, world, w);
    EXPECT_NEAR(parts.ae.item(), 0.0, 1e-12);
    EXPECT_NEAR(parts.multiview.item(), 0.0, 1e-12);
    EXPECT_NEAR(parts.separation.item(), 1.0, 1e-12);
    EXPECT_NEAR(parts.total.item(), 0.0025, 1e-12);
}

TEST(Losses, DefaultWeightValues) {
    LossWeights w;
    EXPECT_DOUBLE_EQ(w.lambda_ae, 5.0);
    EXPECT_DOUBLE_EQ(w.lambda_multi, 0.05);
    EXPECT_DOUBLE_EQ(w.lambda_sep, 0.0025);
    EXPECT_DOUBLE_EQ(w.separation_sharpness, 1000.0);
    w.lambda_ae = -1.0;
    EXPECT_THROW(w.validate(), ContractViolation);
}

TEST(Losses, AllTermsNonNegative) {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> a(3 * 16), b(3 * 16), p(9), q(9);
        for (auto& x : a) x = rng.uniform(-1, 1);
        for (auto& x : b) x = rng.uniform(-1, 1);
        for (auto& x : p) x = rng.uniform(-1, 1);
        for (auto& x : q) x = rng.uniform(-1, 1);
        DT ra = DT::from({3, 4, 4}, a), rb = DT::from({3, 4, 4}, b);
        DT wa = DT::from({3, 3}, p), wb = DT::from({3, 3}, q);
        EXPECT_GE(loss_ae(std::vector<DT>{ra}, std::vector<DT>{rb}).item(), 0.0);
        EXPECT_GE(loss_multiview(std::vector<DT>{wa, wb}).item(), 0.0);
        EXPECT_GE(loss_separation(wa, 1000.0).item(), 0.0);
    }
}
