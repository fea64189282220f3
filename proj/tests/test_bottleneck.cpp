#include <gtest/gtest.h>

#include <cmath>

#include "kp3d/bottleneck.hpp"
#include "kp3d/oracle.hpp"
#include "kp3d/simenv.hpp"

using namespace kp3d;

using DT = Tensor<double>;

namespace {

// One-hot heatmap at 1-based grid cell (row, col) of an SxS plane.
DT one_hot_heatmap(int K, int S, int row1, int col1) {
    std::vector<double> v(static_cast<std::size_t>(K) * S * S, 0.0);
    for (int k = 0; k < K; ++k) v[k * S * S + (row1 - 1) * S + (col1 - 1)] = 1.0;
    return DT::from({K, S, S}, std::move(v));
}

}  // namespace

TEST(Bottleneck, UniformLogitsGiveUniformHeatmap) {
    DT conf = DT::filled({1, 4, 4}, 0.37);
    DT heat = spatial_softmax(conf);
    for (double h : heat.data()) EXPECT_NEAR(h, 1.0 / 16.0, 1e-12);
}

TEST(Bottleneck, UniformHeatmapExpectationFixture) {
    // E[u] under a uniform SxS heatmap is (S+1)/(2S): 0.625 at S = 4.
    int S = 4;
    DT heat = DT::filled({1, S, S}, 1.0 / (S * S));
    DT depth = DT::filled({1, S, S}, 2.0);
    DT uvd = expected_uvd(heat, depth);
    EXPECT_NEAR(uvd.data()[0], 0.625, 1e-12);
    EXPECT_NEAR(uvd.data()[1], 0.625, 1e-12);
    EXPECT_NEAR(uvd.data()[2], 2.0, 1e-12);
}

TEST(Bottleneck, OneHotExpectationFixture) {
    // mass on the cell with 1-based coordinates (u,v) = (2,3), depth 1.7,
    // S = 4 -> (0.5, 0.75, 1.7)
    int S = 4;
    DT heat = one_hot_heatmap(1, S, /*row1=*/3, /*col1=*/2);
    DT depth = DT::filled({1, S, S}, 1.7);
    DT uvd = expected_uvd(heat, depth);
    EXPECT_NEAR(uvd.data()[0], 0.5, 1e-12);
    EXPECT_NEAR(uvd.data()[1], 0.75, 1e-12);
    EXPECT_NEAR(uvd.data()[2], 1.7, 1e-12);
}

TEST(Bottleneck, SpatialStdFixtures) {
    // uniform 2x2: coordinates {0.5, 1.0} per axis, variance 0.0625 each
    // axis -> sigma = sqrt(0.125)
    int S = 2;
    DT heat = DT::filled({1, S, S}, 0.25);
    DT depth = DT::filled({1, S, S}, 1.0);
    DT uvd = expected_uvd(heat, depth);
    DT sigma = spatial_std(heat, uvd);
    EXPECT_NEAR(sigma.data()[0], std::sqrt(0.125), 1e-12);

    // one-hot heatmap has zero spread
    DT hot = one_hot_heatmap(1, 4, 2, 2);
    DT uvd2 = expected_uvd(hot, DT::filled({1, 4, 4}, 1.0));
    DT sigma2 = spatial_std(hot, uvd2);
    EXPECT_NEAR(sigma2.data()[0], 0.0, 1e-12);
}

TEST(Bottleneck, ResampleIdentityCases) {
    DT uvd = DT::from({2, 3}, {0.3, 0.4, 1.2, 0.6, 0.7, 2.0});
    DT sigma = DT::from({2}, {0.1, 0.2});
    // zero noise -> identity
    DT out = resample_uvd(uvd, sigma, std::vector<double>(4, 0.0));
    for (std::size_t i = 0; i < out.numel(); ++i)
        EXPECT_DOUBLE_EQ(out.data()[i], uvd.data()[i]);
    // zero sigma -> identity regardless of noise
    DT zs = DT::from({2}, {0.0, 0.0});
    DT out2 = resample_uvd(uvd, zs, {1.3, -0.7, 0.2, 0.9});
    for (std::size_t i = 0; i < out2.numel(); ++i)
        EXPECT_DOUBLE_EQ(out2.data()[i], uvd.data()[i]);
    // depth never perturbed
    DT out3 = resample_uvd(uvd, sigma, {1.0, 1.0, 1.0, 1.0});
    EXPECT_DOUBLE_EQ(out3.data()[2], uvd.data()[2]);
    EXPECT_DOUBLE_EQ(out3.data()[5], uvd.data()[5]);
}

TEST(Bottleneck, ResampleIsUnbiased) {
    // Monte Carlo mean of the resampled (u,v) must match the expectation
    // within three standard errors.
    DT uvd = DT::from({1, 3}, {0.4, 0.6, 1.5});
    DT sigma = DT::from({1}, {0.25});
    Rng rng(123);
    const int n = 100000;
    double su = 0, sv = 0;
    double nu = 3e-1;
    for (int i = 0; i < n; ++i) {
        std::vector<double> ab{rng.normal(0.0, nu), rng.normal(0.0, nu)};
        DT out = resample_uvd(uvd, sigma, ab);
        su += out.data()[0];
        sv += out.data()[1];
    }
    double stderr_uv = sigma.data()[0] * nu / std::sqrt(static_cast<double>(n));
    EXPECT_NEAR(su / n, 0.4, 3 * stderr_uv);
    EXPECT_NEAR(sv / n, 0.6, 3 * stderr_uv);
}

TEST(Bottleneck, AttentionFixture) {
    // per-channel constant logits 0 and ln 3 -> channel means (0, ln 3)
    // -> softmax (0.25, 0.75)
    int S = 4;
    std::vector<double> v(2 * S * S, 0.0);
    for (int i = 0; i < S * S; ++i) v[S * S + i] = std::log(3.0);
    DT conf = DT::from({2, S, S}, std::move(v));
    DT att = attention_scores(conf);
    EXPECT_NEAR(att.data()[0], 0.25, 1e-12);
    EXPECT_NEAR(att.data()[1], 0.75, 1e-12);
}

TEST(Bottleneck, AttentionInvariantToLogitShift) {
    Rng rng(5);
    std::vector<double> v(3 * 16);
    for (auto& x : v) x = rng.uniform(-1, 1);
    DT conf = DT::from({3, 4, 4}, v);
    DT shifted = add_scalar(conf, 7.3);
    DT a = attention_scores(conf);
    DT b = attention_scores(shifted);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(Bottleneck, FuseEqualAttentionIsMidpoint) {
    DT p0 = DT::from({1, 3}, {0.0, 0.0, 0.0});
    DT p1 = DT::from({1, 3}, {1.0, 2.0, 3.0});
    DT a = DT::from({1}, {0.4});
    DT fused = fuse_world(std::vector<DT>{p0, p1}, std::vector<DT>{a, a});
    EXPECT_NEAR(fused.data()[0], 0.5, 1e-12);
    EXPECT_NEAR(fused.data()[1], 1.0, 1e-12);
    EXPECT_NEAR(fused.data()[2], 1.5, 1e-12);
}

TEST(Bottleneck, FuseWeightsNormalizePerKeypoint) {
    // attentions (0.2, 0.6) -> weights (0.25, 0.75)
    DT p0 = DT::from({1, 3}, {0.0, 0.0, 0.0});
    DT p1 = DT::from({1, 3}, {4.0, 4.0, 4.0});
    DT a0 = DT::from({1}, {0.2});
    DT a1 = DT::from({1}, {0.6});
    DT fused = fuse_world(std::vector<DT>{p0, p1}, std::vector<DT>{a0, a1});
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(fused.data()[c], 3.0, 1e-12);
}

TEST(Bottleneck, FuseSingleViewIsIdentity) {
    DT p = DT::from({2, 3}, {0.1, 0.2, 0.3, -1.0, 2.0, 0.5});
    DT a = DT::from({2}, {0.9, 0.05});
    DT fused = fuse_world(std::vector<DT>{p}, std::vector<DT>{a});
    for (std::size_t i = 0; i < p.numel(); ++i)
        EXPECT_NEAR(fused.data()[i], p.data()[i], 1e-12);
}

TEST(Bottleneck, GaussianMapFixtures) {
    int S = 4, K = 2;
    // keypoint 0 exactly on the cell with coordinates (0.5, 0.5)
    DT uvd = DT::from({K, 3}, {0.5, 0.5, 1.0, 0.25, 0.25, 1.0});
    DT att = DT::from({K}, {0.5, 0.25});
    DT maps = gaussian_maps(uvd, att, S, {});
    // peak amplitude K * att at the center cell (row1=2, col1=2)
    double peak0 = maps.data()[(2 - 1) * S + (2 - 1)];
    EXPECT_NEAR(peak0, K * 0.5, 1e-12);
    // one grid step (1 px) away decays by exp(-0.5 * d * 1)
    double off0 = maps.data()[(2 - 1) * S + (3 - 1)];
    EXPECT_NEAR(off0, K * 0.5 * std::exp(-0.5), 1e-12);
    // distances are measured in heatmap pixel units
    DT uvd1 = DT::from({1, 3}, {0.25, 0.25, 1.0});
    DT att1 = DT::from({1}, {1.0});
    DT m1 = gaussian_maps(uvd1, att1, S, {});
    double at_dist0 = m1.data()[(1 - 1) * S + (1 - 1)];  // cell (0.25, 0.25)
    double far = m1.data()[(4 - 1) * S + (1 - 1)];       // 3 px below the mean
    EXPECT_NEAR(at_dist0, 1.0, 1e-12);
    EXPECT_NEAR(far, std::exp(-0.5 * 9.0), 1e-12);
    // depth scales the falloff rate
    DT uvd2 = DT::from({1, 3}, {0.25, 0.25, 4.0});
    DT m2 = gaussian_maps(uvd2, att1, S, {});
    EXPECT_NEAR(m2.data()[(4 - 1) * S + (1 - 1)], std::exp(-0.5 * 4.0 * 9.0), 1e-12);
    // invalid keypoints produce an all-zero channel
    DT m3 = gaussian_maps(uvd, att, S, {1, 0});
    for (int i = 0; i < S * S; ++i) EXPECT_DOUBLE_EQ(m3.data()[S * S + i], 0.0);
}

TEST(Bottleneck, ShiftCorrectionFixture) {
    // shift dx = +4 on a 64px image moves u by -4/64 = -0.0625
    DT uvd = DT::from({1, 3}, {0.5, 0.5, 1.0});
    DT pre = shift_correct_pre(uvd, ShiftSpec{4, 0}, 64, 64);
    EXPECT_NEAR(pre.data()[0], 0.5 - 0.0625, 1e-12);
    EXPECT_NEAR(pre.data()[1], 0.5, 1e-12);
    EXPECT_NEAR(pre.data()[2], 1.0, 1e-12);
}

TEST(Bottleneck, ShiftCorrectionsCompose) {
    DT uvd = DT::from({2, 3}, {0.31, 0.62, 1.4, 0.8, 0.2, 2.2});
    ShiftSpec s{3, -2};
    DT round = shift_correct_post(shift_correct_pre(uvd, s, 64, 64), s, 64, 64);
    for (std::size_t i = 0; i < uvd.numel(); ++i)
        EXPECT_NEAR(round.data()[i], uvd.data()[i], 1e-7);
}

TEST(Bottleneck, OracleFusionRecoversWorldPoints) {
    auto cams = default_camera_rig();
    std::vector<WorldPoint> pts{{0.12, 0.10, -0.08}, {-0.2, 0.15, 0.1}, {0.0, 0.05, 0.3}};
    auto enc = oracle_beliefs_all<double>(pts, cams, /*S=*/16);
    BottleneckOptions opt;
    opt.decode = false;
    BottleneckOutput<double> out = run_bottleneck(enc, cams, {}, opt);
    for (std::size_t k = 0; k < pts.size(); ++k) {
        EXPECT_NEAR(out.fused.data()[3 * k], pts[k].x, 1e-5);
        EXPECT_NEAR(out.fused.data()[3 * k + 1], pts[k].y, 1e-5);
        EXPECT_NEAR(out.fused.data()[3 * k + 2], pts[k].z, 1e-5);
    }
}

TEST(Bottleneck, OracleShiftedBeliefsCorrectedExactly) {
    // beliefs from shifted images fuse to the same world points once the
    // pre-correction is applied
    auto cams = default_camera_rig();
    std::vector<WorldPoint> pts{{0.1, 0.12, -0.05}, {-0.15, 0.08, 0.12}};
    std::vector<ShiftSpec> shifts{{4, -3}, {-2, 4}, {3, 2}};
    auto enc = oracle_beliefs_all<double>(pts, cams, 16, shifts, 64);
    BottleneckOptions opt;
    opt.decode = false;
    opt.offset_correction = true;
    opt.image_size = 64;
    BottleneckOutput<double> out = run_bottleneck(enc, cams, shifts, opt);
    for (std::size_t k = 0; k < pts.size(); ++k) {
        EXPECT_NEAR(out.fused.data()[3 * k], pts[k].x, 1e-4);
        EXPECT_NEAR(out.fused.data()[3 * k + 1], pts[k].y, 1e-4);
        EXPECT_NEAR(out.fused.data()[3 * k + 2], pts[k].z, 1e-4);
    }
}

TEST(Bottleneck, PipelineIsDeterministic) {
    auto cams = default_camera_rig();
    std::vector<WorldPoint> pts{{0.1, 0.1, 0.0}, {-0.1, 0.2, 0.1}};
    auto enc = oracle_beliefs_all<double>(pts, cams, 8);
    BottleneckOptions opt;
    opt.training = true;
    opt.nu = 1e-3;
    opt.decode = true;
    Rng r1(77), r2(77);
    BottleneckOutput<double> a = run_bottleneck(enc, cams, {}, opt, &r1);
    BottleneckOutput<double> b = run_bottleneck(enc, cams, {}, opt, &r2);
    ASSERT_EQ(a.fused.numel(), b.fused.numel());
    for (std::size_t i = 0; i < a.fused.numel(); ++i)
        EXPECT_DOUBLE_EQ(a.fused.data()[i], b.fused.data()[i]);
    for (std::size_t n = 0; n < a.gaussians.size(); ++n)
        EXPECT_EQ(a.gaussians[n].data(), b.gaussians[n].data());
}

TEST(Bottleneck, ResamplingRequiresRng) {
    auto cams = default_camera_rig();
    auto enc = oracle_beliefs_all<double>({{0.1, 0.1, 0.0}}, cams, 8);
    BottleneckOptions opt;
    opt.training = true;
    opt.nu = 1e-3;
    opt.decode = false;
    EXPECT_THROW(run_bottleneck(enc, cams, {}, opt, nullptr), ContractViolation);
}

TEST(Bottleneck, ShiftImageReplicatesBorder) {
    DT img = DT::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    DT sh = shift_image(img, ShiftSpec{1, 0});
    // content moves right, left border replicated
    EXPECT_DOUBLE_EQ(sh.data()[0], 1);
    EXPECT_DOUBLE_EQ(sh.data()[1], 1);
    EXPECT_DOUBLE_EQ(sh.data()[2], 2);
    EXPECT_DOUBLE_EQ(sh.data()[3], 4);
    EXPECT_DOUBLE_EQ(sh.data()[4], 4);
    EXPECT_DOUBLE_EQ(sh.data()[5], 5);
}
