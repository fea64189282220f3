#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "kp3d/geometry.hpp"
#include "kp3d/random.hpp"
#include "kp3d/simenv.hpp"

using namespace kp3d;

namespace {

Camera default_cam() {
    Camera cam;  // identity extrinsics, f = 1, principal point (0.5, 0.5)
    return cam;
}

// Independent oracle: 4x4 homogeneous projection matrix applied to
// [x, y, z, 1], followed by perspective division.
CameraPoint project_homogeneous(const WorldPoint& p, const Camera& cam) {
    const auto& r = cam.extrinsics.rotation;
    const Vec3& t = cam.extrinsics.translation;
    const auto& in = cam.intrinsics;
    // M = K_aug * [R | t]
    std::array<double, 12> m{
        in.f_u * r[0] + in.c_u * r[6], in.f_u * r[1] + in.c_u * r[7],
        in.f_u * r[2] + in.c_u * r[8], in.f_u * t.x + in.c_u * t.z,
        in.f_v * r[3] + in.c_v * r[6], in.f_v * r[4] + in.c_v * r[7],
        in.f_v * r[5] + in.c_v * r[8], in.f_v * t.y + in.c_v * t.z,
        r[6], r[7], r[8], t.z,
    };
    double hu = m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3];
    double hv = m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7];
    double hw = m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11];
    return {hu / hw, hv / hw, hw};
}

}  // namespace

TEST(Geometry, OnAxisPointProjectsToPrincipalPoint) {
    CameraPoint q = project({0, 0, 2}, default_cam());
    EXPECT_NEAR(q.u, 0.5, 1e-12);
    EXPECT_NEAR(q.v, 0.5, 1e-12);
    EXPECT_NEAR(q.d, 2.0, 1e-12);
}

TEST(Geometry, OffAxisFixture) {
    CameraPoint q = project({0.2, -0.1, 1.0}, default_cam());
    EXPECT_NEAR(q.u, 0.7, 1e-12);
    EXPECT_NEAR(q.v, 0.4, 1e-12);
    EXPECT_NEAR(q.d, 1.0, 1e-12);
}

TEST(Geometry, MatchesHomogeneousMatrixOracle) {
    auto cams = default_camera_rig();
    Rng rng(42);
    for (const auto& cam : cams) {
        for (int i = 0; i < 200; ++i) {
            WorldPoint p{rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.5), rng.uniform(-0.5, 0.5)};
            CameraPoint a = project(p, cam);
            CameraPoint b = project_homogeneous(p, cam);
            EXPECT_NEAR(a.u, b.u, 1e-10);
            EXPECT_NEAR(a.v, b.v, 1e-10);
            EXPECT_NEAR(a.d, b.d, 1e-10);
        }
    }
}

TEST(Geometry, ProjectUnprojectRoundTrip1000Points) {
    auto cams = default_camera_rig();
    Rng rng(7);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
        const Camera& cam = cams[i % cams.size()];
        CameraPoint q{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.5, 3.5)};
        WorldPoint p = unproject(q, cam);
        CameraPoint q2 = project(p, cam);
        worst = std::max({worst, std::abs(q2.u - q.u), std::abs(q2.v - q.v),
                          std::abs(q2.d - q.d)});
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Geometry, TwoCameraConsistency) {
    auto cams = default_camera_rig();
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        WorldPoint p{rng.uniform(-0.4, 0.4), rng.uniform(0.0, 0.4), rng.uniform(-0.4, 0.4)};
        // unproject camera 0's view back to the world, then view from camera 1
        CameraPoint q0 = project(p, cams[0]);
        WorldPoint p_rec = unproject(q0, cams[0]);
        CameraPoint q1a = project(p_rec, cams[1]);
        CameraPoint q1b = project(p, cams[1]);
        EXPECT_NEAR(q1a.u, q1b.u, 1e-9);
        EXPECT_NEAR(q1a.v, q1b.v, 1e-9);
        EXPECT_NEAR(q1a.d, q1b.d, 1e-9);
    }
}

TEST(Geometry, LookAtFixture) {
    Camera cam;
    cam.extrinsics = look_at({0, 0, -2}, {0, 0, 0}, {0, 1, 0});
    cam.validate();
    CameraPoint q = project({0, 0, 0}, cam);
    EXPECT_NEAR(q.u, 0.5, 1e-12);
    EXPECT_NEAR(q.v, 0.5, 1e-12);
    EXPECT_NEAR(q.d, 2.0, 1e-12);
}

TEST(Geometry, LookAtRowsAreOrthonormal) {
    CameraExtrinsics ext = look_at({1.3, 0.7, -2.1}, {0.1, 0.0, 0.2}, {0, 1, 0});
    ext.validate();  // orthonormality + det +1
    // camera center recovers the eye
    Vec3 c = ext.to_world({0, 0, 0});
    EXPECT_NEAR(c.x, 1.3, 1e-12);
    EXPECT_NEAR(c.y, 0.7, 1e-12);
    EXPECT_NEAR(c.z, -2.1, 1e-12);
}

TEST(Geometry, LookAtDegenerateInputsThrow) {
    EXPECT_THROW(look_at({1, 2, 3}, {1, 2, 3}, {0, 1, 0}), ContractViolation);
    EXPECT_THROW(look_at({0, 0, 0}, {0, 1, 0}, {0, 1, 0}), ContractViolation);
}

TEST(Geometry, BehindCameraThrows) {
    EXPECT_THROW(project({0, 0, -1}, default_cam()), BehindCameraError);
    EXPECT_THROW(project({0, 0, 0}, default_cam()), BehindCameraError);
}

TEST(Geometry, InvalidDepthThrows) {
    EXPECT_THROW(unproject({0.5, 0.5, 0.0}, default_cam()), InvalidDepthError);
    EXPECT_THROW(unproject({0.5, 0.5, -1.0}, default_cam()), InvalidDepthError);
    Tensor<float> q = Tensor<float>::from({1, 3}, {0.5f, 0.5f, -1.0f});
    EXPECT_THROW(unproject_points(q, default_cam()), InvalidDepthError);
}

TEST(Geometry, BatchedMatchesScalar) {
    auto cams = default_camera_rig();
    Tensor<double> pts = Tensor<double>::from({2, 3}, {0.1, 0.2, -0.1, -0.2, 0.05, 0.3});
    Tensor<double> uvd = project_points(pts, cams[0]);
    for (int k = 0; k < 2; ++k) {
        CameraPoint q = project({pts.data()[3 * k], pts.data()[3 * k + 1],
                                 pts.data()[3 * k + 2]},
                                cams[0]);
        EXPECT_NEAR(uvd.data()[3 * k], q.u, 1e-12);
        EXPECT_NEAR(uvd.data()[3 * k + 1], q.v, 1e-12);
        EXPECT_NEAR(uvd.data()[3 * k + 2], q.d, 1e-12);
    }
    Tensor<double> back = unproject_points(uvd, cams[0]);
    for (std::size_t i = 0; i < back.numel(); ++i)
        EXPECT_NEAR(back.data()[i], pts.data()[i], 1e-12);
}

TEST(Geometry, MaskPolicyFlagsAndZeroesGradient) {
    Camera cam = default_cam();
    // first point valid, second behind the camera
    Tensor<double> pts =
        Tensor<double>::from({2, 3}, {0.1, 0.1, 2.0, 0.0, 0.0, -1.0}, true);
    std::vector<std::uint8_t> valid;
    Tensor<double> uvd = project_points(pts, cam, BehindPolicy::Mask, &valid);
    ASSERT_EQ(valid.size(), 2u);
    EXPECT_EQ(valid[0], 1);
    EXPECT_EQ(valid[1], 0);
    EXPECT_NEAR(uvd.data()[3], 0.5, 1e-12);       // c_u
    EXPECT_NEAR(uvd.data()[4], 0.5, 1e-12);       // c_v
    EXPECT_NEAR(uvd.data()[5], kDepthMin, 1e-15);  // d floor
    backward(sum(uvd));
    // masked entry contributes no gradient
    EXPECT_DOUBLE_EQ(pts.grad()[3], 0.0);
    EXPECT_DOUBLE_EQ(pts.grad()[4], 0.0);
    EXPECT_DOUBLE_EQ(pts.grad()[5], 0.0);
    EXPECT_NE(pts.grad()[2], 0.0);
}

TEST(Geometry, ThrowPolicyOnBatch) {
    Tensor<double> pts = Tensor<double>::from({1, 3}, {0.0, 0.0, -1.0});
    EXPECT_THROW(project_points(pts, default_cam()), BehindCameraError);
}

TEST(Geometry, ExtrinsicsValidateRejectsNonRotation) {
    CameraExtrinsics ext;
    ext.rotation = {2, 0, 0, 0, 1, 0, 0, 0, 1};
    EXPECT_THROW(ext.validate(), ContractViolation);
    CameraExtrinsics refl;
    refl.rotation = {-1, 0, 0, 0, 1, 0, 0, 0, 1};  // det -1
    EXPECT_THROW(refl.validate(), ContractViolation);
}

TEST(Geometry, IntrinsicsValidate) {
    CameraIntrinsics in;
    in.f_u = -1.0;
    EXPECT_THROW(in.validate(), ContractViolation);
    CameraIntrinsics in2;
    in2.c_u = 1.5;
    EXPECT_THROW(in2.validate(), ContractViolation);
}
