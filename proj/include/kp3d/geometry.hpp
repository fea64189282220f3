#pragma once

// Pinhole camera model with differentiable projection [x,y,z] -> [u,v,d]
// and unprojection. u,v are normalized image coordinates; the camera
// looks down +z in its own frame and v grows with the image row index.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "kp3d/tensor.hpp"

namespace kp3d {

inline constexpr double kDepthMin = 1e-4;  // world units

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        return {x / n, y / n, z / n};
    }
};

using WorldPoint = Vec3;

struct CameraPoint {
    double u = 0, v = 0, d = 0;
};

struct BehindCameraError : std::runtime_error {
    double z_c;
    explicit BehindCameraError(double z)
        : std::runtime_error("point behind camera: z_c = " + std::to_string(z)), z_c(z) {}
};

struct InvalidDepthError : std::runtime_error {
    double d;
    explicit InvalidDepthError(double depth)
        : std::runtime_error("invalid depth for unprojection: d = " + std::to_string(depth)),
          d(depth) {}
};

struct CameraIntrinsics {
    double f_u = 1.0, f_v = 1.0;
    double c_u = 0.5, c_v = 0.5;

    void validate() const {
        require(f_u > 0 && f_v > 0, "intrinsics: focal lengths must be positive");
        require(c_u >= 0 && c_u <= 1 && c_v >= 0 && c_v <= 1,
                "intrinsics: principal point must lie in [0,1]^2");
    }
};

// Rotation rows are the camera axes expressed in world coordinates:
// p_cam = R * p_world + t.
struct CameraExtrinsics {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 translation{0, 0, 0};

    void validate() const {
        const auto& r = rotation;
        auto dot_rows = [&](int a, int b) {
            return r[3 * a] * r[3 * b] + r[3 * a + 1] * r[3 * b + 1] + r[3 * a + 2] * r[3 * b + 2];
        };
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double want = i == j ? 1.0 : 0.0;
                require(std::abs(dot_rows(i, j) - want) < 1e-6,
                        "extrinsics: rotation is not orthonormal");
            }
        double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
        require(std::abs(det - 1.0) < 1e-6, "extrinsics: rotation determinant is not +1");
    }

    Vec3 row(int i) const {
        return {rotation[3 * i], rotation[3 * i + 1], rotation[3 * i + 2]};
    }

    Vec3 to_camera(const Vec3& p) const {
        return {row(0).dot(p) + translation.x, row(1).dot(p) + translation.y,
                row(2).dot(p) + translation.z};
    }

    Vec3 to_world(const Vec3& pc) const {
        Vec3 q = pc - translation;
        // R^T q
        return {rotation[0] * q.x + rotation[3] * q.y + rotation[6] * q.z,
                rotation[1] * q.x + rotation[4] * q.y + rotation[7] * q.z,
                rotation[2] * q.x + rotation[5] * q.y + rotation[8] * q.z};
    }
};

struct Camera {
    CameraIntrinsics intrinsics;
    CameraExtrinsics extrinsics;

    void validate() const {
        intrinsics.validate();
        extrinsics.validate();
    }

    Vec3 center() const { return extrinsics.to_world({0, 0, 0}); }
};

inline CameraPoint project(const WorldPoint& p, const Camera& cam) {
    Vec3 pc = cam.extrinsics.to_camera(p);
    if (pc.z <= kDepthMin) throw BehindCameraError(pc.z);
    const auto& in = cam.intrinsics;
    return {in.c_u + in.f_u * pc.x / pc.z, in.c_v + in.f_v * pc.y / pc.z, pc.z};
}

inline WorldPoint unproject(const CameraPoint& q, const Camera& cam) {
    if (q.d <= 0) throw InvalidDepthError(q.d);
    const auto& in = cam.intrinsics;
    Vec3 pc{(q.u - in.c_u) * q.d / in.f_u, (q.v - in.c_v) * q.d / in.f_v, q.d};
    return cam.extrinsics.to_world(pc);
}

// Camera z axis points from eye toward target. With up = +y the image
// row direction follows world +y.
inline CameraExtrinsics look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
    Vec3 fwd = target - eye;
    require(fwd.norm() > 1e-12, "look_at: eye and target coincide");
    fwd = fwd.normalized();
    Vec3 xc = up.cross(fwd);
    require(xc.norm() > 1e-9, "look_at: up vector is parallel to the view direction");
    xc = xc.normalized();
    Vec3 yc = fwd.cross(xc);
    CameraExtrinsics ext;
    ext.rotation = {xc.x, xc.y, xc.z, yc.x, yc.y, yc.z, fwd.x, fwd.y, fwd.z};
    // t = -R * eye
    ext.translation = {-xc.dot(eye), -yc.dot(eye), -fwd.dot(eye)};
    return ext;
}

// ---------------------------------------------------------------------------
// Differentiable batched versions on (K,3) tensors.

enum class BehindPolicy { Throw, Mask };

// points (K,3) world -> (K,3) uvd. With BehindPolicy::Mask, entries with
// z_c <= kDepthMin produce (c_u, c_v, kDepthMin) with zero gradient and
// are flagged false in *valid_out.
template <typename T>
Tensor<T> project_points(const Tensor<T>& points, const Camera& cam,
                         BehindPolicy policy = BehindPolicy::Throw,
                         std::vector<std::uint8_t>* valid_out = nullptr) {
    const Shape& s = points.shape();
    require(s.size() == 2 && s[1] == 3, "project_points: expects (K,3), got " + shape_str(s));
    int K = s[0];
    const auto& in = cam.intrinsics;
    const auto& ex = cam.extrinsics;
    std::vector<T> out(points.numel());
    std::vector<std::uint8_t> valid(K, 1);
    const auto& pv = points.data();
    for (int k = 0; k < K; ++k) {
        Vec3 p{static_cast<double>(pv[3 * k]), static_cast<double>(pv[3 * k + 1]),
               static_cast<double>(pv[3 * k + 2])};
        Vec3 pc = ex.to_camera(p);
        if (pc.z <= kDepthMin) {
            if (policy == BehindPolicy::Throw) throw BehindCameraError(pc.z);
            valid[k] = 0;
            out[3 * k] = static_cast<T>(in.c_u);
            out[3 * k + 1] = static_cast<T>(in.c_v);
            out[3 * k + 2] = static_cast<T>(kDepthMin);
            continue;
        }
        out[3 * k] = static_cast<T>(in.c_u + in.f_u * pc.x / pc.z);
        out[3 * k + 1] = static_cast<T>(in.c_v + in.f_v * pc.y / pc.z);
        out[3 * k + 2] = static_cast<T>(pc.z);
    }
    if (valid_out) *valid_out = valid;
    auto bwd = [K, in, ex, valid](Node<T>& n) {
        auto& p = *n.parents[0];
        for (int k = 0; k < K; ++k) {
            if (!valid[k]) continue;
            Vec3 pt{static_cast<double>(p.value[3 * k]), static_cast<double>(p.value[3 * k + 1]),
                    static_cast<double>(p.value[3 * k + 2])};
            Vec3 pc = ex.to_camera(pt);
            double gu = static_cast<double>(n.grad[3 * k]);
            double gv = static_cast<double>(n.grad[3 * k + 1]);
            double gd = static_cast<double>(n.grad[3 * k + 2]);
            double z = pc.z;
            Vec3 gpc{gu * in.f_u / z, gv * in.f_v / z,
                     -gu * in.f_u * pc.x / (z * z) - gv * in.f_v * pc.y / (z * z) + gd};
            // dL/dp = R^T gpc
            Vec3 r0 = ex.row(0), r1 = ex.row(1), r2 = ex.row(2);
            p.grad[3 * k] += static_cast<T>(r0.x * gpc.x + r1.x * gpc.y + r2.x * gpc.z);
            p.grad[3 * k + 1] += static_cast<T>(r0.y * gpc.x + r1.y * gpc.y + r2.y * gpc.z);
            p.grad[3 * k + 2] += static_cast<T>(r0.z * gpc.x + r1.z * gpc.y + r2.z * gpc.z);
        }
    };
    return detail::make_op<T>("project_points", s, std::move(out), {points}, std::move(bwd));
}

// uvd (K,3) -> world (K,3)
template <typename T>
Tensor<T> unproject_points(const Tensor<T>& uvd, const Camera& cam) {
    const Shape& s = uvd.shape();
    require(s.size() == 2 && s[1] == 3, "unproject_points: expects (K,3), got " + shape_str(s));
    int K = s[0];
    const auto& in = cam.intrinsics;
    const auto& ex = cam.extrinsics;
    std::vector<T> out(uvd.numel());
    const auto& qv = uvd.data();
    for (int k = 0; k < K; ++k) {
        double u = qv[3 * k], v = qv[3 * k + 1], d = qv[3 * k + 2];
        if (d <= 0) throw InvalidDepthError(d);
        Vec3 pc{(u - in.c_u) * d / in.f_u, (v - in.c_v) * d / in.f_v, d};
        Vec3 w = ex.to_world(pc);
        out[3 * k] = static_cast<T>(w.x);
        out[3 * k + 1] = static_cast<T>(w.y);
        out[3 * k + 2] = static_cast<T>(w.z);
    }
    auto bwd = [K, in, ex](Node<T>& n) {
        auto& p = *n.parents[0];
        Vec3 r0 = ex.row(0), r1 = ex.row(1), r2 = ex.row(2);
        for (int k = 0; k < K; ++k) {
            double u = p.value[3 * k], v = p.value[3 * k + 1], d = p.value[3 * k + 2];
            Vec3 gw{static_cast<double>(n.grad[3 * k]), static_cast<double>(n.grad[3 * k + 1]),
                    static_cast<double>(n.grad[3 * k + 2])};
            // dL/dp_cam = R * gw
            Vec3 gpc{r0.dot(gw), r1.dot(gw), r2.dot(gw)};
            p.grad[3 * k] += static_cast<T>(gpc.x * d / in.f_u);
            p.grad[3 * k + 1] += static_cast<T>(gpc.y * d / in.f_v);
            p.grad[3 * k + 2] += static_cast<T>(gpc.x * (u - in.c_u) / in.f_u +
                                                gpc.y * (v - in.c_v) / in.f_v + gpc.z);
        }
    };
    return detail::make_op<T>("unproject_points", s, std::move(out), {uvd}, std::move(bwd));
}

}  // namespace kp3d
