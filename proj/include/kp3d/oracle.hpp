#pragma once

// Planted oracle encoder: builds beliefs whose expected uvd equals the
// true projection of known world points exactly (bilinear mass split
// across the four nearest grid cells). Used by geometry-exactness and
// shift-equivariance tests.

#include <vector>

#include "kp3d/bottleneck.hpp"
#include "kp3d/geometry.hpp"
#include "kp3d/nets.hpp"

namespace kp3d {

// Splits unit mass along one axis so the expectation of the 1-based
// grid coordinate (index/S) equals target exactly.
inline void bilinear_axis_weights(double target, int S, int& lo_index, double& w_hi) {
    double f = target * S;  // fractional 1-based index
    int lo = static_cast<int>(std::floor(f));
    lo = std::min(std::max(lo, 1), S - 1);
    lo_index = lo;
    // exact when target lies within the grid span [1/S, 1]
    w_hi = std::min(std::max(f - lo, 0.0), 1.0);
}

template <typename T>
EncoderOutput<T> oracle_beliefs(const std::vector<WorldPoint>& points, const Camera& cam, int S,
                                const ShiftSpec& shift = {}, int image_size = 64) {
    int K = static_cast<int>(points.size());
    std::vector<T> conf(static_cast<std::size_t>(K) * S * S);
    std::vector<T> depth(static_cast<std::size_t>(K) * S * S);
    constexpr double kEpsMass = 1e-12;
    for (int k = 0; k < K; ++k) {
        CameraPoint q = project(points[k], cam);
        // The encoder sees the shifted image, so beliefs appear shifted;
        // a real encoder reports positions in the heatmap grid
        // convention, which overshoots camera coordinates by the
        // grid/camera calibration constant the bottleneck removes.
        double grid_off = detail::grid_camera_offset(S, image_size);
        double u = q.u + shift.dx / static_cast<double>(image_size) + grid_off;
        double v = q.v + shift.dy / static_cast<double>(image_size) + grid_off;
        int ju;
        double wu_hi, wv_hi;
        int iv;
        bilinear_axis_weights(u, S, ju, wu_hi);
        bilinear_axis_weights(v, S, iv, wv_hi);
        T* cp = conf.data() + static_cast<std::size_t>(k) * S * S;
        T* dp = depth.data() + static_cast<std::size_t>(k) * S * S;
        for (int i = 0; i < S * S; ++i) {
            cp[i] = static_cast<T>(std::log(kEpsMass));
            dp[i] = static_cast<T>(q.d);
        }
        auto put = [&](int row1, int col1, double w) {
            // row1/col1 are 1-based grid indices
            cp[(row1 - 1) * S + (col1 - 1)] = static_cast<T>(std::log(w + kEpsMass));
        };
        put(iv, ju, (1 - wv_hi) * (1 - wu_hi));
        put(iv, ju + 1, (1 - wv_hi) * wu_hi);
        put(iv + 1, ju, wv_hi * (1 - wu_hi));
        put(iv + 1, ju + 1, wv_hi * wu_hi);
    }
    EncoderOutput<T> out;
    out.confidence = Tensor<T>::from({K, S, S}, std::move(conf));
    out.depth = Tensor<T>::from({K, S, S}, std::move(depth));
    return out;
}

// Oracle beliefs for every camera at once.
template <typename T>
std::vector<EncoderOutput<T>> oracle_beliefs_all(const std::vector<WorldPoint>& points,
                                                 const std::vector<Camera>& cams, int S,
                                                 const std::vector<ShiftSpec>& shifts = {},
                                                 int image_size = 64) {
    std::vector<EncoderOutput<T>> out;
    for (std::size_t n = 0; n < cams.size(); ++n)
        out.push_back(oracle_beliefs<T>(points, cams[n], S,
                                        shifts.empty() ? ShiftSpec{} : shifts[n], image_size));
    return out;
}

}  // namespace kp3d
