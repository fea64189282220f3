#pragma once

// Keypoint overlay rendering: fused keypoints reprojected into each
// camera and drawn as colored square markers, filtered by attention.

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "kp3d/geometry.hpp"
#include "kp3d/simenv.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

// One fixed color per keypoint index; the same k maps to the same color
// in every view.
inline std::array<float, 3> keypoint_color(int k) {
    static const std::array<std::array<float, 3>, 8> kPalette{{{1.0f, 0.1f, 0.1f},
                                                               {0.1f, 1.0f, 0.1f},
                                                               {0.2f, 0.3f, 1.0f},
                                                               {1.0f, 1.0f, 0.1f},
                                                               {1.0f, 0.2f, 1.0f},
                                                               {0.1f, 1.0f, 1.0f},
                                                               {1.0f, 0.6f, 0.1f},
                                                               {0.7f, 0.7f, 0.7f}}};
    return kPalette[k % kPalette.size()];
}

inline void draw_marker(Tensor<float>& image, int cx, int cy, const std::array<float, 3>& color) {
    int h = image.shape()[1], w = image.shape()[2];
    auto& d = image.data();
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            int x = cx + dx, y = cy + dy;
            if (x < 0 || x >= w || y < 0 || y >= h) continue;
            for (int c = 0; c < 3; ++c)
                d[static_cast<std::size_t>(c) * h * w + y * w + x] = color[c];
        }
}

// Markers are placed at round(project(fused) * image size); keypoints
// behind the camera or below the attention threshold are skipped.
inline Tensor<float> overlay_frame(const Tensor<float>& image, const std::vector<float>& fused,
                                   const std::vector<float>& attention, const Camera& cam,
                                   double attention_threshold) {
    Tensor<float> out = image.clone_detached();
    int h = image.shape()[1], w = image.shape()[2];
    int K = static_cast<int>(fused.size()) / 3;
    for (int k = 0; k < K; ++k) {
        if (attention[k] < attention_threshold) continue;
        WorldPoint p{fused[3 * k], fused[3 * k + 1], fused[3 * k + 2]};
        CameraPoint q;
        try {
            q = project(p, cam);
        } catch (const BehindCameraError&) {
            continue;
        }
        int px = static_cast<int>(std::lround(q.u * w));
        int py = static_cast<int>(std::lround(q.v * h));
        if (px < 0 || px >= w || py < 0 || py >= h) continue;
        draw_marker(out, px, py, keypoint_color(k));
    }
    return out;
}

// Text dump: one line per keypoint with world position and attention.
inline void write_keypoint_dump(const std::string& path, const std::vector<float>& fused,
                                const std::vector<float>& attention) {
    std::ofstream f(path);
    require(static_cast<bool>(f), "cannot write keypoint dump " + path);
    int K = static_cast<int>(fused.size()) / 3;
    f << "k x y z attention\n";
    for (int k = 0; k < K; ++k) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f\n", k, fused[3 * k],
                      fused[3 * k + 1], fused[3 * k + 2], attention[k]);
        f << buf;
    }
}

}  // namespace kp3d
