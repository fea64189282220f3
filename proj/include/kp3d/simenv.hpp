#pragma once

// Deterministic ray-cast sphere renderer plus the two built-in
// environments: a 4-sphere validation scene (static or orbiting) and a
// planar pusher task. All positions are in a unit workspace mapped to
// world coordinates centered at the origin.

#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "kp3d/geometry.hpp"
#include "kp3d/random.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

struct SceneSphere {
    Vec3 center;
    double radius = 0.1;
    std::array<float, 3> color{1.f, 1.f, 1.f};
};

struct Scene {
    std::vector<SceneSphere> spheres;
    std::array<float, 3> background{0.08f, 0.08f, 0.10f};
};

// Three cameras at 120 degree azimuth spacing, elevation 30 degrees,
// all targeting the workspace center.
inline std::vector<Camera> default_camera_rig(int num_cameras = 3, double distance = 2.1,
                                              double elevation_deg = 30.0) {
    std::vector<Camera> cams;
    Vec3 target{0.0, 0.08, 0.0};
    for (int n = 0; n < num_cameras; ++n) {
        double az = 2.0 * M_PI * n / num_cameras;
        double el = elevation_deg * M_PI / 180.0;
        Vec3 eye{target.x + distance * std::cos(el) * std::cos(az),
                 target.y + distance * std::sin(el),
                 target.z + distance * std::cos(el) * std::sin(az)};
        Camera cam;
        cam.intrinsics = {1.1, 1.1, 0.5, 0.5};
        cam.extrinsics = look_at(eye, target, Vec3{0, 1, 0});
        cam.validate();
        cams.push_back(cam);
    }
    return cams;
}

// Flat-shaded z-buffered render of the scene: for every pixel the ray
// through its center is intersected with all spheres and the nearest
// hit wins. Bit-deterministic given (scene, camera, size).
inline Tensor<float> render(const Scene& scene, const Camera& cam, int height, int width) {
    std::vector<float> img(static_cast<std::size_t>(3) * height * width);
    Vec3 origin = cam.center();
    for (int i = 0; i < height; ++i) {
        double v = (i + 0.5) / height;
        for (int j = 0; j < width; ++j) {
            double u = (j + 0.5) / width;
            Vec3 far = unproject({u, v, 1.0}, cam);
            Vec3 dir = (far - origin).normalized();
            double best_t = -1.0;
            const SceneSphere* hit = nullptr;
            for (const auto& sp : scene.spheres) {
                Vec3 oc = origin - sp.center;
                double b = oc.dot(dir);
                double c = oc.dot(oc) - sp.radius * sp.radius;
                double disc = b * b - c;
                if (disc < 0) continue;
                double t = -b - std::sqrt(disc);
                if (t <= kDepthMin) continue;
                if (!hit || t < best_t) {
                    best_t = t;
                    hit = &sp;
                }
            }
            const std::array<float, 3>& col = hit ? hit->color : scene.background;
            for (int c = 0; c < 3; ++c)
                img[static_cast<std::size_t>(c) * height * width + i * width + j] = col[c];
        }
    }
    return Tensor<float>::from({3, height, width}, std::move(img));
}

// Binary PPM (P6) export, 8 bits per channel.
inline void write_ppm(const std::string& path, const Tensor<float>& image) {
    const Shape& s = image.shape();
    require(s.size() == 3 && s[0] == 3, "write_ppm: expects (3,H,W)");
    int h = s[1], w = s[2];
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), "write_ppm: cannot open " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    const auto& d = image.data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) {
                float x = d[static_cast<std::size_t>(c) * h * w + i * w + j];
                int byte = static_cast<int>(std::lround(std::min(1.0f, std::max(0.0f, x)) * 255));
                f.put(static_cast<char>(byte));
            }
}

// ---------------------------------------------------------------------------
// Validation scene: four colored spheres, optionally orbiting the
// workspace center on fixed circles.

struct ValidationSceneSpec {
    bool orbiting = false;
    bool colorless = false;
    double sphere_radius = 0.10;
    std::array<double, 4> orbit_radius{0.18, 0.27, 0.36, 0.45};
    std::array<double, 4> angular_speed{0.9, -0.7, 0.5, -0.4};
    std::array<double, 4> phase{0.0, 1.7, 3.1, 4.6};

    std::vector<Vec3> centers(double t) const {
        std::vector<Vec3> out;
        for (int k = 0; k < 4; ++k) {
            double ang = phase[k] + (orbiting ? angular_speed[k] * t : 0.0);
            out.push_back({orbit_radius[k] * std::cos(ang), sphere_radius,
                           orbit_radius[k] * std::sin(ang)});
        }
        return out;
    }

    // Diameter of the region swept by the sphere surfaces.
    double scene_diameter() const {
        double rmax = 0;
        for (double r : orbit_radius) rmax = std::max(rmax, r);
        return 2.0 * (rmax + sphere_radius);
    }

    Scene scene(double t) const {
        static const std::array<std::array<float, 3>, 4> kColors{{{0.95f, 0.15f, 0.15f},
                                                                  {0.15f, 0.85f, 0.20f},
                                                                  {0.20f, 0.35f, 0.95f},
                                                                  {0.95f, 0.85f, 0.15f}}};
        Scene s;
        auto cs = centers(t);
        for (int k = 0; k < 4; ++k) {
            SceneSphere sp;
            sp.center = cs[k];
            sp.radius = sphere_radius;
            sp.color = colorless ? std::array<float, 3>{0.6f, 0.6f, 0.6f} : kColors[k];
            s.spheres.push_back(sp);
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Pusher: a robot disk pushes a ball disk toward a goal in the unit
// workspace. Rendered as spheres resting on the ground plane.

struct PusherConfig {
    int image_size = 64;
    int num_cameras = 3;
    bool colorless = false;
    bool append_goal_state = false;  // optional additional-state vector
    double robot_radius = 0.07;
    double ball_radius = 0.07;
    double goal_radius = 0.05;
    int horizon = 100;
    double action_limit = 0.05;
    double goal_tolerance = 0.05;
};

struct PusherState {
    double rx = 0, ry = 0;  // robot
    double bx = 0, by = 0;  // ball
    double gx = 0, gy = 0;  // goal
    int step = 0;
};

struct Observation {
    std::vector<Tensor<float>> views;
    std::vector<float> extra_state;
};

inline Vec3 workspace_to_world(double wx, double wy, double height) {
    return {wx - 0.5, height, wy - 0.5};
}

class PusherEnv {
public:
    explicit PusherEnv(const PusherConfig& cfg = {},
                       std::vector<Camera> cams = default_camera_rig())
        : cfg_(cfg), cams_(std::move(cams)) {}

    const PusherConfig& config() const { return cfg_; }
    const std::vector<Camera>& cameras() const { return cams_; }
    const PusherState& state() const { return state_; }
    void set_state(const PusherState& s) { state_ = s; }
    const Observation& canonical_frame() const { return canonical_; }

    Observation reset(std::uint64_t seed) {
        Rng rng(seed);
        state_ = PusherState{};
        state_.rx = rng.uniform(0.15, 0.25);
        state_.ry = rng.uniform(0.15, 0.25);
        state_.bx = rng.uniform(0.45, 0.55);
        state_.by = rng.uniform(0.45, 0.55);
        state_.gx = rng.uniform(0.70, 0.80);
        state_.gy = rng.uniform(0.70, 0.80);
        state_.step = 0;
        canonical_ = observe();
        return canonical_;
    }

    struct StepResult {
        Observation obs;
        double reward = 0;
        bool done = false;
    };

    StepResult step(double ax, double ay) {
        double lim = cfg_.action_limit;
        ax = std::clamp(ax, -lim, lim);
        ay = std::clamp(ay, -lim, lim);
        state_.rx = std::clamp(state_.rx + ax, 0.0, 1.0);
        state_.ry = std::clamp(state_.ry + ay, 0.0, 1.0);
        // contact: displace the ball along the contact normal by the
        // overlap depth
        double dx = state_.bx - state_.rx;
        double dy = state_.by - state_.ry;
        double dist = std::sqrt(dx * dx + dy * dy);
        double min_dist = cfg_.robot_radius + cfg_.ball_radius;
        if (dist < min_dist) {
            double nx, ny;
            if (dist > 1e-9) {
                nx = dx / dist;
                ny = dy / dist;
            } else {
                nx = 1.0;
                ny = 0.0;
            }
            double overlap = min_dist - dist;
            state_.bx = std::clamp(state_.bx + nx * overlap, 0.0, 1.0);
            state_.by = std::clamp(state_.by + ny * overlap, 0.0, 1.0);
        }
        ++state_.step;
        double ball_goal = std::hypot(state_.bx - state_.gx, state_.by - state_.gy);
        double robot_ball = std::hypot(state_.rx - state_.bx, state_.ry - state_.by);
        StepResult res;
        res.reward = -ball_goal - 0.1 * robot_ball;
        res.done = state_.step >= cfg_.horizon || ball_goal < cfg_.goal_tolerance;
        res.obs = observe();
        return res;
    }

    Scene scene() const {
        Scene s;
        SceneSphere robot{workspace_to_world(state_.rx, state_.ry, cfg_.robot_radius),
                          cfg_.robot_radius,
                          {0.95f, 0.20f, 0.15f}};
        SceneSphere ball{workspace_to_world(state_.bx, state_.by, cfg_.ball_radius),
                         cfg_.ball_radius,
                         {0.20f, 0.40f, 0.95f}};
        SceneSphere goal{workspace_to_world(state_.gx, state_.gy, cfg_.goal_radius),
                         cfg_.goal_radius,
                         {0.15f, 0.85f, 0.25f}};
        if (cfg_.colorless)
            robot.color = ball.color = goal.color = {0.6f, 0.6f, 0.6f};
        s.spheres = {robot, ball, goal};
        return s;
    }

    Observation observe() const {
        Observation obs;
        Scene s = scene();
        for (const auto& cam : cams_)
            obs.views.push_back(render(s, cam, cfg_.image_size, cfg_.image_size));
        if (cfg_.append_goal_state) {
            obs.extra_state.push_back(static_cast<float>(state_.gx));
            obs.extra_state.push_back(static_cast<float>(state_.gy));
        }
        return obs;
    }

    // Exact centers of robot, ball, and goal marker.
    std::vector<WorldPoint> ground_truth_points() const {
        return {workspace_to_world(state_.rx, state_.ry, cfg_.robot_radius),
                workspace_to_world(state_.bx, state_.by, cfg_.ball_radius),
                workspace_to_world(state_.gx, state_.gy, cfg_.goal_radius)};
    }

private:
    PusherConfig cfg_;
    std::vector<Camera> cams_;
    PusherState state_;
    Observation canonical_;
};

}  // namespace kp3d
