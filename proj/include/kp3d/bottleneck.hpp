#pragma once

// Differentiable 3D keypoint bottleneck: spatial softmax beliefs,
// expected uvd extraction, resampling, attention-weighted multi-camera
// fusion, reprojection to Gaussian maps, and the shift-augmentation
// coordinate corrections.

#include <cstdint>
#include <vector>

#include "kp3d/geometry.hpp"
#include "kp3d/nets.hpp"
#include "kp3d/random.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

// Per-camera integer pixel shift; images are shifted with replicate
// padding and keypoint coordinates corrected to match.
struct ShiftSpec {
    int dx = 0;
    int dy = 0;
};

// Shifts image content by (dx, dy) pixels (positive = right/down),
// replicate padding at the exposed border. Operates on raw data; the
// input image is a constant w.r.t. the graph.
template <typename T>
Tensor<T> shift_image(const Tensor<T>& image, const ShiftSpec& shift) {
    const Shape& s = image.shape();
    require(s.size() == 3, "shift_image: expects (C,H,W)");
    int c = s[0], h = s[1], w = s[2];
    std::vector<T> out(image.numel());
    const auto& iv = image.data();
    for (int ci = 0; ci < c; ++ci) {
        const T* ip = iv.data() + static_cast<std::size_t>(ci) * h * w;
        T* op = out.data() + static_cast<std::size_t>(ci) * h * w;
        for (int y = 0; y < h; ++y) {
            int sy = std::clamp(y - shift.dy, 0, h - 1);
            for (int x = 0; x < w; ++x) {
                int sx = std::clamp(x - shift.dx, 0, w - 1);
                op[y * w + x] = ip[sy * w + sx];
            }
        }
    }
    return Tensor<T>::from(s, std::move(out));
}

// ---------------------------------------------------------------------------
// Expected camera coordinates from a heatmap/depth-map pair.
//
// Grid convention: a cell at row i, column j (0-based) carries the
// 1-based coordinates u = (j+1)/S (horizontal) and v = (i+1)/S.
// E[u] = (1/S) sum u.H, E[v] = (1/S) sum v.H, E[d] = sum D.H.

template <typename T>
Tensor<T> expected_uvd(const Tensor<T>& heatmap, const Tensor<T>& depthmap) {
    const Shape& s = heatmap.shape();
    require(s.size() == 3 && s[1] == s[2], "expected_uvd: heatmap must be (K,S,S)");
    check_same_shape(heatmap, depthmap, "expected_uvd");
    int K = s[0], S = s[1];
    std::vector<T> out(static_cast<std::size_t>(K) * 3, T(0));
    const auto& hv = heatmap.data();
    const auto& dv = depthmap.data();
    for (int k = 0; k < K; ++k) {
        const T* hp = hv.data() + static_cast<std::size_t>(k) * S * S;
        const T* dp = dv.data() + static_cast<std::size_t>(k) * S * S;
        double eu = 0, ev = 0, ed = 0;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                double hval = hp[i * S + j];
                eu += (j + 1) * hval;
                ev += (i + 1) * hval;
                ed += dp[i * S + j] * hval;
            }
        out[3 * k] = static_cast<T>(eu / S);
        out[3 * k + 1] = static_cast<T>(ev / S);
        out[3 * k + 2] = static_cast<T>(ed);
    }
    auto bwd = [K, S](Node<T>& n) {
        auto& ph = *n.parents[0];
        auto& pd = *n.parents[1];
        for (int k = 0; k < K; ++k) {
            T gu = n.grad[3 * k], gv = n.grad[3 * k + 1], gd = n.grad[3 * k + 2];
            const std::size_t base = static_cast<std::size_t>(k) * S * S;
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    std::size_t idx = base + i * S + j;
                    if (ph.requires_grad)
                        ph.grad[idx] += gu * T(j + 1) / T(S) + gv * T(i + 1) / T(S) +
                                        gd * pd.value[idx];
                    if (pd.requires_grad) pd.grad[idx] += gd * ph.value[idx];
                }
        }
    };
    return detail::make_op<T>("expected_uvd", {K, 3}, std::move(out), {heatmap, depthmap},
                              std::move(bwd));
}

// Spatial standard deviation of the heatmap around (E[u], E[v]):
// sigma = sqrt( sum_{i,j} ||(u,v) - (Eu,Ev)||^2 H(i,j) ).
template <typename T>
Tensor<T> spatial_std(const Tensor<T>& heatmap, const Tensor<T>& uvd) {
    const Shape& s = heatmap.shape();
    require(s.size() == 3 && s[1] == s[2], "spatial_std: heatmap must be (K,S,S)");
    require(uvd.shape() == Shape({s[0], 3}), "spatial_std: uvd must be (K,3)");
    int K = s[0], S = s[1];
    std::vector<T> out(K);
    const auto& hv = heatmap.data();
    const auto& ev = uvd.data();
    for (int k = 0; k < K; ++k) {
        const T* hp = hv.data() + static_cast<std::size_t>(k) * S * S;
        double eu = ev[3 * k], evv = ev[3 * k + 1];
        double var = 0;
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                double du = (j + 1) / static_cast<double>(S) - eu;
                double dv = (i + 1) / static_cast<double>(S) - evv;
                var += (du * du + dv * dv) * hp[i * S + j];
            }
        out[k] = static_cast<T>(std::sqrt(std::max(0.0, var)));
    }
    auto bwd = [K, S](Node<T>& n) {
        auto& ph = *n.parents[0];
        auto& pe = *n.parents[1];
        for (int k = 0; k < K; ++k) {
            double sig = n.value[k];
            if (sig < 1e-12) continue;  // subgradient 0 at the one-hot point
            T g = n.grad[k];
            double eu = pe.value[3 * k], evv = pe.value[3 * k + 1];
            const std::size_t base = static_cast<std::size_t>(k) * S * S;
            double geu = 0, gev = 0;
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    double du = (j + 1) / static_cast<double>(S) - eu;
                    double dv = (i + 1) / static_cast<double>(S) - evv;
                    double h = ph.value[base + i * S + j];
                    if (ph.requires_grad)
                        ph.grad[base + i * S + j] +=
                            static_cast<T>(g * (du * du + dv * dv) / (2.0 * sig));
                    geu += -du * h / sig;
                    gev += -dv * h / sig;
                }
            if (pe.requires_grad) {
                pe.grad[3 * k] += static_cast<T>(g * geu);
                pe.grad[3 * k + 1] += static_cast<T>(g * gev);
            }
        }
    };
    return detail::make_op<T>("spatial_std", {K}, std::move(out), {heatmap, uvd}, std::move(bwd));
}

// Train-time resampling: u' = Eu + a.sigma, v' = Ev + b.sigma with
// a,b ~ N(0, nu) drawn by the caller. Depth is never perturbed.
template <typename T>
Tensor<T> resample_uvd(const Tensor<T>& uvd, const Tensor<T>& sigma,
                       const std::vector<T>& noise_ab) {
    const Shape& s = uvd.shape();
    int K = s[0];
    require(s == Shape({K, 3}) && sigma.shape() == Shape({K}), "resample_uvd: bad shapes");
    require(noise_ab.size() == static_cast<std::size_t>(2 * K),
            "resample_uvd: noise must have 2K entries");
    std::vector<T> out(uvd.data());
    const auto& sg = sigma.data();
    for (int k = 0; k < K; ++k) {
        out[3 * k] += noise_ab[2 * k] * sg[k];
        out[3 * k + 1] += noise_ab[2 * k + 1] * sg[k];
    }
    auto bwd = [K, noise_ab](Node<T>& n) {
        auto& pu = *n.parents[0];
        auto& ps = *n.parents[1];
        for (int k = 0; k < K; ++k) {
            if (pu.requires_grad) {
                pu.grad[3 * k] += n.grad[3 * k];
                pu.grad[3 * k + 1] += n.grad[3 * k + 1];
                pu.grad[3 * k + 2] += n.grad[3 * k + 2];
            }
            if (ps.requires_grad)
                ps.grad[k] += n.grad[3 * k] * noise_ab[2 * k] +
                              n.grad[3 * k + 1] * noise_ab[2 * k + 1];
        }
    };
    return detail::make_op<T>("resample_uvd", s, std::move(out), {uvd, sigma}, std::move(bwd));
}

// Softmax over keypoints of the spatial mean of each confidence map.
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& confidence) {
    return softmax_vec(channel_mean(confidence));
}

// Attention-weighted average of per-camera world predictions. Weights
// for keypoint k are A_n^k / sum_m A_m^k.
template <typename T>
Tensor<T> fuse_world(const std::vector<Tensor<T>>& points,
                     const std::vector<Tensor<T>>& attention) {
    require(!points.empty() && points.size() == attention.size(),
            "fuse_world: need matching nonempty point/attention lists");
    int N = static_cast<int>(points.size());
    int K = points[0].shape()[0];
    for (int n = 0; n < N; ++n) {
        require(points[n].shape() == Shape({K, 3}), "fuse_world: points must be (K,3)");
        require(attention[n].shape() == Shape({K}), "fuse_world: attention must be (K)");
    }
    std::vector<T> out(static_cast<std::size_t>(K) * 3, T(0));
    std::vector<double> denom(K, 0.0);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) denom[k] += attention[n].data()[k];
    for (int n = 0; n < N; ++n) {
        const auto& pv = points[n].data();
        const auto& av = attention[n].data();
        for (int k = 0; k < K; ++k) {
            double w = av[k] / denom[k];
            for (int c = 0; c < 3; ++c)
                out[3 * k + c] += static_cast<T>(w * pv[3 * k + c]);
        }
    }
    std::vector<Tensor<T>> parents;
    for (auto& p : points) parents.push_back(p);
    for (auto& a : attention) parents.push_back(a);
    auto bwd = [N, K, denom](Node<T>& n) {
        // parents: N point tensors then N attention tensors
        for (int m = 0; m < N; ++m) {
            auto& pp = *n.parents[m];
            auto& pa = *n.parents[N + m];
            for (int k = 0; k < K; ++k) {
                double a = pa.value[k];
                double w = a / denom[k];
                if (pp.requires_grad)
                    for (int c = 0; c < 3; ++c)
                        pp.grad[3 * k + c] += static_cast<T>(w * n.grad[3 * k + c]);
                if (pa.requires_grad) {
                    // d fused / d A_m^k = (p_m - fused) / sum_j A_j^k
                    double acc = 0;
                    for (int c = 0; c < 3; ++c)
                        acc += (pp.value[3 * k + c] - n.value[3 * k + c]) / denom[k] *
                               n.grad[3 * k + c];
                    pa.grad[k] += static_cast<T>(acc);
                }
            }
        }
    };
    return detail::make_op<T>("fuse_world", {K, 3}, std::move(out), std::move(parents),
                              std::move(bwd));
}

// Gaussian maps from reprojected keypoints: unscaled value
// exp(-d/2 * ||p - pbar||^2) with p measured in heatmap pixel units
// (covariance I2 / d in pixels^2, so nearer points get a wider span),
// scaled by K * Abar_k. Keypoints flagged invalid (behind camera)
// produce an all-zero channel.
template <typename T>
Tensor<T> gaussian_maps(const Tensor<T>& uvd, const Tensor<T>& attention_avg, int S,
                        const std::vector<std::uint8_t>& valid) {
    int K = uvd.shape()[0];
    require(uvd.shape() == Shape({K, 3}), "gaussian_maps: uvd must be (K,3)");
    require(attention_avg.shape() == Shape({K}), "gaussian_maps: attention must be (K)");
    require(valid.empty() || valid.size() == static_cast<std::size_t>(K),
            "gaussian_maps: valid mask size mismatch");
    std::vector<T> out(static_cast<std::size_t>(K) * S * S, T(0));
    const auto& qv = uvd.data();
    const auto& av = attention_avg.data();
    for (int k = 0; k < K; ++k) {
        if (!valid.empty() && !valid[k]) continue;
        double u = qv[3 * k], v = qv[3 * k + 1], d = qv[3 * k + 2];
        double amp = K * static_cast<double>(av[k]);
        T* op = out.data() + static_cast<std::size_t>(k) * S * S;
        for (int i = 0; i < S; ++i) {
            double dv = (i + 1) - v * S;
            for (int j = 0; j < S; ++j) {
                double du = (j + 1) - u * S;
                op[i * S + j] = static_cast<T>(amp * std::exp(-0.5 * d * (du * du + dv * dv)));
            }
        }
    }
    auto bwd = [K, S, valid](Node<T>& n) {
        auto& pq = *n.parents[0];
        auto& pa = *n.parents[1];
        for (int k = 0; k < K; ++k) {
            if (!valid.empty() && !valid[k]) continue;
            double u = pq.value[3 * k], v = pq.value[3 * k + 1], d = pq.value[3 * k + 2];
            double a = pa.value[k];
            const std::size_t base = static_cast<std::size_t>(k) * S * S;
            double gu = 0, gv = 0, gd = 0, ga = 0;
            for (int i = 0; i < S; ++i) {
                double dvv = (i + 1) - v * S;
                for (int j = 0; j < S; ++j) {
                    double du = (j + 1) - u * S;
                    double g = n.grad[base + i * S + j];
                    if (g == 0) continue;
                    double r2 = du * du + dvv * dvv;
                    double e = std::exp(-0.5 * d * r2);
                    double amp_e = K * a * e;
                    // d/du_norm of (j+1 - u*S) is -S
                    gu += g * amp_e * d * du * S;
                    gv += g * amp_e * d * dvv * S;
                    gd += g * amp_e * (-0.5 * r2);
                    ga += g * K * e;
                }
            }
            if (pq.requires_grad) {
                pq.grad[3 * k] += static_cast<T>(gu);
                pq.grad[3 * k + 1] += static_cast<T>(gv);
                pq.grad[3 * k + 2] += static_cast<T>(gd);
            }
            if (pa.requires_grad) pa.grad[k] += static_cast<T>(ga);
        }
    };
    return detail::make_op<T>("gaussian_maps", {K, S, S}, std::move(out), {uvd, attention_avg},
                              std::move(bwd));
}

// f^-1: express shifted-image coordinates in the unshifted frame.
template <typename T>
Tensor<T> shift_correct_pre(const Tensor<T>& uvd, const ShiftSpec& shift, int image_w,
                            int image_h) {
    int K = uvd.shape()[0];
    std::vector<T> delta(static_cast<std::size_t>(K) * 3, T(0));
    for (int k = 0; k < K; ++k) {
        delta[3 * k] = static_cast<T>(-shift.dx / static_cast<double>(image_w));
        delta[3 * k + 1] = static_cast<T>(-shift.dy / static_cast<double>(image_h));
    }
    return add(uvd, Tensor<T>::from(uvd.shape(), std::move(delta)));
}

// f: map reprojected keypoints back into the shifted frame.
template <typename T>
Tensor<T> shift_correct_post(const Tensor<T>& uvd, const ShiftSpec& shift, int image_w,
                             int image_h) {
    ShiftSpec inv{-shift.dx, -shift.dy};
    return shift_correct_pre(uvd, inv, image_w, image_h);
}

// ---------------------------------------------------------------------------
// Full pipeline

template <typename T>
struct CameraBelief {
    Tensor<T> confidence;  // (K,S,S) logits
    Tensor<T> heatmap;     // (K,S,S) spatial softmax
    Tensor<T> depthmap;    // (K,S,S)
    Tensor<T> expected;    // (K,3) expected uvd in (possibly shifted) frame
    Tensor<T> sigma;       // (K)
    Tensor<T> attention;   // (K)
    Tensor<T> used_uvd;    // (K,3) resampled + corrected, fed downstream
    Tensor<T> world;       // (K,3) per-camera world prediction
};

template <typename T>
struct BottleneckOutput {
    std::vector<CameraBelief<T>> views;
    Tensor<T> fused;          // (K,3)
    Tensor<T> attention_avg;  // (K)
    std::vector<Tensor<T>> gaussians;        // per camera (K,S,S), empty if !decode
    std::vector<Tensor<T>> reconstructions;  // per camera (C,H,W), empty if !decode
    int behind_camera_events = 0;
};

struct BottleneckOptions {
    bool training = false;        // enables resampling noise
    double nu = 0.0;              // resampling noise level
    bool offset_correction = true;
    bool decode = true;
    int image_size = 64;
};

namespace detail {

// Offset between the heatmap grid convention (cell j reads as (j+1)/S)
// and the camera pixel convention (pixel x reads as (x+0.5)/W): the
// encoder's S-grid cell j is produced by a receptive field centred on
// image pixel (W/S)*j, so grid coordinates overshoot camera coordinates
// by a constant (W/S - 0.5)/W. Keypoint uv leaves the grid convention
// through this calibration before unprojection, and re-enters it when
// reprojected keypoints are painted as gaussian maps.
inline double grid_camera_offset(int S, int image_size) {
    return (static_cast<double>(image_size) / S - 0.5) / image_size;
}

template <typename T>
Tensor<T> shift_uv(const Tensor<T>& uvd, double offset) {
    int K = uvd.shape()[0];
    std::vector<T> c(static_cast<std::size_t>(K) * 3);
    for (int k = 0; k < K; ++k) {
        c[3 * k] = static_cast<T>(offset);
        c[3 * k + 1] = static_cast<T>(offset);
        c[3 * k + 2] = T(0);
    }
    return add(uvd, Tensor<T>::from({K, 3}, std::move(c)));
}

}  // namespace detail

// Core path from per-camera encoder outputs. Shifts may be empty (no
// augmentation). rng is required only when training with nu > 0.
template <typename T>
BottleneckOutput<T> run_bottleneck(const std::vector<EncoderOutput<T>>& enc_out,
                                   const std::vector<Camera>& cams,
                                   const std::vector<ShiftSpec>& shifts,
                                   const BottleneckOptions& opt, Rng* rng = nullptr) {
    int N = static_cast<int>(enc_out.size());
    require(N >= 1 && cams.size() == enc_out.size(), "run_bottleneck: need >= 1 camera");
    require(shifts.empty() || shifts.size() == enc_out.size(),
            "run_bottleneck: shift list size mismatch");
    int K = enc_out[0].confidence.shape()[0];
    int S = enc_out[0].confidence.shape()[1];

    BottleneckOutput<T> out;
    std::vector<Tensor<T>> world_points, attentions;
    for (int n = 0; n < N; ++n) {
        CameraBelief<T> b;
        b.confidence = enc_out[n].confidence;
        b.depthmap = enc_out[n].depth;
        b.heatmap = spatial_softmax(b.confidence);
        Tensor<T> expected_grid = expected_uvd(b.heatmap, b.depthmap);
        b.sigma = spatial_std(b.heatmap, expected_grid);
        b.expected = detail::shift_uv(expected_grid,
                                      -detail::grid_camera_offset(S, opt.image_size));
        b.attention = attention_scores(b.confidence);

        Tensor<T> uvd = b.expected;
        if (opt.training && opt.nu > 0.0) {
            require(rng != nullptr, "run_bottleneck: rng required for resampling noise");
            std::vector<T> ab(static_cast<std::size_t>(2 * K));
            for (auto& x : ab) x = static_cast<T>(rng->normal(0.0, opt.nu));
            uvd = resample_uvd(uvd, b.sigma, ab);
        }
        ShiftSpec shift = shifts.empty() ? ShiftSpec{} : shifts[n];
        if (opt.offset_correction && (shift.dx != 0 || shift.dy != 0))
            uvd = shift_correct_pre(uvd, shift, opt.image_size, opt.image_size);
        b.used_uvd = uvd;
        b.world = unproject_points(uvd, cams[n]);
        world_points.push_back(b.world);
        attentions.push_back(b.attention);
        out.views.push_back(std::move(b));
    }

    out.fused = fuse_world(world_points, attentions);
    Tensor<T> asum = attentions[0];
    for (int n = 1; n < N; ++n) asum = add(asum, attentions[n]);
    out.attention_avg = mul_scalar(asum, static_cast<T>(1.0 / N));

    if (opt.decode) {
        for (int n = 0; n < N; ++n) {
            std::vector<std::uint8_t> valid;
            Tensor<T> reproj = project_points(out.fused, cams[n], BehindPolicy::Mask, &valid);
            for (auto v : valid)
                if (!v) ++out.behind_camera_events;
            ShiftSpec shift = shifts.empty() ? ShiftSpec{} : shifts[n];
            if (opt.offset_correction && (shift.dx != 0 || shift.dy != 0))
                reproj = shift_correct_post(reproj, shift, opt.image_size, opt.image_size);
            // back into the grid convention the painter uses
            reproj = detail::shift_uv(reproj, detail::grid_camera_offset(S, opt.image_size));
            out.gaussians.push_back(gaussian_maps(reproj, out.attention_avg, S, valid));
        }
    }
    return out;
}

// Convenience wrapper: encode images, run the bottleneck, decode
// reconstructions. Images should already carry the shifts listed in
// `shifts` (the corrections assume so).
template <typename T>
BottleneckOutput<T> full_bottleneck(const std::vector<Tensor<T>>& images,
                                    const AutoencoderParams<T>& params,
                                    const std::vector<Tensor<T>>& first_frame_features,
                                    const std::vector<Camera>& cams,
                                    const std::vector<ShiftSpec>& shifts,
                                    const BottleneckOptions& opt, Rng* rng = nullptr) {
    int N = static_cast<int>(images.size());
    require(params.encoders.size() == images.size(), "full_bottleneck: encoder count mismatch");
    std::vector<EncoderOutput<T>> enc_out;
    for (int n = 0; n < N; ++n) enc_out.push_back(params.encoders[n].forward(images[n]));
    BottleneckOutput<T> out = run_bottleneck(enc_out, cams, shifts, opt, rng);
    if (opt.decode) {
        require(first_frame_features.size() == images.size(),
                "full_bottleneck: first-frame feature count mismatch");
        for (int n = 0; n < N; ++n)
            out.reconstructions.push_back(
                params.decoders[n].forward(out.gaussians[n], first_frame_features[n]));
    }
    return out;
}

}  // namespace kp3d
