#pragma once

// Named finite-difference checks covering every differentiable op.
// Inputs are drawn away from kinks (relu/min/clamp boundaries) so the
// central-difference oracle stays valid.

#include <functional>
#include <string>
#include <vector>

#include "kp3d/bottleneck.hpp"
#include "kp3d/conv.hpp"
#include "kp3d/geometry.hpp"
#include "kp3d/gradcheck.hpp"
#include "kp3d/losses.hpp"
#include "kp3d/oracle.hpp"
#include "kp3d/simenv.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

struct OpCheck {
    std::string name;
    std::function<GradCheckReport(std::uint64_t seed)> run;
};

namespace detail {

using DT = Tensor<double>;

inline DT rand_tensor(Rng& rng, const Shape& s, double lo, double hi, double keepout = 0.0) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) {
        do {
            x = rng.uniform(lo, hi);
        } while (keepout > 0.0 && std::abs(x) < keepout);
    }
    return DT::from(s, std::move(v), true);
}

// Project the op output to a scalar against a fixed random cotangent.
inline DT to_scalar(const DT& y, Rng& rng) {
    std::vector<double> c(y.numel());
    for (auto& x : c) x = rng.uniform(-1.0, 1.0);
    return sum(mul(y, DT::from(y.shape(), std::move(c))));
}

}  // namespace detail

inline std::vector<OpCheck> gradcheck_suite() {
    using detail::rand_tensor;
    using detail::to_scalar;
    using DT = Tensor<double>;
    std::vector<OpCheck> checks;

    auto binary = [](const char* name, auto op, double lo, double hi, double keepout = 0.0) {
        return OpCheck{name, [=](std::uint64_t seed) {
                           Rng rng(seed);
                           auto a = rand_tensor(rng, {3, 4}, lo, hi, keepout);
                           auto b = rand_tensor(rng, {3, 4}, lo, hi, keepout);
                           return gradient_check(
                               [&](const std::vector<DT>& in) {
                                   Rng c2(seed + 1);
                                   return to_scalar(op(in[0], in[1]), c2);
                               },
                               {a, b});
                       }};
    };
    auto unary = [](const char* name, auto op, double lo, double hi, double keepout = 0.0) {
        return OpCheck{name, [=](std::uint64_t seed) {
                           Rng rng(seed);
                           auto a = rand_tensor(rng, {3, 4}, lo, hi, keepout);
                           return gradient_check(
                               [&](const std::vector<DT>& in) {
                                   Rng c2(seed + 1);
                                   return to_scalar(op(in[0]), c2);
                               },
                               {a});
                       }};
    };

    checks.push_back(binary("add", [](const DT& a, const DT& b) { return add(a, b); }, -2, 2));
    checks.push_back(binary("sub", [](const DT& a, const DT& b) { return sub(a, b); }, -2, 2));
    checks.push_back(binary("mul", [](const DT& a, const DT& b) { return mul(a, b); }, -2, 2));
    checks.push_back(
        binary("div", [](const DT& a, const DT& b) { return div(a, b); }, 0.5, 2.0));
    checks.push_back(binary(
        "minimum", [](const DT& a, const DT& b) { return minimum(a, b); }, -2, 2, 0.05));
    checks.push_back(
        unary("add_scalar", [](const DT& a) { return add_scalar(a, 0.7); }, -2, 2));
    checks.push_back(
        unary("mul_scalar", [](const DT& a) { return mul_scalar(a, -1.3); }, -2, 2));
    checks.push_back(unary("relu", [](const DT& a) { return relu(a); }, -2, 2, 0.05));
    checks.push_back(unary("tanh", [](const DT& a) { return tanh_t(a); }, -2, 2));
    checks.push_back(unary("softplus", [](const DT& a) { return softplus(a); }, -4, 4));
    checks.push_back(unary("exp", [](const DT& a) { return exp_t(a); }, -2, 2));
    checks.push_back(unary("log", [](const DT& a) { return log_t(a); }, 0.2, 3.0));
    checks.push_back(unary("sqrt", [](const DT& a) { return sqrt_t(a); }, 0.2, 3.0));
    checks.push_back(unary("square", [](const DT& a) { return square(a); }, -2, 2));
    checks.push_back(unary(
        "clamp", [](const DT& a) { return clamp_t(a, -1.0, 1.0); }, -2, 2, 0.05));
    checks.push_back(unary("sum", [](const DT& a) { return sum(a); }, -2, 2));
    checks.push_back(unary("mean", [](const DT& a) { return mean(a); }, -2, 2));
    checks.push_back(
        unary("reshape", [](const DT& a) { return reshape(a, {4, 3}); }, -2, 2));
    checks.push_back(unary("slice0", [](const DT& a) { return slice0(a, 1, 2); }, -2, 2));
    checks.push_back(binary(
        "concat0",
        [](const DT& a, const DT& b) { return concat0(std::vector<DT>{a, b}); }, -2, 2));
    checks.push_back(OpCheck{"matmul", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto a = rand_tensor(rng, {3, 4}, -1, 1);
                                 auto b = rand_tensor(rng, {4, 2}, -1, 1);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(matmul(in[0], in[1]), c2);
                                     },
                                     {a, b});
                             }});
    checks.push_back(OpCheck{"matvec", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto a = rand_tensor(rng, {3, 4}, -1, 1);
                                 auto b = rand_tensor(rng, {4}, -1, 1);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(matmul(in[0], in[1]), c2);
                                     },
                                     {a, b});
                             }});
    for (int stride : {1, 2}) {
        checks.push_back(OpCheck{
            "conv2d_s" + std::to_string(stride), [stride](std::uint64_t seed) {
                Rng rng(seed);
                auto x = rand_tensor(rng, {2, 6, 6}, -1, 1);
                auto w = rand_tensor(rng, {3, 2, 3, 3}, -1, 1);
                auto b = rand_tensor(rng, {3}, -1, 1);
                return gradient_check(
                    [&, stride](const std::vector<DT>& in) {
                        Rng c2(seed + 1);
                        return to_scalar(conv2d(in[0], in[1], in[2], stride), c2);
                    },
                    {x, w, b});
            }});
    }
    checks.push_back(unary("upsample2", [](const DT& a) { return upsample2(reshape(a, {1, 3, 4})); },
                           -2, 2));
    checks.push_back(
        unary("softmax_vec", [](const DT& a) { return softmax_vec(reshape(a, {12})); }, -2, 2));
    checks.push_back(unary(
        "spatial_softmax", [](const DT& a) { return spatial_softmax(reshape(a, {3, 2, 2})); }, -2,
        2));
    checks.push_back(unary(
        "channel_mean", [](const DT& a) { return channel_mean(reshape(a, {3, 2, 2})); }, -2, 2));
    checks.push_back(unary(
        "attention_scores", [](const DT& a) { return attention_scores(reshape(a, {3, 2, 2})); },
        -2, 2));

    checks.push_back(OpCheck{"expected_uvd", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto c = rand_tensor(rng, {2, 4, 4}, -1, 1);
                                 auto d = rand_tensor(rng, {2, 4, 4}, 0.5, 2.0);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         auto h = spatial_softmax(in[0]);
                                         return to_scalar(expected_uvd(h, in[1]), c2);
                                     },
                                     {c, d});
                             }});
    checks.push_back(OpCheck{"spatial_std", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto c = rand_tensor(rng, {2, 4, 4}, -1, 1);
                                 auto d = rand_tensor(rng, {2, 4, 4}, 0.5, 2.0);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         auto h = spatial_softmax(in[0]);
                                         auto e = expected_uvd(h, in[1]);
                                         return to_scalar(spatial_std(h, e), c2);
                                     },
                                     {c, d});
                             }});
    checks.push_back(OpCheck{"resample_uvd", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto e = rand_tensor(rng, {3, 3}, 0.2, 0.8);
                                 auto s = rand_tensor(rng, {3}, 0.05, 0.3);
                                 std::vector<double> noise(6);
                                 for (auto& x : noise) x = rng.normal(0.0, 1.0);
                                 return gradient_check(
                                     [&, noise](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(resample_uvd(in[0], in[1], noise), c2);
                                     },
                                     {e, s});
                             }});
    checks.push_back(OpCheck{"fuse_world", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto p0 = rand_tensor(rng, {3, 3}, -1, 1);
                                 auto p1 = rand_tensor(rng, {3, 3}, -1, 1);
                                 auto a0 = rand_tensor(rng, {3}, 0.1, 1.0);
                                 auto a1 = rand_tensor(rng, {3}, 0.1, 1.0);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(
                                             fuse_world(std::vector<DT>{in[0], in[1]},
                                                        std::vector<DT>{in[2], in[3]}),
                                             c2);
                                     },
                                     {p0, p1, a0, a1});
                             }});
    checks.push_back(OpCheck{"gaussian_maps", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto uvd = rand_tensor(rng, {2, 3}, 0.3, 0.7);
                                 uvd.data()[2] = rng.uniform(0.8, 2.0);  // depths positive
                                 uvd.data()[5] = rng.uniform(0.8, 2.0);
                                 auto a = rand_tensor(rng, {2}, 0.1, 0.9);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(gaussian_maps(in[0], in[1], 4, {}), c2);
                                     },
                                     {uvd, a});
                             }});
    checks.push_back(OpCheck{"project_points", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 Camera cam = default_camera_rig()[seed % 3];
                                 auto p = rand_tensor(rng, {3, 3}, -0.3, 0.3);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(project_points(in[0], cam), c2);
                                     },
                                     {p});
                             }});
    checks.push_back(OpCheck{"unproject_points", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 Camera cam = default_camera_rig()[seed % 3];
                                 auto q = rand_tensor(rng, {3, 3}, 0.3, 0.7);
                                 for (int k = 0; k < 3; ++k)
                                     q.data()[3 * k + 2] = rng.uniform(1.5, 2.5);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         Rng c2(seed + 1);
                                         return to_scalar(unproject_points(in[0], cam), c2);
                                     },
                                     {q});
                             }});
    checks.push_back(OpCheck{"loss_ae", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto r = rand_tensor(rng, {2, 4, 4}, 0, 1);
                                 auto t = rand_tensor(rng, {2, 4, 4}, 0, 1);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         return loss_ae(std::vector<DT>{in[0]},
                                                        std::vector<DT>{in[1]});
                                     },
                                     {r, t});
                             }});
    checks.push_back(OpCheck{"loss_multiview", [](std::uint64_t seed) {
        // The second pair argument is behind stop_gradient, so a naive
        // finite difference of the loss itself would disagree with the
        // intended gradient. The FD oracle is instead the frozen-peer
        // surrogate sum_{i != j} ||p_i - c_j|| with c_j held constant at
        // the evaluation point, whose gradient equals the stop-gradient
        // semantics exactly. The analytic side runs loss_multiview's own
        // backward.
        Rng rng(seed);
        std::vector<DT> ps{rand_tensor(rng, {3, 3}, -1, 1), rand_tensor(rng, {3, 3}, -1, 1),
                           rand_tensor(rng, {3, 3}, -1, 1)};
        GradCheckReport rep;

        DT loss = loss_multiview(ps);
        for (auto& p : ps) p.zero_grad();
        backward(loss);

        std::vector<DT> frozen;
        for (const auto& p : ps) frozen.push_back(p.clone_detached());
        auto surrogate = [&]() {
            NoGradGuard ng;
            double total = 0;
            int rows = ps[0].shape()[0];
            for (std::size_t i = 0; i < ps.size(); ++i)
                for (std::size_t j = 0; j < ps.size(); ++j) {
                    if (i == j) continue;
                    for (int r = 0; r < rows; ++r) {
                        double sq = 0;
                        for (int c = 0; c < 3; ++c) {
                            double d = ps[i].data()[r * 3 + c] - frozen[j].data()[r * 3 + c];
                            sq += d * d;
                        }
                        total += std::sqrt(sq);
                    }
                }
            return total;
        };
        const double eps = 1e-5;
        for (std::size_t ii = 0; ii < ps.size(); ++ii) {
            for (std::size_t c = 0; c < ps[ii].numel(); ++c) {
                double orig = ps[ii].data()[c];
                ps[ii].data()[c] = orig + eps;
                double fp = surrogate();
                ps[ii].data()[c] = orig - eps;
                double fm = surrogate();
                ps[ii].data()[c] = orig;
                double numeric = (fp - fm) / (2.0 * eps);
                double a = ps[ii].grad()[c];
                double rel =
                    std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
                if (rel > rep.max_rel_error) {
                    rep.max_rel_error = rel;
                    rep.worst_input = static_cast<int>(ii);
                    rep.worst_coord = c;
                }
            }
        }
        return rep;
    }});
    checks.push_back(OpCheck{"loss_separation", [](std::uint64_t seed) {
                                 Rng rng(seed);
                                 auto p = rand_tensor(rng, {4, 3}, -1, 1);
                                 return gradient_check(
                                     [&](const std::vector<DT>& in) {
                                         return loss_separation(in[0], 1000.0);
                                     },
                                     {p});
                             }});
    return checks;
}

struct SuiteResult {
    std::string name;
    double worst_error = 0.0;
    bool passed = false;
};

// Runs every registered check over the given seeds. tol is the
// per-coordinate relative-error bound.
inline std::vector<SuiteResult> run_gradcheck_suite(int num_seeds = 10, double tol = 1e-3) {
    std::vector<SuiteResult> results;
    for (const auto& chk : gradcheck_suite()) {
        SuiteResult r;
        r.name = chk.name;
        r.passed = true;
        for (int s = 0; s < num_seeds; ++s) {
            GradCheckReport rep = chk.run(1000 + 17 * s);
            r.worst_error = std::max(r.worst_error, rep.max_rel_error);
            if (!rep.passed(tol)) r.passed = false;
        }
        results.push_back(r);
    }
    return results;
}

}  // namespace kp3d
