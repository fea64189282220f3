#pragma once

// The three unsupervised losses and their weighted sum.

#include <vector>

#include "kp3d/tensor.hpp"

namespace kp3d {

struct LossWeights {
    double lambda_ae = 5.0;
    double lambda_multi = 0.05;
    double lambda_sep = 0.0025;
    double separation_sharpness = 1000.0;  // M

    void validate() const {
        require(lambda_ae >= 0 && lambda_multi >= 0 && lambda_sep >= 0 &&
                    separation_sharpness >= 0,
                "loss weights must be non-negative");
    }
};

namespace detail {
// Row-wise squared norm of a (K,3) tensor -> (K), via matmul with ones.
template <typename T>
Tensor<T> row_sqnorm3(const Tensor<T>& x) {
    static thread_local Tensor<T> ones = Tensor<T>::from({3}, {T(1), T(1), T(1)});
    return matmul(square(x), ones);
}
}  // namespace detail

// Sum over views of the (non-squared) L2 reconstruction error.
template <typename T>
Tensor<T> loss_ae(const std::vector<Tensor<T>>& reconstructions,
                  const std::vector<Tensor<T>>& targets) {
    require(!reconstructions.empty() && reconstructions.size() == targets.size(),
            "loss_ae: view count mismatch");
    Tensor<T> total;
    for (std::size_t n = 0; n < reconstructions.size(); ++n) {
        check_same_shape(reconstructions[n], targets[n], "loss_ae");
        Tensor<T> term = sqrt_t(sum(square(sub(reconstructions[n], targets[n]))));
        total = n == 0 ? term : add(total, term);
    }
    return total;
}

// Pairwise view disagreement with stop-gradient on the second argument:
// each prediction is pulled toward detached copies of its peers.
template <typename T>
Tensor<T> loss_multiview(const std::vector<Tensor<T>>& per_camera_world) {
    require(!per_camera_world.empty(), "loss_multiview: need >= 1 view");
    int N = static_cast<int>(per_camera_world.size());
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
            if (i == j) continue;  // zero value and zero gradient either way
            Tensor<T> diff = sub(per_camera_world[i], stop_gradient(per_camera_world[j]));
            total = add(total, sum(sqrt_t(detail::row_sqnorm3(diff))));
        }
    return total;
}

// (1/K^2) sum_{i,j} 1 / (1 + M ||p_i - p_j||^2), diagonal included.
template <typename T>
Tensor<T> loss_separation(const Tensor<T>& fused, double sharpness) {
    const Shape& s = fused.shape();
    require(s.size() == 2 && s[1] == 3, "loss_separation: expects (K,3)");
    int K = s[0];
    // diagonal contributes a constant K with zero gradient
    Tensor<T> acc = Tensor<T>::scalar(static_cast<T>(K));
    for (int i = 0; i < K; ++i)
        for (int j = i + 1; j < K; ++j) {
            Tensor<T> diff = sub(slice0(fused, i, 1), slice0(fused, j, 1));
            Tensor<T> sq = sum(square(diff));
            Tensor<T> term = div(Tensor<T>::scalar(T(1)),
                                 add_scalar(mul_scalar(sq, static_cast<T>(sharpness)), T(1)));
            acc = add(acc, mul_scalar(term, T(2)));  // ordered pairs (i,j) and (j,i)
        }
    return mul_scalar(acc, static_cast<T>(1.0 / (static_cast<double>(K) * K)));
}

template <typename T>
struct UnsupLossParts {
    Tensor<T> ae, multiview, separation, total;
};

template <typename T>
UnsupLossParts<T> loss_unsup(const std::vector<Tensor<T>>& reconstructions,
                             const std::vector<Tensor<T>>& targets,
                             const std::vector<Tensor<T>>& per_camera_world,
                             const Tensor<T>& fused, const LossWeights& w) {
    UnsupLossParts<T> parts;
    parts.ae = loss_ae(reconstructions, targets);
    parts.multiview = loss_multiview(per_camera_world);
    parts.separation = loss_separation(fused, w.separation_sharpness);
    parts.total = add(add(mul_scalar(parts.ae, static_cast<T>(w.lambda_ae)),
                          mul_scalar(parts.multiview, static_cast<T>(w.lambda_multi))),
                      mul_scalar(parts.separation, static_cast<T>(w.lambda_sep)));
    return parts;
}

}  // namespace kp3d
