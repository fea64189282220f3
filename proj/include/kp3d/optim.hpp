#pragma once

// Adam over a named parameter list, with optional global-norm gradient
// clipping. Non-finite gradients skip the step for that tensor.

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "kp3d/tensor.hpp"

namespace kp3d {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
class Adam {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    explicit Adam(ParamList<T> params) : params_(std::move(params)) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].tensor.numel(), T(0));
            v_[i].assign(params_[i].tensor.numel(), T(0));
        }
    }

    const ParamList<T>& params() const { return params_; }
    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }

    std::vector<T>& moment1(std::size_t i) { return m_[i]; }
    std::vector<T>& moment2(std::size_t i) { return v_[i]; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // Scales all gradients so the global L2 norm is at most max_norm.
    double clip_global_norm(double max_norm) {
        double sq = 0.0;
        for (auto& p : params_) {
            for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
        }
        double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0.0) {
            T scale = static_cast<T>(max_norm / norm);
            for (auto& p : params_)
                for (T& g : p.tensor.grad()) g *= scale;
        }
        return norm;
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].tensor;
            auto& g = p.grad();
            if (!detail::all_finite(g)) {
                std::fprintf(stderr, "[adam] non-finite gradient for %s, step skipped\n",
                             params_[i].name.c_str());
                // moments still decay so a bad step leaves no stale scale
                for (std::size_t j = 0; j < g.size(); ++j) {
                    m_[i][j] *= static_cast<T>(kBeta1);
                    v_[i][j] *= static_cast<T>(kBeta2);
                }
                continue;
            }
            auto& val = p.data();
            for (std::size_t j = 0; j < g.size(); ++j) {
                m_[i][j] = static_cast<T>(kBeta1 * m_[i][j] + (1.0 - kBeta1) * g[j]);
                v_[i][j] = static_cast<T>(kBeta2 * v_[i][j] + (1.0 - kBeta2) * g[j] * g[j]);
                double mhat = m_[i][j] / bc1;
                double vhat = v_[i][j] / bc2;
                val[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + kEps));
            }
        }
    }

private:
    ParamList<T> params_;
    std::vector<std::vector<T>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace kp3d
