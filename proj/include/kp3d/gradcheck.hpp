#pragma once

// Central finite-difference gradient checking. Runs on the double
// instantiation of the graph so the numeric oracle is tight.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "kp3d/random.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

struct GradCheckReport {
    double max_rel_error = 0.0;
    // coordinate of the worst error: input index and flat offset
    int worst_input = -1;
    std::size_t worst_coord = 0;
    bool nonfinite = false;
    std::string nonfinite_where;
    // bookkeeping for the piecewise variant
    int coords_checked = 0;
    int coords_skipped = 0;

    bool passed(double tol) const { return !nonfinite && max_rel_error < tol; }
};

// f builds a scalar loss from the given inputs (graph re-built per call).
// Inputs must have requires_grad set. When max_coords_per_input > 0 only a
// seeded subsample of coordinates is perturbed.
inline GradCheckReport gradient_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double eps = 1e-3, int max_coords_per_input = 0,
    std::uint64_t sample_seed = 0) {
    GradCheckReport rep;

    Tensor<double> loss = f(inputs);
    require(loss.numel() == 1, "gradient_check: f must be scalar-valued");
    if (!std::isfinite(loss.item())) {
        rep.nonfinite = true;
        rep.nonfinite_where = "loss value";
        return rep;
    }
    for (auto& in : inputs) in.zero_grad();
    backward(loss);

    Rng pick(sample_seed);
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& x = inputs[ii];
        const auto& analytic = x.grad();
        std::vector<std::size_t> coords;
        if (max_coords_per_input > 0 &&
            x.numel() > static_cast<std::size_t>(max_coords_per_input)) {
            for (int c = 0; c < max_coords_per_input; ++c)
                coords.push_back(static_cast<std::size_t>(
                    pick.uniform(0.0, static_cast<double>(x.numel()) - 1e-9)));
        } else {
            coords.resize(x.numel());
            for (std::size_t c = 0; c < coords.size(); ++c) coords[c] = c;
        }
        for (std::size_t c : coords) {
            double orig = x.data()[c];
            NoGradGuard ng;
            x.data()[c] = orig + eps;
            double fp = f(inputs).item();
            x.data()[c] = orig - eps;
            double fm = f(inputs).item();
            x.data()[c] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                rep.nonfinite = true;
                rep.nonfinite_where =
                    "input " + std::to_string(ii) + " coord " + std::to_string(c);
                return rep;
            }
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[c];
            double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_input = static_cast<int>(ii);
                rep.worst_coord = c;
            }
        }
    }
    return rep;
}

// Gradient check for piecewise-smooth losses (ReLU networks). A central
// difference is invalid when the probe interval straddles a kink, and
// cannot resolve derivatives below the cancellation noise floor
// ~|f| * ulp / eps. Kinks are detected by one-sided asymmetry: the
// forward and backward differences disagree by the full jump in slope
// whenever a kink lies inside the interval, no matter how close to the
// base point, while at smooth coordinates they agree to O(eps * f'').
// Contaminated probes are discarded and another coordinate is drawn;
// coordinates whose analytic and numeric derivatives both sit under the
// noise floor are counted as unresolvable. A wrong backward pass still
// fails, because the numeric derivative is trusted at every smooth
// coordinate.
inline GradCheckReport gradient_check_piecewise(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double eps = 1e-5, int coords_per_input = 2,
    std::uint64_t sample_seed = 0, double tol = 1e-3) {
    GradCheckReport rep;

    Tensor<double> loss = f(inputs);
    require(loss.numel() == 1, "gradient_check_piecewise: f must be scalar-valued");
    double f0 = loss.item();
    if (!std::isfinite(f0)) {
        rep.nonfinite = true;
        rep.nonfinite_where = "loss value";
        return rep;
    }
    for (auto& in : inputs) in.zero_grad();
    backward(loss);

    const double noise =
        256.0 * std::abs(f0) * std::numeric_limits<double>::epsilon() / eps;

    Rng pick(sample_seed);
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& x = inputs[ii];
        const auto& analytic = x.grad();
        for (int slot = 0; slot < coords_per_input; ++slot) {
            bool measured = false;
            for (int attempt = 0; attempt < 8 && !measured; ++attempt) {
                std::size_t c = static_cast<std::size_t>(
                    pick.uniform(0.0, static_cast<double>(x.numel()) - 1e-9));
                double orig = x.data()[c];
                double fp, fm;
                {
                    NoGradGuard ng;
                    x.data()[c] = orig + eps;
                    fp = f(inputs).item();
                    x.data()[c] = orig - eps;
                    fm = f(inputs).item();
                    x.data()[c] = orig;
                }
                if (!std::isfinite(fp) || !std::isfinite(fm)) {
                    rep.nonfinite = true;
                    rep.nonfinite_where =
                        "input " + std::to_string(ii) + " coord " + std::to_string(c);
                    return rep;
                }
                double fwd = (fp - f0) / eps;
                double bwd = (f0 - fm) / eps;
                double numeric = (fp - fm) / (2.0 * eps);
                // Reject any probe whose one-sided asymmetry exceeds
                // what the comparison below could certify: a kink (or
                // strong curvature) inside the interval makes the
                // central difference untrustworthy at the target
                // tolerance. The central-difference contamination from a
                // one-sided kink is at most half the asymmetry.
                if (std::abs(fwd - bwd) >
                    tol * (std::abs(fwd) + std::abs(bwd)) + 2.0 * noise)
                    continue;
                double a = analytic[c];
                if (std::abs(a) < noise && std::abs(numeric) < noise) {
                    ++rep.coords_skipped;  // below the FD noise floor
                    measured = true;
                    continue;
                }
                // The denominator floor converts the noise allowance the
                // asymmetry filter admits into an absolute tolerance, so
                // a noise-level discrepancy on a small gradient cannot
                // register as a large relative error.
                double rel = std::abs(a - numeric) /
                             std::max(8.0 * noise / tol, std::abs(a) + std::abs(numeric));
                if (rel > rep.max_rel_error) {
                    rep.max_rel_error = rel;
                    rep.worst_input = static_cast<int>(ii);
                    rep.worst_coord = c;
                }
                ++rep.coords_checked;
                measured = true;
            }
            if (!measured) ++rep.coords_skipped;  // persistent kink region
        }
    }
    return rep;
}

}  // namespace kp3d
