#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stpil/params.hpp"
#include "stpil/rng.hpp"
#include "stpil/tape.hpp"

namespace stpil {

/// Rebuilds the forward pass on a fresh tape and returns the scalar loss
/// variable. Must be deterministic per call (reseed any internal rng).
using LossBuilder = std::function<Var(Tape&, ParamStore&)>;

struct FdOptions {
    double eps = 1e-5;
    // Leaves up to this many elements are checked coordinate by coordinate;
    // larger leaves on a seeded random subsample of `sample_count` coords.
    std::size_t full_check_max = 256;
    std::size_t sample_count = 200;
    std::uint64_t seed = 12345;
};

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst_leaf;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
    // Coordinates where [θ-ε, θ+ε] straddles a ReLU kink (or a loss clamp):
    // the second difference |f+ - 2f0 + f-| / 2ε jumps from O(f''ε) to
    // O(|slope change|) there, and a central difference estimates nothing.
    std::size_t kinks_skipped = 0;
};

/// Central-difference check of analytic gradients: (f(θ+ε) − f(θ−ε)) / 2ε
/// per coordinate against the accumulators populated by grads(). Relative
/// error uses a 1e-3 floor so near-zero pairs compare on the scale of the
/// difference noise.
inline FdReport finite_diff_check(const LossBuilder& build, ParamStore& params, const FdOptions& opt = {}) {
    STPIL_REQUIRE(opt.eps > 0.0, "finite_diff_check: eps must be positive");

    auto eval = [&]() {
        Tape tape;
        tape.bind(params);
        Var root = build(tape, params);
        return tape.scalar(root);
    };

    // Analytic gradients, snapshotted before perturbation.
    std::vector<Tensor> analytic;
    {
        Tape tape;
        tape.bind(params);
        Var root = build(tape, params);
        grads(tape, root, params);
        analytic.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params[i].grad);
    }

    const double f0 = eval();
    RngState rng(opt.seed);
    FdReport report;
    for (std::size_t li = 0; li < params.size(); ++li) {
        ParamLeaf& leaf = params[li];
        const std::size_t n = leaf.value.numel();
        std::vector<std::size_t> coords;
        if (n <= opt.full_check_max) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            coords.reserve(opt.sample_count);
            for (std::size_t i = 0; i < opt.sample_count; ++i)
                coords.push_back(static_cast<std::size_t>(rng.uniform_below(n)));
        }
        for (std::size_t ci : coords) {
            const double saved = leaf.value.v[ci];
            leaf.value.v[ci] = saved + opt.eps;
            const double fp = eval();
            leaf.value.v[ci] = saved - opt.eps;
            const double fm = eval();
            leaf.value.v[ci] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double a = analytic[li].v[ci];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
            const double curvature = std::fabs(fp - 2.0 * f0 + fm) / (2.0 * opt.eps);
            if (curvature > 0.1 * denom) {
                ++report.kinks_skipped;
                continue;
            }
            const double err = std::fabs(a - numeric) / denom;
            ++report.coords_checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_leaf = leaf.id;
                report.worst_coord = ci;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    // Restore the analytic gradients so callers can inspect them afterwards.
    for (std::size_t i = 0; i < params.size(); ++i) params[i].grad = analytic[i];
    return report;
}

}  // namespace stpil
