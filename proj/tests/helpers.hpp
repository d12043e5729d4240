#pragma once

// Shared test oracles. Everything here is deliberately naive and independent
// of the tape implementation: plain loops, long double where it matters.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "stpil/ingest.hpp"
#include "stpil/rng.hpp"
#include "stpil/tape.hpp"
#include "stpil/tensor.hpp"

namespace oracle {

inline stpil::UserHistory random_history(stpil::RngState& rng, std::size_t len, std::uint32_t n_poi = 30,
                                         std::uint32_t n_area = 6) {
    stpil::UserHistory h;
    h.user = 0;
    std::int64_t ts = 1330000000;
    for (std::size_t i = 0; i < len; ++i) {
        stpil::CheckIn c;
        c.poi = static_cast<std::uint32_t>(rng.uniform_below(n_poi));
        c.cat = c.poi % 7;
        c.dow = static_cast<std::uint8_t>(1 + rng.uniform_below(7));
        c.slot = static_cast<std::uint8_t>(rng.uniform_below(24));
        c.area = static_cast<std::uint32_t>(rng.uniform_below(n_area));
        ts += 1 + static_cast<std::int64_t>(rng.uniform_below(50000));
        c.ts = ts;
        c.src = static_cast<std::uint32_t>(i);
        h.checkins.push_back(c);
    }
    return h;
}

// Triple-loop mat-vec, no shortcuts.
inline std::vector<double> matvec(const std::vector<double>& W, std::size_t m, std::size_t n,
                                  const std::vector<double>& x, const std::vector<double>* b = nullptr) {
    std::vector<double> y(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) y[r] += W[r * n + c] * x[c];
        if (b) y[r] += (*b)[r];
    }
    return y;
}

inline std::vector<double> softmax_ld(const std::vector<double>& s) {
    long double mx = s[0];
    for (double v : s) mx = std::max<long double>(mx, v);
    long double sum = 0.0L;
    std::vector<long double> e(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(s[i]) - mx);
        sum += e[i];
    }
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
    return out;
}

struct LstmRef {
    std::vector<double> wx, wh, b;  // [4h x in], [4h x h], [4h]
    std::size_t in, h;
};

// Scalar re-implementation of one gated step.
inline void lstm_step(const LstmRef& p, const std::vector<double>& x, std::vector<double>& hv,
                      std::vector<double>& cv) {
    auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
    std::vector<double> z(4 * p.h, 0.0);
    for (std::size_t r = 0; r < 4 * p.h; ++r) {
        double acc = p.b[r];
        for (std::size_t j = 0; j < p.in; ++j) acc += p.wx[r * p.in + j] * x[j];
        for (std::size_t j = 0; j < p.h; ++j) acc += p.wh[r * p.h + j] * hv[j];
        z[r] = acc;
    }
    for (std::size_t j = 0; j < p.h; ++j) {
        const double i = sig(z[j]);
        const double f = sig(z[p.h + j]);
        const double g = std::tanh(z[2 * p.h + j]);
        const double o = sig(z[3 * p.h + j]);
        cv[j] = f * cv[j] + i * g;
        hv[j] = o * std::tanh(cv[j]);
    }
}

inline std::vector<double> random_values(std::size_t n, stpil::RngState& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Generic per-op gradient check: the builder constructs output from constant
// inputs; loss = dot(output, fixed weights). Analytic input grads from the
// tape are compared against central differences of the rebuilt loss.
struct OpGradCheck {
    std::vector<stpil::Tensor> inputs;
    std::function<stpil::Var(stpil::Tape&, const std::vector<stpil::Var>&)> build;

    double max_rel_err(std::uint64_t weight_seed = 99, double eps = 1e-5) const {
        stpil::RngState wrng(weight_seed);
        std::vector<double> wts;

        auto eval = [&](const std::vector<stpil::Tensor>& ins, stpil::Tape& tape,
                        std::vector<stpil::Var>& vars) -> stpil::Var {
            vars.clear();
            for (const auto& t : ins) vars.push_back(tape.constant(t));
            stpil::Var out = build(tape, vars);
            if (wts.empty()) {
                stpil::RngState r(weight_seed);
                wts = random_values(tape.numel(out), r);
            }
            stpil::Var w = tape.constant(std::span<const double>(wts));
            return tape.dot(out, w);
        };

        std::vector<std::vector<double>> analytic;
        {
            stpil::Tape tape;
            std::vector<stpil::Var> vars;
            stpil::Var loss = eval(inputs, tape, vars);
            tape.backward(loss, 1.0);
            for (stpil::Var v : vars) {
                const double* g = tape.grad(v);
                analytic.emplace_back(g, g + tape.numel(v));
            }
        }

        auto loss_at = [&](const std::vector<stpil::Tensor>& ins) {
            stpil::Tape tape;
            std::vector<stpil::Var> vars;
            return tape.scalar(eval(ins, tape, vars));
        };

        double worst = 0.0;
        std::vector<stpil::Tensor> work = inputs;
        for (std::size_t i = 0; i < work.size(); ++i) {
            for (std::size_t j = 0; j < work[i].numel(); ++j) {
                const double saved = work[i].v[j];
                work[i].v[j] = saved + eps;
                const double fp = loss_at(work);
                work[i].v[j] = saved - eps;
                const double fm = loss_at(work);
                work[i].v[j] = saved;
                const double numeric = (fp - fm) / (2.0 * eps);
                const double a = analytic[i][j];
                const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
                worst = std::max(worst, std::fabs(a - numeric) / denom);
            }
        }
        return worst;
    }
};

}  // namespace oracle
