#pragma once

// Central finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace tasn {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;  // relative error bound
    double abs_floor = 1e-7;  // differences below this always pass
};

struct GradCheckResult {
    std::string name;
    double tolerance = 0.0;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // probes that crossed a ReLU kink
    std::size_t failed = 0;
    bool passed = true;
};

/// |a - n| / max(|a|, |n|); 0 when both magnitudes are below the floor.
inline double relative_error(double analytic, double numeric, double abs_floor) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    return scale > abs_floor ? std::abs(analytic - numeric) / scale : 0.0;
}

/// Fold one analytic/numeric pair into `result`. A pair passes when the
/// relative error is below tolerance or the absolute difference is within
/// the floor.
inline void record_probe(GradCheckResult& result, double analytic, double numeric, const GradCheckOptions& opt) {
    const double rel = relative_error(analytic, numeric, opt.abs_floor);
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
    if (!(rel < opt.tolerance) && !(std::abs(analytic - numeric) <= opt.abs_floor)) {
        ++result.failed;
        result.passed = false;
    }
}

/// Scalar function of tape leaves.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Compare tape gradients of f at `inputs` with central differences over
/// every input coordinate, folding the outcome into `result`.
inline void check_gradients(GradCheckResult& result, const ScalarFunction& f, const std::vector<Tensor>& inputs,
                            const GradCheckOptions& opt) {
    result.tolerance = opt.tolerance;
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    const Var out = f(tape, leaves);
    const Gradients grads = tape.backward(out);

    auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<bool>& trace) {
        Tape probe(false);
        probe.set_kink_tracing(true);
        std::vector<Var> vs;
        for (const Tensor& t : xs) vs.push_back(probe.leaf(t));
        const double v = f(probe, vs).value().item();
        trace = probe.kink_trace();
        return v;
    };

    std::vector<Tensor> work = inputs;
    std::vector<bool> trace_plus, trace_minus;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor analytic = grads[leaves[k]];
        for (std::size_t j = 0; j < inputs[k].numel(); ++j) {
            const double x0 = inputs[k][j];
            work[k][j] = x0 + opt.step;
            const double fp = evaluate(work, trace_plus);
            work[k][j] = x0 - opt.step;
            const double fm = evaluate(work, trace_minus);
            work[k][j] = x0;
            if (trace_plus != trace_minus) {
                ++result.skipped;
                continue;
            }
            record_probe(result, analytic[j], (fp - fm) / (2.0 * opt.step), opt);
        }
    }
}

}  // namespace tasn
