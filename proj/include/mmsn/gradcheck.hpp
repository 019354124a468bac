// mmsn/gradcheck.hpp — central finite-difference verification of tape grads.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/param_store.hpp"

namespace mmsn {

// Builds the scalar loss on a fresh tape, reading parameters from whatever
// store the closure captured. Called repeatedly with perturbed parameters.
using LossFn = std::function<Var(Tape&)>;

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int worst_index = -1;
    double analytic = 0.0;   // analytic grad at the worst index
    double numeric = 0.0;    // central difference at the worst index
    int n_checked = 0;
    int n_skipped = 0;       // entries rejected for landing near a relu kink
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_index = -1;
    int n_checked = 0;
    int n_skipped = 0;
    bool passed = true;
};

namespace detail {

struct LossEval {
    double loss;
    double relu_margin;
    double clamp_margin;
};

inline LossEval eval_loss(const LossFn& f) {
    Tape t;
    Var l = f(t);
    return {l.scalar(), t.min_relu_preact(), t.min_clamp_margin()};
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

}  // namespace detail

// Central differences (f(x+h) - f(x-h)) / 2h against tape gradients for every
// trainable entry. Perturbed evaluations that pass within 1e-6 of a relu kink
// (or an eigenvalue-clamp kink) are skipped rather than counted, since the
// difference quotient straddles a subgradient there. max_entries_per_param
// caps work on large tensors by striding; 0 checks everything.
inline GradCheckReport finite_diff_check(ParamStore& store, const LossFn& f, double h = 1e-5,
                                         double tol = 1e-4, int max_entries_per_param = 0) {
    if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");
    constexpr double kKinkMargin = 1e-6;

    store.zero_grad();
    {
        Tape t;
        Var loss = f(t);
        t.backward(loss);
    }

    GradCheckReport report;
    for (const std::string& name : store.names(/*trainable_only=*/true)) {
        Tensor& value = store.value(name);
        const Tensor& analytic = store.grad(name);
        GradCheckEntry entry;
        entry.name = name;

        int n = value.size();
        int step = 1;
        if (max_entries_per_param > 0 && n > max_entries_per_param)
            step = (n + max_entries_per_param - 1) / max_entries_per_param;
        for (int i = 0; i < n; i += step) {
            double old = value[i];
            value[i] = old + h;
            detail::LossEval plus = detail::eval_loss(f);
            value[i] = old - h;
            detail::LossEval minus = detail::eval_loss(f);
            value[i] = old;
            if (std::min(plus.relu_margin, minus.relu_margin) < kKinkMargin ||
                std::min(plus.clamp_margin, minus.clamp_margin) < kKinkMargin) {
                ++entry.n_skipped;
                continue;
            }
            double numeric = (plus.loss - minus.loss) / (2.0 * h);
            double err = detail::rel_err(analytic[i], numeric);
            ++entry.n_checked;
            if (err > entry.max_rel_err) {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = analytic[i];
                entry.numeric = numeric;
            }
        }
        entry.passed = entry.max_rel_err <= tol;

        report.n_checked += entry.n_checked;
        report.n_skipped += entry.n_skipped;
        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
            report.worst_index = entry.worst_index;
        }
        report.passed = report.passed && entry.passed;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace mmsn
