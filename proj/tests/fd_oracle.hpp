#pragma once

// Central finite differences, kept separate from the library's gradcheck.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "motionkit/autograd.hpp"

namespace testutil {

using LossBuilder = std::function<motionkit::Var(motionkit::Tape&, const std::vector<motionkit::Var>&)>;

inline double eval_loss(const LossBuilder& build, const std::vector<motionkit::Tensor>& inputs) {
    motionkit::Tape tape;
    std::vector<motionkit::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return build(tape, vars).value()[0];
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

// Relative error |a - n| / max(|a|, |n|, floor) per entry, maximized.
inline GradCheckResult check_gradients(const LossBuilder& build, std::vector<motionkit::Tensor> inputs,
                                       double eps = 1e-5, double floor = 1e-6) {
    motionkit::Tape tape;
    std::vector<motionkit::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(build(tape, vars));

    GradCheckResult r;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        motionkit::Tensor analytic = tape.grad(vars[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + eps;
            const double fp = eval_loss(build, inputs);
            inputs[k][i] = orig - eps;
            const double fm = eval_loss(build, inputs);
            inputs[k][i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double abs_err = std::abs(analytic[i] - numeric);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            r.max_abs_err = std::max(r.max_abs_err, abs_err);
            r.max_rel_err = std::max(r.max_rel_err, abs_err / denom);
        }
    }
    return r;
}

inline motionkit::Tensor random_tensor(std::mt19937_64& rng, motionkit::Shape shape, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    motionkit::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = n(rng);
    return t;
}

}  // namespace testutil
