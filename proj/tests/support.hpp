#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gendebias/autograd.hpp"
#include "gendebias/random.hpp"

namespace testing_support {

using gendebias::Tensor;
using gendebias::autograd::Tape;
using gendebias::autograd::Var;

using LossFn = std::function<Var(Tape &)>;

inline double eval(const LossFn &f) {
    Tape t;
    return f(t).item();
}

/// Largest per-tensor relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// between backward() and central differences with step h.
inline double fd_relative_error(const LossFn &f, const std::vector<Tensor *> &params, double h = 1e-5) {
    for (auto *p : params) {
        p->requires_grad = true;
        p->grad.reset();
    }
    {
        Tape t;
        t.backward(f(t));
    }
    double worst = 0.0;
    for (auto *p : params) {
        const std::vector<double> analytic = p->grad ? *p->grad : std::vector<double>(p->numel(), 0.0);
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double keep = p->data[i];
            p->data[i] = keep + h;
            const double up = eval(f);
            p->data[i] = keep - h;
            const double down = eval(f);
            p->data[i] = keep;
            const double numeric = (up - down) / (2 * h);
            diff += (analytic[i] - numeric) * (analytic[i] - numeric);
            na += analytic[i] * analytic[i];
            nn += numeric * numeric;
        }
        // Parameters whose true gradient vanishes (e.g. attention key biases)
        // are compared on an absolute scale.
        const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-5});
        worst = std::max(worst, std::sqrt(diff) / scale);
    }
    return worst;
}

inline Tensor random_tensor(gendebias::Shape shape, gendebias::Rng &rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto &v : t.data) v = scale * (2.0 * gendebias::uniform01(rng) - 1.0);
    return t;
}

} // namespace testing_support
