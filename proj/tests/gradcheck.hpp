#pragma once

#include "sammed/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace testutil {

using sammed::ag::Tensor;
using sammed::ag::Var;

inline Tensor random_tensor(sammed::ag::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, scale);
    for (double& v : t.data) v = d(rng);
    return t;
}

inline double rel_error(double analytic, double numeric, double floor = 1e-8) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Max relative error between backward() and central differences for every
// element of every input. f builds a scalar from the leaves.
inline double max_grad_error(std::vector<Var> inputs, const std::function<Var(const std::vector<Var>&)>& f,
                             double eps = 1e-5) {
    for (auto& v : inputs) v.zero_grad();
    Var out = f(inputs);
    sammed::ag::backward(out);
    double worst = 0;
    for (auto& v : inputs) {
        const Tensor g = v.grad();
        for (std::size_t i = 0; i < v.value().size(); ++i) {
            const double orig = v.value().data[i];
            v.mutable_value().data[i] = orig + eps;
            double up;
            {
                sammed::ag::NoGradGuard ng;
                up = f(inputs).value()[0];
            }
            v.mutable_value().data[i] = orig - eps;
            double down;
            {
                sammed::ag::NoGradGuard ng;
                down = f(inputs).value()[0];
            }
            v.mutable_value().data[i] = orig;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = g.empty() ? 0.0 : g.data[i];
            worst = std::max(worst, rel_error(analytic, numeric, 1e-6));
        }
    }
    return worst;
}

} // namespace testutil
