#pragma once

// Central finite-difference checks for every differentiable op, plus the
// registry the `gradcheck` subcommand runs. Each case builds a tiny random
// instance, compares analytic grads against central differences at f64 and
// reports the max relative error.

#include <functional>
#include <string>
#include <vector>

#include "hclsm/nn.hpp"
#include "hclsm/tensor.hpp"

namespace hclsm {

// Analytic-vs-central-difference comparison for a scalar-valued forward.
// Relative error is scaled by max(1, |fd|, |analytic|) per element.
inline double finite_diff_check(const std::function<Tensor()>& forward,
                                std::vector<Tensor> inputs, double eps = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = forward();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    }
    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& data = inputs[ti].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            double keep = data[i];
            data[i] = keep + eps;
            double up = forward().item();
            data[i] = keep - eps;
            double dn = forward().item();
            data[i] = keep;
            double fd = (up - dn) / (2.0 * eps);
            double an = analytic[ti][i];
            double scale = std::max({1.0, std::abs(fd), std::abs(an)});
            worst = std::max(worst, std::abs(fd - an) / scale);
        }
    }
    return worst;
}

struct GradCheckCase {
    std::string name;
    std::function<double()> run;  // returns max relative error
};

// The registered differentiable-op suite. Every entry must stay under 1e-4.
std::vector<GradCheckCase> build_gradcheck_suite(std::uint64_t seed = 20240801);

}  // namespace hclsm
