#pragma once

#include <functional>
#include <map>
#include <random>

#include "utrans/attention.hpp"

namespace utrans {

struct CheckReport {
    std::string op;
    double max_rel_err = 0;
    int cases = 0;
    bool pass = false;
};

namespace gradcheck_detail {

inline Tensor<double> rand_tensor(Shape s, std::mt19937_64& rng,
                                  double min_abs = 0.0) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Tensor<double> t(s);
    for (auto& v : t.value()) {
        v = d(rng);
        if (min_abs > 0 && std::fabs(v) < min_abs)
            v = std::copysign(min_abs + std::fabs(v), v == 0 ? 1.0 : v);
    }
    return t;
}

// max relative error between analytic and central-difference gradients,
// relative denominator max(|a|,|b|,1e-8)
inline double compare(
    std::vector<Tensor<double>> inputs,
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fwd,
    double step = 1e-4) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        Tensor<double> loss = fwd(inputs);
        tape.backward(loss);
        for (auto& in : inputs)
            analytic.push_back(
                in.has_grad()
                    ? std::vector<double>(in.grad().begin(), in.grad().end())
                    : std::vector<double>(in.numel(), 0.0));
    }
    double worst = 0;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& in = inputs[ii];
        for (long k = 0; k < in.numel(); ++k) {
            double orig = in.value()[k];
            in.value()[k] = orig + step;
            double f1 = fwd(inputs).value()[0];
            in.value()[k] = orig - step;
            double f0 = fwd(inputs).value()[0];
            in.value()[k] = orig;
            double fd = (f1 - f0) / (2 * step);
            double a = analytic[ii][k];
            double rel = std::fabs(a - fd) /
                         std::max({std::fabs(a), std::fabs(fd), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// scalarize: sum(out .* R) with a fixed random projection
inline Tensor<double> project(const Tensor<double>& out, uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor<double> r = rand_tensor(out.shape(), rng);
    return sum_all(mul(out, r));
}

}  // namespace gradcheck_detail

// Finite-difference check of one named op over >= 3 seeded shapes.
CheckReport grad_check(const std::string& op, double tol = 1e-4);
std::vector<std::string> gradcheck_ops();

}  // namespace utrans
