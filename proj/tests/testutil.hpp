// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "ptml/tape.hpp"

namespace ptml::test {

// Builds a scalar loss from leaf values; must be deterministic in the params.
using BuildLoss = std::function<Value(Tape&, std::span<const Value>)>;

struct GradReport {
    double max_err = 0.0;
    std::string worst;
};

inline double grad_err(double analytic, double numeric) {
    const double denom = std::max(std::fabs(analytic), std::fabs(numeric));
    const double diff = std::fabs(analytic - numeric);
    return denom > 1e-3 ? diff / denom : diff;
}

// Central-difference check of every parameter element, done in 64-bit.
// max_elems > 0 limits the number of probed elements per parameter
// (evenly strided) to keep large models affordable.
inline GradReport grad_check(std::vector<Tensor> params, const BuildLoss& build,
                             double step = 1e-3, int64_t max_elems = 0) {
    std::vector<Tensor> p64;
    p64.reserve(params.size());
    for (const Tensor& p : params) p64.push_back(p.to(DType::f64));

    auto eval_loss = [&]() {
        Tape tape(false);
        std::vector<Value> leaves;
        leaves.reserve(p64.size());
        for (const Tensor& p : p64) leaves.push_back(tape.leaf(p, true));
        return tape.value(build(tape, leaves)).item();
    };

    std::vector<Tensor> analytic;
    {
        Tape tape(true);
        std::vector<Value> leaves;
        leaves.reserve(p64.size());
        for (const Tensor& p : p64) leaves.push_back(tape.leaf(p, true));
        Value loss = build(tape, leaves);
        tape.backward(loss);
        analytic.reserve(p64.size());
        for (Value v : leaves) analytic.push_back(tape.grad(v));
    }

    GradReport rep;
    for (size_t j = 0; j < p64.size(); ++j) {
        const int64_t n = p64[j].numel();
        int64_t stride = 1;
        if (max_elems > 0 && n > max_elems) stride = (n + max_elems - 1) / max_elems;
        for (int64_t i = 0; i < n; i += stride) {
            const double saved = p64[j].get(i);
            p64[j].set(i, saved + step);
            const double fp = eval_loss();
            p64[j].set(i, saved - step);
            const double fm = eval_loss();
            p64[j].set(i, saved);
            const double numeric = (fp - fm) / (2.0 * step);
            const double err = grad_err(analytic[j].get(i), numeric);
            if (err > rep.max_err) {
                rep.max_err = err;
                rep.worst = fmt::format("param {} elem {}: analytic {} vs fd {}", j, i,
                                        analytic[j].get(i), numeric);
            }
        }
    }
    return rep;
}

}  // namespace ptml::test
