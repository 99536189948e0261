// SPDX-License-Identifier: Apache-2.0
#include "ptml/optim.hpp"

#include <cmath>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace ptml {

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) {
    if (cfg.lr < 0 || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 ||
        cfg.eps <= 0 || cfg.weight_decay < 0) {
        throw ShapeError("optimizer hyperparameters out of range");
    }
}

void AdamW::step(io::TensorMap& params, const io::TensorMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, grad] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) {
            throw std::logic_error(fmt::format("gradient for unknown parameter `{}`", name));
        }
        Tensor& p = pit->second;
        if (p.shape() != grad.shape()) {
            throw ShapeError(fmt::format("gradient shape mismatch for `{}`", name));
        }
        grad.check_finite("adamw step");

        auto mit = m_.find(name);
        if (mit == m_.end()) {
            mit = m_.emplace(name, Tensor::zeros(p.shape(), DType::f64)).first;
            v_.emplace(name, Tensor::zeros(p.shape(), DType::f64));
        }
        Tensor& m = mit->second;
        Tensor& v = v_.at(name);

        double gscale = 1.0;
        if (cfg_.neuron_grad_scale && p.rank() == 2) {
            gscale = 1.0 / std::sqrt(static_cast<double>(p.dim(0)));
        }
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double g = grad.get(i) * gscale;
            const double mi = cfg_.beta1 * m.get(i) + (1.0 - cfg_.beta1) * g;
            const double vi = cfg_.beta2 * v.get(i) + (1.0 - cfg_.beta2) * g * g;
            m.set(i, mi);
            v.set(i, vi);
            const double update =
                (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) + cfg_.weight_decay * p.get(i);
            p.set(i, p.get(i) - cfg_.lr * update);
        }
    }
}

EmaTracker::EmaTracker(const io::TensorMap& params, double decay) : decay_(decay) {
    if (decay < 0.0 || decay >= 1.0) throw ShapeError("ema decay must be in [0, 1)");
    shadow_ = params;
}

void EmaTracker::update(const io::TensorMap& params) {
    for (auto& [name, shadow] : shadow_) {
        auto it = params.find(name);
        if (it == params.end()) {
            throw std::logic_error(fmt::format("ema: parameter `{}` disappeared", name));
        }
        shadow = ema_update(shadow, it->second, decay_);
    }
}

Tensor ema_update(const Tensor& shadow, const Tensor& value, double decay) {
    if (shadow.shape() != value.shape()) throw ShapeError("ema: shape mismatch");
    Tensor out = shadow;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out.set(i, decay * shadow.get(i) + (1.0 - decay) * value.get(i));
    }
    return out;
}

}  // namespace ptml
