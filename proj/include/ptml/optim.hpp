// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ptml/io.hpp"
#include "ptml/tensor.hpp"

namespace ptml {

struct AdamWConfig {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    // scale each rank-2 gradient by 1/sqrt(rows) before the moment update,
    // a cheap stand-in for per-neuron learning rates
    bool neuron_grad_scale = false;
};

// Decoupled weight decay Adam. Moment state lives in 64-bit keyed by
// parameter name; updates are elementwise and deterministic.
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg);

    // applies one update to every entry of `grads`; missing params throw
    void step(io::TensorMap& params, const io::TensorMap& grads);
    int64_t steps_taken() const { return t_; }

  private:
    AdamWConfig cfg_;
    std::map<std::string, Tensor> m_, v_;
    int64_t t_ = 0;
};

// Exponential moving average of a parameter set:
// shadow = decay * shadow + (1 - decay) * value
class EmaTracker {
  public:
    EmaTracker(const io::TensorMap& params, double decay);
    void update(const io::TensorMap& params);
    const io::TensorMap& weights() const { return shadow_; }

  private:
    double decay_;
    io::TensorMap shadow_;
};

// single-tensor form of the same rule
Tensor ema_update(const Tensor& shadow, const Tensor& value, double decay);

}  // namespace ptml
