// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ptml/adapters.hpp"
#include "ptml/datasets.hpp"
#include "ptml/io.hpp"
#include "ptml/model.hpp"
#include "ptml/qat.hpp"

namespace ptml {

// Desk-scale training harness: next-token cross entropy over a synthetic
// corpus, batch-mean loss, AdamW, EMA shadow weights, and spike/divergence
// bookkeeping. Every run is a pure function of (model bytes, dataset, config).
struct TrainToyConfig {
    int64_t steps = 200;
    int64_t batch = 4;
    double lr = 5e-3;
    uint64_t seed = 1;
    double ema_decay = 0.999;
    bool neuron_grad_scale = true;
    double weight_decay = 0.0;
    double load_balance_coeff = 0.0;  // adds coeff * mean routing-balance term

    void validate() const;
};

struct TrainStepRecord {
    int64_t step = 0;
    double loss = 0.0;
    bool spike = false;  // loss above 2x the running median of earlier steps
};

struct TrainReport {
    std::vector<TrainStepRecord> steps;
    double first_loss = 0.0;
    double final_loss = 0.0;      // post-training eval on held-in samples
    double final_ema_loss = 0.0;  // same eval with the EMA shadow weights
    int64_t spike_count = 0;
    bool diverged = false;        // a step produced a non-finite quantity
    int64_t diverged_step = -1;
    io::TensorMap ema_weights;
};

TrainReport train_toy(PTModel& model, const TokenDataset& data, const TrainToyConfig& cfg);

// One snapshot per step of every learnable quantization scale: the raw f and
// the realized step size s = f * max|W| / level_max.
struct QatStepRecord {
    int64_t step = 0;
    double loss = 0.0;
    std::map<std::string, double> f_values;
    std::map<std::string, double> s_values;
};

struct QatTrainReport {
    TrainReport base;
    std::vector<QatStepRecord> quant_steps;
    io::TensorMap f_store;  // trained scale factors, keyed by weight name
};

// Same loop with fake-quantized weights. f scalars are clipping-initialized,
// then trained by a second optimizer without neuron scaling or decay.
QatTrainReport qat_train_toy(PTModel& model, const TokenDataset& data, const TrainToyConfig& cfg,
                             const QuantSpec& spec);

// Adapter-only recovery: the materialized compressed weights stay frozen (no
// optimizer step, no EMA movement) and only adapter tensors receive updates.
// ema_weights therefore echoes the base and final_ema_loss == final_loss.
TrainReport recover_train_toy(PTModel& materialized, ModelAdapters& adapters,
                              const TokenDataset& data, const TrainToyConfig& cfg);

}  // namespace ptml
