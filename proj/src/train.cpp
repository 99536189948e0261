// SPDX-License-Identifier: Apache-2.0
#include "ptml/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>

#include <fmt/format.h>

#include "ptml/errors.hpp"
#include "ptml/optim.hpp"
#include "ptml/rng.hpp"

namespace ptml {

void TrainToyConfig::validate() const {
    if (steps < 1) throw UsageError("training needs at least one step");
    if (batch < 1) throw UsageError("batch must be positive");
    if (lr < 0.0) throw UsageError("learning rate must be nonnegative");
    if (ema_decay < 0.0 || ema_decay >= 1.0) throw UsageError("ema_decay must be in [0, 1)");
    if (weight_decay < 0.0) throw UsageError("weight_decay must be nonnegative");
    if (load_balance_coeff < 0.0) throw UsageError("load_balance_coeff must be nonnegative");
}

namespace {

using BinderFactory =
    std::function<std::unique_ptr<ParamBinder>(Tape&, PTModel&, bool trainable)>;
// runs after the weight update, while the step's tape is still alive
using StepHook = std::function<void(Tape&, ParamBinder&, int64_t step, double loss)>;

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// batch-mean next-token cross entropy, plus the routing balance penalty when
// a coefficient is active
Value batch_loss(Tape& t, PTForward& fwd, const TokenDataset& data,
                 std::span<const int64_t> sample_idx, double balance_coeff) {
    Value total;
    std::vector<Value> balance;
    for (int64_t idx : sample_idx) {
        const auto& sample = data.samples[static_cast<size_t>(idx)];
        if (sample.size() < 2) throw ShapeError("training sample shorter than two tokens");
        std::span<const int64_t> inputs(sample.data(), sample.size() - 1);
        std::vector<int64_t> targets(sample.begin() + 1, sample.end());
        Value logits = fwd.full_logits(inputs);
        Value ce = t.cross_entropy(logits, std::move(targets));
        total = total.defined() ? t.add(total, ce) : ce;
        for (Value term : fwd.balance_terms()) balance.push_back(term);
    }
    Value loss = t.mul_scalar(total, 1.0 / static_cast<double>(sample_idx.size()));
    if (balance_coeff > 0.0 && !balance.empty()) {
        Value acc = balance[0];
        for (size_t i = 1; i < balance.size(); ++i) acc = t.add(acc, balance[i]);
        loss = t.add(loss, t.mul_scalar(acc, balance_coeff / static_cast<double>(balance.size())));
    }
    return loss;
}

io::TensorMap collect_param_grads(Tape& t, ParamBinder& binder) {
    io::TensorMap grads;
    for (const std::string& name : binder.bound_names()) {
        grads[name] = t.grad(binder.param(name));
    }
    return grads;
}

double eval_mean_loss(PTModel& model, const TokenDataset& data, int64_t count,
                      const BinderFactory& make_binder, double balance_coeff) {
    Tape t(false);
    auto binder = make_binder(t, model, false);
    PTForward fwd(*binder);
    std::vector<int64_t> idx(static_cast<size_t>(count));
    std::iota(idx.begin(), idx.end(), 0);
    Value loss = batch_loss(t, fwd, data, idx, balance_coeff);
    return t.value(loss).item();
}

// train_base false freezes the model parameters: the optimizer and EMA skip
// them and only the hook's own updates (adapter tensors) move anything
TrainReport run_loop(PTModel& model, const TokenDataset& data, const TrainToyConfig& cfg,
                     const BinderFactory& make_binder, const StepHook& after_update,
                     bool train_base = true) {
    cfg.validate();
    if (data.samples.empty()) throw UsageError("dataset is empty");
    if (data.vocab != model.cfg.vocab) {
        throw ShapeError(fmt::format("dataset vocab {} != model vocab {}", data.vocab,
                                     model.cfg.vocab));
    }
    const double balance_coeff = cfg.load_balance_coeff != 0.0
                                     ? cfg.load_balance_coeff
                                     : model.cfg.moe.load_balance_coeff;

    AdamW optim({.lr = cfg.lr,
                 .weight_decay = cfg.weight_decay,
                 .neuron_grad_scale = cfg.neuron_grad_scale});
    EmaTracker ema(model.params, cfg.ema_decay);
    Rng rng(cfg.seed);

    TrainReport report;
    std::vector<double> seen_losses;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<int64_t> idx(static_cast<size_t>(cfg.batch));
        for (auto& i : idx) i = static_cast<int64_t>(rng.below(data.samples.size()));
        try {
            Tape t;
            auto binder = make_binder(t, model, true);
            PTForward fwd(*binder);
            Value loss = batch_loss(t, fwd, data, idx, balance_coeff);
            const double loss_val = t.value(loss).item();
            if (!std::isfinite(loss_val)) throw NumericError("non-finite training loss");
            t.backward(loss);
            if (train_base) optim.step(model.params, collect_param_grads(t, *binder));
            if (after_update) after_update(t, *binder, step, loss_val);
            if (train_base) ema.update(model.params);

            TrainStepRecord rec{step, loss_val, false};
            rec.spike = !seen_losses.empty() && loss_val > 2.0 * median_of(seen_losses);
            if (rec.spike) report.spike_count++;
            seen_losses.push_back(loss_val);
            report.steps.push_back(rec);
        } catch (const NumericError&) {
            report.diverged = true;
            report.diverged_step = step;
            break;
        }
    }

    report.ema_weights = ema.weights();
    if (!report.steps.empty()) report.first_loss = report.steps.front().loss;
    const int64_t eval_count =
        std::min<int64_t>(cfg.batch, static_cast<int64_t>(data.samples.size()));
    if (report.diverged) {
        // weights may be unusable; report the last clean measurement instead
        const double last = report.steps.empty() ? 0.0 : report.steps.back().loss;
        report.final_loss = last;
        report.final_ema_loss = last;
    } else {
        report.final_loss = eval_mean_loss(model, data, eval_count, make_binder, balance_coeff);
        PTModel ema_model{model.cfg, report.ema_weights};
        report.final_ema_loss =
            eval_mean_loss(ema_model, data, eval_count, make_binder, balance_coeff);
    }
    return report;
}

}  // namespace

TrainReport train_toy(PTModel& model, const TokenDataset& data, const TrainToyConfig& cfg) {
    BinderFactory factory = [](Tape& t, PTModel& m, bool trainable) {
        return std::make_unique<ParamBinder>(t, m, trainable);
    };
    return run_loop(model, data, cfg, factory, nullptr);
}

QatTrainReport qat_train_toy(PTModel& model, const TokenDataset& data, const TrainToyConfig& cfg,
                             const QuantSpec& spec) {
    QatTrainReport report;
    init_f_store(model, spec, report.f_store);

    BinderFactory factory = [&spec, &report](Tape& t, PTModel& m, bool trainable) {
        return std::make_unique<QatBinder>(t, m, trainable, spec, report.f_store);
    };
    // scale factors train without neuron scaling or decay
    AdamW f_optim({.lr = cfg.lr});
    StepHook hook = [&](Tape& t, ParamBinder& binder, int64_t step, double loss) {
        auto& qb = static_cast<QatBinder&>(binder);
        io::TensorMap f_grads;
        for (const auto& [name, fv] : qb.f_bound()) f_grads[name] = t.grad(fv);
        f_optim.step(report.f_store, f_grads);

        QatStepRecord rec{step, loss, {}, {}};
        for (const auto& [name, fv] : report.f_store) {
            const double f = fv.get(0);
            rec.f_values[name] = f;
            rec.s_values[name] = f * ops::max_abs(qb.model().params.at(name)) / spec.level_max();
        }
        report.quant_steps.push_back(std::move(rec));
    };
    report.base = run_loop(model, data, cfg, factory, hook);
    return report;
}

TrainReport recover_train_toy(PTModel& materialized, ModelAdapters& adapters,
                              const TokenDataset& data, const TrainToyConfig& cfg) {
    BinderFactory factory = [&adapters](Tape& t, PTModel& m, bool) {
        return std::make_unique<CompressedBinder>(t, m, adapters);
    };
    // adapters train without neuron scaling or decay; the base stays frozen
    AdamW a_optim({.lr = cfg.lr});
    StepHook hook = [&](Tape& t, ParamBinder& binder, int64_t, double) {
        auto& cb = static_cast<CompressedBinder&>(binder);
        io::TensorMap grads;
        for (const auto& [name, v] : cb.adapter_bound()) grads[name] = t.grad(v);
        a_optim.step(adapters.params, grads);
    };
    return run_loop(materialized, data, cfg, factory, hook, /*train_base=*/false);
}

}  // namespace ptml
