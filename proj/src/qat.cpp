// SPDX-License-Identifier: Apache-2.0
#include "ptml/qat.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace ptml {

LevelSet level_set_from_str(const std::string& s) {
    if (s == "balanced_2bit") return LevelSet::balanced_2bit;
    if (s == "unbalanced_2bit") return LevelSet::unbalanced_2bit;
    if (s == "int4") return LevelSet::int4;
    if (s == "int8") return LevelSet::int8;
    throw FormatError(fmt::format("unknown level set `{}`", s));
}

const char* level_set_str(LevelSet ls) {
    switch (ls) {
        case LevelSet::balanced_2bit: return "balanced_2bit";
        case LevelSet::unbalanced_2bit: return "unbalanced_2bit";
        case LevelSet::int4: return "int4";
        case LevelSet::int8: return "int8";
    }
    throw FormatError("unknown level set");
}

QuantSpec QuantSpec::make(LevelSet ls) {
    QuantSpec q;
    q.level_set = ls;
    switch (ls) {
        case LevelSet::balanced_2bit:
            q.bits = 2, q.code_min = 0, q.code_max = 3, q.zero_point = 1.5;
            break;
        case LevelSet::unbalanced_2bit:
            q.bits = 2, q.code_min = 0, q.code_max = 3, q.zero_point = 2.0;
            break;
        case LevelSet::int4:
            q.bits = 4, q.code_min = -7, q.code_max = 7, q.zero_point = 0.0;
            break;
        case LevelSet::int8:
            q.bits = 8, q.code_min = -127, q.code_max = 127, q.zero_point = 0.0;
            break;
    }
    return q;
}

void QuantSpec::validate() const {
    if (code_max <= code_min) throw ShapeError("quant spec: empty code range");
    if (level_max() <= 0) throw ShapeError("quant spec: zero_point at or above code_max");
    if (bits < 1 || bits > 16) throw ShapeError("quant spec: bits out of range");
}

Tensor fake_quant_with_scale(const Tensor& w, const QuantSpec& spec, double s) {
    spec.validate();
    w.check_finite("fake_quant");
    Tensor out = w;
    if (s == 0.0) {
        for (int64_t i = 0; i < out.numel(); ++i) out.set(i, 0.0);
        return out;
    }
    const auto lo = static_cast<double>(spec.code_min);
    const auto hi = static_cast<double>(spec.code_max);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double q = std::nearbyint(w.get(i) / s + spec.zero_point);
        // + 0.0 flushes -0.0 so requantizing is byte-identical, not just ==
        out.set(i, s * (std::clamp(q, lo, hi) - spec.zero_point) + 0.0);
    }
    return out;
}

Tensor fake_quant_tensor(const Tensor& w, const QuantSpec& spec, double f) {
    if (!(f > 0.0)) throw NumericError("fake_quant: f must be positive");
    const double a = ops::max_abs(w);
    return fake_quant_with_scale(w, spec, f * a / spec.level_max());
}

Value fake_quant(Tape& t, Value w, Value f, const QuantSpec& spec) {
    const Tensor& wv = t.value(w);
    const Tensor& fv = t.value(f);
    if (fv.numel() != 1) throw ShapeError("fake_quant: f must be a scalar tensor");
    const double fval = fv.item();
    Tensor out = fake_quant_tensor(wv, spec, fval);

    Tensor w_saved = wv;
    const DType f_dtype = fv.dtype();
    auto vjp = [w, f, w_saved, spec, fval, f_dtype](Tape& tp, const Tensor& upstream) {
        const double a = ops::max_abs(w_saved);
        Tensor gw = Tensor::zeros(w_saved.shape(), w_saved.dtype());
        double gf = 0.0;
        if (a > 0.0) {
            const double s = fval * a / spec.level_max();
            const auto lo = static_cast<double>(spec.code_min);
            const auto hi = static_cast<double>(spec.code_max);
            for (int64_t i = 0; i < w_saved.numel(); ++i) {
                const double shifted = w_saved.get(i) / s + spec.zero_point;
                // the pass-through region is the unrounded pre-image of the
                // code range, so the half-step bands at the edges count as
                // clipped even though rounding still lands on a valid code
                const bool interior = shifted >= lo && shifted <= hi;
                if (interior) gw.set(i, upstream.get(i));
                const double q = std::clamp(std::nearbyint(shifted), lo, hi);
                const double dout_ds =
                    interior ? q - spec.zero_point - w_saved.get(i) / s : q - spec.zero_point;
                gf += upstream.get(i) * dout_ds;
            }
            gf *= a / spec.level_max();
        } else {
            // all-zero input: any element that moves becomes the clipped
            // max, so identity pass-through is the faithful limit
            gw = upstream;
        }
        tp.accumulate_grad(w, gw);
        tp.accumulate_grad(f, Tensor::full({1}, gf, f_dtype));
    };
    return t.record("fake_quant", {w, f}, std::move(out), std::move(vjp));
}

double quant_mse_at_c(const Tensor& w, const QuantSpec& spec, double c) {
    spec.validate();
    if (w.numel() == 0) throw ShapeError("quant_mse_at_c: empty tensor");
    const double s = c / spec.level_max();
    const auto lo = static_cast<double>(spec.code_min);
    const auto hi = static_cast<double>(spec.code_max);
    double acc = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double x = w.get(i);
        double err = x;
        if (s > 0.0) {
            const double q = std::clamp(std::nearbyint(x / s + spec.zero_point), lo, hi);
            err = x - s * (q - spec.zero_point);
        }
        acc += err * err;
    }
    return acc / static_cast<double>(w.numel());
}

double grid_search_optimal_c(const Tensor& w, const QuantSpec& spec, int64_t candidates) {
    if (candidates < 2) throw ShapeError("grid search needs at least two candidates");
    const double a = ops::max_abs(w);
    if (a == 0.0) return 0.0;
    double best_c = a;
    double best_mse = quant_mse_at_c(w, spec, a);
    for (int64_t i = 1; i < candidates; ++i) {
        const double c = a * static_cast<double>(i) / static_cast<double>(candidates);
        const double mse = quant_mse_at_c(w, spec, c);
        if (mse < best_mse) {
            best_mse = mse;
            best_c = c;
        }
    }
    return best_c;
}

ClippingInit init_clipping_scalar(const Tensor& w, const QuantSpec& spec, int64_t max_iters,
                                  double tol) {
    spec.validate();
    w.check_finite("init_clipping_scalar");
    const int64_t n = w.numel();
    if (n == 0) throw ShapeError("init_clipping_scalar: empty tensor");

    const double a = ops::max_abs(w);
    if (a == 0.0) throw NumericError("clipping init: all-zero tensor has no scale");

    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += std::fabs(w.get(i));
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = std::fabs(w.get(i)) - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);

    const double kappa = 1.0 / (12.0 * spec.level_max() * spec.level_max());
    double c = std::min(mean + 3.0 * std::sqrt(var), a);
    int64_t it = 0;
    while (it < max_iters) {
        ++it;
        double outside_sum = 0.0;
        int64_t outside_n = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double x = std::fabs(w.get(i));
            if (x > c) {
                outside_sum += x;
                ++outside_n;
            }
        }
        if (outside_n == 0) {
            // nothing clipped: pushing c further changes nothing, settle on max
            c = a;
            break;
        }
        const double inside_frac = static_cast<double>(n - outside_n) / static_cast<double>(n);
        const double outside_frac = static_cast<double>(outside_n) / static_cast<double>(n);
        double next = (outside_sum / static_cast<double>(n)) /
                      (kappa * inside_frac + outside_frac);
        next = std::min(next, a);
        if (std::fabs(next - c) <= tol * std::max(1.0, c)) {
            c = next;
            break;
        }
        c = next;
    }
    return {c, c / a, it};
}

QuantizedEmbedding quantize_embedding(const Tensor& table, int64_t group_size) {
    if (table.rank() != 2) throw ShapeError("quantize_embedding: rank-2 table expected");
    table.check_finite("quantize_embedding");
    const int64_t rows = table.dim(0), cols = table.dim(1);
    if (group_size < 1 || cols % group_size != 0) {
        throw ShapeError(fmt::format("group size {} must divide row width {}", group_size, cols));
    }
    QuantizedEmbedding q;
    q.rows = rows;
    q.cols = cols;
    q.group_size = group_size;
    const int64_t groups = cols / group_size;
    q.codes.resize(static_cast<size_t>(rows * cols));
    q.scales.resize(static_cast<size_t>(rows * groups));
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t g = 0; g < groups; ++g) {
            double absmax = 0.0;
            for (int64_t j = 0; j < group_size; ++j) {
                absmax = std::max(absmax, std::fabs(table.at2(r, g * group_size + j)));
            }
            const double scale = absmax / 7.0;
            q.scales[static_cast<size_t>(r * groups + g)] = static_cast<float>(scale);
            for (int64_t j = 0; j < group_size; ++j) {
                const int64_t c = g * group_size + j;
                double code = 0.0;
                if (scale > 0.0) {
                    code = std::clamp(std::nearbyint(table.at2(r, c) / scale), -7.0, 7.0);
                }
                q.codes[static_cast<size_t>(r * cols + c)] = static_cast<int8_t>(code);
            }
        }
    }
    return q;
}

Tensor dequantize_embedding(const QuantizedEmbedding& q) {
    Tensor out({q.rows, q.cols}, DType::f32);
    const int64_t groups = q.cols / q.group_size;
    for (int64_t r = 0; r < q.rows; ++r) {
        for (int64_t c = 0; c < q.cols; ++c) {
            const float scale = q.scales[static_cast<size_t>(r * groups + c / q.group_size)];
            out.set2(r, c, static_cast<double>(scale) *
                               static_cast<double>(q.codes[static_cast<size_t>(r * q.cols + c)]));
        }
    }
    return out;
}

QatBinder::QatBinder(Tape& tape, PTModel& model, bool trainable, const QuantSpec& spec,
                     io::TensorMap& f_store, std::set<std::string> exclude)
    : ParamBinder(tape, model, trainable), spec_(spec), f_store_(&f_store),
      exclude_(std::move(exclude)) {
    spec_.validate();
}

bool QatBinder::quantizes(const std::string& name) const {
    if (exclude_.count(name)) return false;
    auto it = model_->params.find(name);
    return it != model_->params.end() && it->second.rank() == 2;
}

Value QatBinder::weight(const std::string& name) {
    if (!quantizes(name)) return param(name);
    auto hit = fq_cache_.find(name);
    if (hit != fq_cache_.end()) return hit->second;
    auto fit = f_store_->find(name);
    if (fit == f_store_->end()) {
        throw std::logic_error(fmt::format("no clipping scalar for `{}`", name));
    }
    auto fcached = f_cache_.find(name);
    Value f;
    if (fcached != f_cache_.end()) {
        f = fcached->second;
    } else {
        f = tape_->leaf(fit->second, trainable_);
        f_cache_.emplace(name, f);
    }
    Value q = fake_quant(*tape_, param(name), f, spec_);
    fq_cache_.emplace(name, q);
    return q;
}

std::map<std::string, ClippingInit> init_f_store(const PTModel& model, const QuantSpec& spec,
                                                 io::TensorMap& f_store,
                                                 const std::set<std::string>& exclude) {
    std::map<std::string, ClippingInit> out;
    for (const auto& [name, tensor] : model.params) {
        if (tensor.rank() != 2 || exclude.count(name)) continue;
        ClippingInit ci = init_clipping_scalar(tensor, spec);
        f_store[name] = Tensor::full({1}, ci.f_init);
        out.emplace(name, ci);
    }
    return out;
}

}  // namespace ptml
