// SPDX-License-Identifier: Apache-2.0
#include "ptml/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <fmt/format.h>

#include "ptml/errors.hpp"
#include "ptml/optim.hpp"

namespace ptml {

namespace {

// column access into a row-major f64 buffer
struct ColMat {
    std::vector<double> d;
    int64_t rows = 0;
    int64_t cols = 0;

    double& at(int64_t r, int64_t c) { return d[static_cast<size_t>(r * cols + c)]; }
    double col_dot(int64_t p, int64_t q) const {
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
            acc += d[static_cast<size_t>(r * cols + p)] * d[static_cast<size_t>(r * cols + q)];
        }
        return acc;
    }
    void rotate_cols(int64_t p, int64_t q, double c, double s) {
        for (int64_t r = 0; r < rows; ++r) {
            double& ap = d[static_cast<size_t>(r * cols + p)];
            double& aq = d[static_cast<size_t>(r * cols + q)];
            const double np = c * ap - s * aq;
            const double nq = s * ap + c * aq;
            ap = np;
            aq = nq;
        }
    }
};

}  // namespace

SVDResult svd(const Tensor& w) {
    if (w.rank() != 2) throw ShapeError("svd expects a rank-2 tensor");
    w.check_finite("svd");
    const int64_t m = w.dim(0);
    const int64_t n = w.dim(1);
    if (m < n) {
        // one-sided Jacobi wants at least as many rows as columns
        SVDResult tall = svd(ops::transpose(w));
        return {std::move(tall.v), std::move(tall.s), std::move(tall.u)};
    }

    ColMat a{std::vector<double>(static_cast<size_t>(m * n)), m, n};
    for (int64_t i = 0; i < w.numel(); ++i) a.d[static_cast<size_t>(i)] = w.get(i);
    ColMat v{std::vector<double>(static_cast<size_t>(n * n)), n, n};
    for (int64_t j = 0; j < n; ++j) v.at(j, j) = 1.0;

    // orthogonalize column pairs until a full sweep changes nothing
    constexpr int kMaxSweeps = 100;
    constexpr double kTol = 1e-15;
    bool converged = (n < 2);
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        int64_t rotations = 0;
        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double app = a.col_dot(p, p);
                const double aqq = a.col_dot(q, q);
                const double apq = a.col_dot(p, q);
                if (std::abs(apq) <= kTol * std::sqrt(app * aqq)) continue;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t_rot =
                    (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t_rot * t_rot);
                const double s = c * t_rot;
                a.rotate_cols(p, q, c, s);
                v.rotate_cols(p, q, c, s);
                ++rotations;
            }
        }
        converged = rotations == 0;
    }
    if (!converged) throw NumericError("svd did not converge");

    std::vector<double> sigma(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        sigma[static_cast<size_t>(j)] = std::sqrt(a.col_dot(j, j));
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
    });

    // columns whose norm is numerical dust would normalize into noise
    const double null_tol = 1e-13 * sigma[static_cast<size_t>(order[0])];
    SVDResult out{Tensor({m, n}, DType::f64), Tensor({n}, DType::f64), Tensor({n, n}, DType::f64)};
    for (int64_t j = 0; j < n; ++j) {
        const int64_t src = order[static_cast<size_t>(j)];
        const double sj = sigma[static_cast<size_t>(src)];
        out.s.set(j, sj);
        for (int64_t r = 0; r < m; ++r) {
            out.u.set2(r, j, sj > null_tol ? a.at(r, src) / sj : 0.0);
        }
        for (int64_t r = 0; r < n; ++r) out.v.set2(r, j, v.at(r, src));
    }
    return out;
}

LoRAAdapter LoRAAdapter::fresh(int64_t d_out, int64_t d_in, int64_t rank, double alpha,
                               Rng& rng) {
    if (d_out < 1 || d_in < 1) throw ShapeError("adapter dimensions must be positive");
    if (rank < 0) throw ShapeError("adapter rank must be nonnegative");
    const int64_t r = std::max<int64_t>(rank, 1);
    LoRAAdapter ad{rank, alpha, Tensor({d_out, r}, DType::f32), Tensor({r, d_in}, DType::f32)};
    if (rank > 0) {
        ad.a = Tensor::gaussian({d_out, r}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
    }
    return ad;
}

SVDSplit svd_pullout(const Tensor& w, int64_t rank, double alpha) {
    if (w.rank() != 2) throw ShapeError("svd_pullout expects a rank-2 tensor");
    const int64_t m = w.dim(0);
    const int64_t n = w.dim(1);
    if (rank < 0 || rank > std::min(m, n)) {
        throw ShapeError(fmt::format("pull-out rank {} outside [0, {}]", rank, std::min(m, n)));
    }
    const double eff_alpha = alpha < 0.0 ? static_cast<double>(rank) : alpha;
    if (rank == 0) {
        LoRAAdapter ad{0, eff_alpha, Tensor({m, 1}, w.dtype()), Tensor({1, n}, w.dtype())};
        return {std::move(ad), w.to(w.dtype())};
    }

    SVDResult dec = svd(w);
    Tensor a({m, rank}, DType::f64);
    Tensor b({rank, n}, DType::f64);
    for (int64_t j = 0; j < rank; ++j) {
        const double sj = dec.s.get(j);
        for (int64_t r = 0; r < m; ++r) a.set2(r, j, dec.u.at2(r, j) * sj);
        for (int64_t c = 0; c < n; ++c) b.set2(j, c, dec.v.at2(c, j));
    }
    Tensor residual = ops::sub(w.to(DType::f64), ops::matmul(a, b));
    LoRAAdapter ad{rank, eff_alpha, a.to(w.dtype()), b.to(w.dtype())};
    return {std::move(ad), residual.to(w.dtype())};
}

Tensor adapted_forward(const Tensor& x, const CompressedBlockMatrix& residual_t,
                       const LoRAAdapter& adapter) {
    if (x.rank() != 2) throw ShapeError("adapted_forward expects rank-2 activations");
    const int64_t d_in = residual_t.rows();
    const int64_t d_out = residual_t.cols();
    if (x.dim(1) != d_in) {
        throw ShapeError(fmt::format("activation width {} != input width {}", x.dim(1), d_in));
    }
    if (adapter.a.dim(0) != d_out || adapter.b.dim(1) != d_in) {
        throw ShapeError("adapter shape does not match the residual");
    }
    Tensor out = matmul_compressed(x, residual_t);
    const double scaling = adapter.scaling();
    if (scaling != 0.0) {
        Tensor low = ops::matmul(ops::matmul(x, ops::transpose(adapter.b)),
                                 ops::transpose(adapter.a));
        out = ops::add(out, ops::mul_scalar(low, scaling));
    }
    return out;
}

Value adapted_forward(Tape& t, Value x, const CompressedBlockMatrix& residual_t, Value a,
                      Value b, double scaling) {
    Value base = matmul_compressed(t, x, residual_t);
    Value low = t.matmul(t.matmul(x, t.transpose(b)), t.transpose(a));
    return t.add(base, t.mul_scalar(low, scaling));
}

Tensor solve_least_squares(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) {
        throw ShapeError("least squares expects [n x d_in] and [n x d_out]");
    }
    SVDResult dec = svd(x.to(DType::f64));
    const int64_t k = dec.s.numel();
    const double cutoff = 1e-12 * (k > 0 ? dec.s.get(0) : 0.0);
    Tensor uty = ops::matmul(ops::transpose(dec.u), y.to(DType::f64));  // [k x d_out]
    Tensor inv_s({k}, DType::f64);
    for (int64_t j = 0; j < k; ++j) {
        const double sj = dec.s.get(j);
        inv_s.set(j, sj > cutoff ? 1.0 / sj : 0.0);
    }
    Tensor wt = ops::matmul(dec.v, ops::scale_rows(uty, inv_s));  // [d_in x d_out]
    return ops::transpose(wt).to(x.dtype());
}

void save_adapter(const std::string& dir, const LoRAAdapter& adapter, uint64_t base_hash) {
    io::TensorMap tensors{{"a", adapter.a}, {"b", adapter.b}};
    io::ordered_json extra;
    extra["rank"] = adapter.rank;
    extra["alpha"] = adapter.alpha;
    extra["base_hash"] = io::hex64(base_hash);
    io::save_checkpoint(dir, tensors, extra);
}

LoRAAdapter load_adapter(const std::string& dir, uint64_t expected_base_hash) {
    io::Checkpoint ck = io::load_checkpoint(dir);
    if (!ck.extra.contains("rank") || !ck.extra.contains("alpha") ||
        !ck.extra.contains("base_hash")) {
        throw FormatError("adapter checkpoint: missing rank/alpha/base_hash metadata");
    }
    const std::string found = ck.extra["base_hash"].get<std::string>();
    const std::string expected = io::hex64(expected_base_hash);
    if (found != expected) {
        throw FormatError(fmt::format(
            "adapter checkpoint: base hash mismatch (expected {}, found {})", expected, found));
    }
    if (!ck.tensors.count("a") || !ck.tensors.count("b")) {
        throw FormatError("adapter checkpoint: missing a/b tensors");
    }
    LoRAAdapter ad{ck.extra["rank"].get<int64_t>(), ck.extra["alpha"].get<double>(),
                   ck.tensors.at("a"), ck.tensors.at("b")};
    return ad;
}

RecoveryReport recovery_finetune(const CompressedBlockMatrix& base, LoRAAdapter& adapter,
                                 const RegressionToy& toy, const RecoveryConfig& cfg) {
    if (cfg.steps < 0) throw UsageError("recovery steps must be nonnegative");
    if (cfg.lr < 0.0) throw UsageError("recovery learning rate must be nonnegative");

    auto eval_loss = [&]() {
        Tape t(false);
        Value x = t.constant(toy.x);
        Value a = t.leaf(adapter.a, false);
        Value b = t.leaf(adapter.b, false);
        Value pred = adapted_forward(t, x, base, a, b, adapter.scaling());
        return t.value(t.mse_loss(pred, toy.y)).item();
    };

    RecoveryReport report;
    report.steps = cfg.steps;
    report.first_loss = eval_loss();
    AdamW optim({.lr = cfg.lr});
    io::TensorMap params{{"a", adapter.a}, {"b", adapter.b}};
    for (int64_t step = 0; step < cfg.steps; ++step) {
        Tape t;
        Value x = t.constant(toy.x);
        Value a = t.leaf(params.at("a"), true);
        Value b = t.leaf(params.at("b"), true);
        Value pred = adapted_forward(t, x, base, a, b, adapter.scaling());
        Value loss = t.mse_loss(pred, toy.y);
        if (!std::isfinite(t.value(loss).item())) throw NumericError("non-finite recovery loss");
        t.backward(loss);
        io::TensorMap grads{{"a", t.grad(a)}, {"b", t.grad(b)}};
        optim.step(params, grads);
    }
    adapter.a = params.at("a");
    adapter.b = params.at("b");
    report.final_loss = eval_loss();
    return report;
}

CompressedModel compress_model(const PTModel& model, const std::set<std::string>& skip) {
    CompressedModel cm;
    cm.cfg = model.cfg;
    cm.base_hash = io::content_hash(model.params);
    for (const auto& [name, t] : model.params) {
        if (t.rank() == 2 && !skip.count(name)) {
            // store in apply orientation so the fused matmul needs no transpose
            cm.matrices.emplace(name, CompressedBlockMatrix::compress(ops::transpose(t)));
        } else {
            cm.passthrough.emplace(name, t);
        }
    }
    return cm;
}

PTModel materialize_compressed(const CompressedModel& cm) {
    PTModel model{cm.cfg, cm.passthrough};
    for (const auto& [name, mat] : cm.matrices) {
        model.params.emplace(name, ops::transpose(mat.decompress()));
    }
    return model;
}

ModelAdapters ModelAdapters::zero_init(const CompressedModel& cm, int64_t rank, double alpha,
                                       Rng& rng) {
    ModelAdapters out;
    out.rank = rank;
    out.alpha = alpha;
    for (const auto& [name, mat] : cm.matrices) {
        // the stored matrix is transposed, so cols/rows are the weight's out/in
        LoRAAdapter ad = LoRAAdapter::fresh(mat.cols(), mat.rows(), rank, alpha, rng);
        out.params.emplace(name + ".lora_a", std::move(ad.a));
        out.params.emplace(name + ".lora_b", std::move(ad.b));
    }
    return out;
}

CompressedBinder::CompressedBinder(Tape& tape, PTModel& materialized, ModelAdapters& adapters)
    : ParamBinder(tape, materialized, false), adapters_(&adapters) {}

Value CompressedBinder::weight(const std::string& name) {
    auto hit = composed_.find(name);
    if (hit != composed_.end()) return hit->second;
    Value base = param(name);
    const std::string key_a = name + ".lora_a";
    const std::string key_b = name + ".lora_b";
    auto pa = adapters_->params.find(key_a);
    if (pa == adapters_->params.end() || adapters_->scaling() == 0.0) {
        composed_.emplace(name, base);
        return base;
    }
    auto bind = [&](const std::string& key) {
        auto cached = adapter_cache_.find(key);
        if (cached != adapter_cache_.end()) return cached->second;
        Value v = tape_->leaf(adapters_->params.at(key), true);
        adapter_cache_.emplace(key, v);
        return v;
    };
    Value low = tape_->matmul(bind(key_a), bind(key_b));
    Value w = tape_->add(base, tape_->mul_scalar(low, adapters_->scaling()));
    composed_.emplace(name, w);
    return w;
}

}  // namespace ptml
