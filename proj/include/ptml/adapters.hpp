// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "ptml/blockcodec.hpp"
#include "ptml/datasets.hpp"
#include "ptml/io.hpp"
#include "ptml/model.hpp"
#include "ptml/rng.hpp"
#include "ptml/tape.hpp"
#include "ptml/tensor.hpp"

namespace ptml {

// Thin singular value decomposition, w = u * diag(s) * v^T with the columns
// ordered by descending singular value. One-sided Jacobi on f64 internals;
// results come back in f64. u columns whose singular value is numerically
// zero (relative to the largest) are zero vectors, not normalized noise.
struct SVDResult {
    Tensor u;  // [m x k]
    Tensor s;  // [k]
    Tensor v;  // [n x k]
};
SVDResult svd(const Tensor& w);

// Low-rank additive correction for a [d_out x d_in] weight. rank 0 keeps
// inert single-column placeholders so no tensor ever has a zero extent;
// scaling() is zero there, so the contribution vanishes identically.
struct LoRAAdapter {
    int64_t rank = 0;
    double alpha = 0.0;
    Tensor a;  // [d_out x max(rank, 1)]
    Tensor b;  // [max(rank, 1) x d_in]

    double scaling() const { return rank > 0 ? alpha / static_cast<double>(rank) : 0.0; }

    // a gaussian, b zero: the adapter starts as an exact no-op
    static LoRAAdapter fresh(int64_t d_out, int64_t d_in, int64_t rank, double alpha, Rng& rng);
};

// top-rank singular directions moved into the adapter; the residual is what
// the block codec then compresses
struct SVDSplit {
    LoRAAdapter adapter;  // a = u_r * sigma_r, b = v_r^T
    Tensor residual;      // w - a * b
};
// alpha defaults to the rank, making scaling() one
SVDSplit svd_pullout(const Tensor& w, int64_t rank, double alpha = -1.0);

// x[n x d_in] through a compressed residual stored in apply orientation
// ([d_in x d_out], the transpose of the weight) plus the adapter path:
// x * residual + scaling * (x * b^T) * a^T
Tensor adapted_forward(const Tensor& x, const CompressedBlockMatrix& residual_t,
                       const LoRAAdapter& adapter);
// tape form; a and b are the adapter leaves so gradients reach them
Value adapted_forward(Tape& t, Value x, const CompressedBlockMatrix& residual_t, Value a, Value b,
                      double scaling);

// least-squares oracle: the w [d_out x d_in] minimizing |x * w^T - y|_F,
// via the pseudoinverse of x
Tensor solve_least_squares(const Tensor& x, const Tensor& y);

// adapter checkpoint: tensors a/b plus rank, alpha, and the hash of the base
// model the adapter was trained against; loading verifies that hash
void save_adapter(const std::string& dir, const LoRAAdapter& adapter, uint64_t base_hash);
LoRAAdapter load_adapter(const std::string& dir, uint64_t expected_base_hash);

struct RecoveryConfig {
    int64_t steps = 500;
    double lr = 0.02;
};

struct RecoveryReport {
    int64_t steps = 0;
    double first_loss = 0.0;  // before any update
    double final_loss = 0.0;  // after the last update
};

// full-batch adapter training against a frozen compressed base on the
// regression toy; only adapter.a / adapter.b change
RecoveryReport recovery_finetune(const CompressedBlockMatrix& base, LoRAAdapter& adapter,
                                 const RegressionToy& toy, const RecoveryConfig& cfg);

// A whole model after post-training compression: every rank-2 weight except
// the skip list becomes a block-coded matrix stored in apply orientation;
// everything else passes through untouched.
struct CompressedModel {
    PTModelConfig cfg;
    std::map<std::string, CompressedBlockMatrix> matrices;
    io::TensorMap passthrough;
    uint64_t base_hash = 0;  // content hash of the source parameters
};

CompressedModel compress_model(const PTModel& model,
                               const std::set<std::string>& skip = {"embed", "unembed"});

// decode every compressed matrix back into a parameter set; the result holds
// the lossy residual weights and serves as the frozen base for recovery
PTModel materialize_compressed(const CompressedModel& cm);

// one adapter per compressed matrix, keyed "<weight>.lora_a" / "<weight>.lora_b"
struct ModelAdapters {
    int64_t rank = 0;
    double alpha = 0.0;
    io::TensorMap params;

    double scaling() const { return rank > 0 ? alpha / static_cast<double>(rank) : 0.0; }
    static ModelAdapters zero_init(const CompressedModel& cm, int64_t rank, double alpha,
                                   Rng& rng);
};

// Binds a materialized compressed model with its adapters: base weights are
// frozen constants, adapter tensors are the only trainable leaves.
class CompressedBinder : public ParamBinder {
  public:
    CompressedBinder(Tape& tape, PTModel& materialized, ModelAdapters& adapters);

    Value weight(const std::string& name) override;
    const std::map<std::string, Value>& adapter_bound() const { return adapter_cache_; }

  private:
    ModelAdapters* adapters_;
    std::map<std::string, Value> adapter_cache_;  // raw a/b leaves
    std::map<std::string, Value> composed_;       // base + scaled low-rank product
};

}  // namespace ptml
