// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ptml/model.hpp"
#include "ptml/tape.hpp"
#include "ptml/tensor.hpp"

namespace ptml {

enum class LevelSet : uint8_t { balanced_2bit, unbalanced_2bit, int4, int8 };

LevelSet level_set_from_str(const std::string& s);
const char* level_set_str(LevelSet ls);

// Uniform quantization grid. Codes are consecutive integers in
// [code_min, code_max]; reconstruction levels are s * (code - zero_point)
// with s = f * max|W| / level_max().
struct QuantSpec {
    LevelSet level_set = LevelSet::balanced_2bit;
    int bits = 2;
    int64_t code_min = 0;
    int64_t code_max = 3;
    double zero_point = 1.5;

    static QuantSpec make(LevelSet ls);
    double level_max() const { return static_cast<double>(code_max) - zero_point; }
    void validate() const;
};

// forward kernels (pure, used by the tape op, the clipping search, and tests)
Tensor fake_quant_tensor(const Tensor& w, const QuantSpec& spec, double f);
Tensor fake_quant_with_scale(const Tensor& w, const QuantSpec& spec, double s);

// Differentiable fake quantization. w is any shape; f is a positive scalar
// tensor. Straight-through on interior weights (clipped ones get zero), and
// the scale path feeds f: d/df = (max|w|/level_max) * ((q - z) - w/s * interior).
// max|w| itself is treated as a constant.
Value fake_quant(Tape& t, Value w, Value f, const QuantSpec& spec);

// Fixed-point search for the clipping scalar c minimizing quantization MSE:
//   c_next = E[|w| ; |w| > c] / (kappa * P(|w| <= c) + P(|w| > c))
// kappa is the inside-clip MSE coefficient 1 / (12 * level_max^2), the
// variance of a uniform step at clip c divided by c^2. Starts at
// mean|w| + 3 std|w|; c never exceeds max|w|.
struct ClippingInit {
    double c = 0.0;
    double f_init = 1.0;  // c / max|w|, the fake_quant parameter
    int64_t iterations = 0;
};
ClippingInit init_clipping_scalar(const Tensor& w, const QuantSpec& spec, int64_t max_iters = 100,
                                  double tol = 1e-10);

// dense-scan oracle over candidate clips c = max|w| * i / candidates
double grid_search_optimal_c(const Tensor& w, const QuantSpec& spec, int64_t candidates = 10000);
double quant_mse_at_c(const Tensor& w, const QuantSpec& spec, double c);

// Grouped 4-bit table quantization: each row splits into contiguous groups of
// group_size columns with a private absmax/7 scale, codes in [-7, 7].
struct QuantizedEmbedding {
    int64_t rows = 0;
    int64_t cols = 0;
    int64_t group_size = 0;
    std::vector<int8_t> codes;
    std::vector<float> scales;  // rows * (cols / group_size)
};
QuantizedEmbedding quantize_embedding(const Tensor& table, int64_t group_size);
Tensor dequantize_embedding(const QuantizedEmbedding& q);

// Binder that fake-quantizes every rank-2 weight (except excluded names) on
// the way into the forward pass. f scalars live in an external map keyed by
// parameter name, one [1]-tensor each, and are bound as trainable leaves.
class QatBinder : public ParamBinder {
  public:
    QatBinder(Tape& tape, PTModel& model, bool trainable, const QuantSpec& spec,
              io::TensorMap& f_store, std::set<std::string> exclude = {"embed", "unembed"});

    Value weight(const std::string& name) override;
    bool quantizes(const std::string& name) const;
    const std::map<std::string, Value>& f_bound() const { return f_cache_; }
    const std::map<std::string, Value>& weight_bound() const { return cache_; }

  private:
    QuantSpec spec_;
    io::TensorMap* f_store_;
    std::set<std::string> exclude_;
    std::map<std::string, Value> f_cache_;
    std::map<std::string, Value> fq_cache_;
};

// fills f_store with clipping-initialized f scalars for every weight the
// binder would quantize; returns the per-tensor iteration counts
std::map<std::string, ClippingInit> init_f_store(const PTModel& model, const QuantSpec& spec,
                                                 io::TensorMap& f_store,
                                                 const std::set<std::string>& exclude = {
                                                     "embed", "unembed"});

}  // namespace ptml
