// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ptml/tensor.hpp"

namespace ptml {

// Handle into a Tape. Only valid for the tape that produced it.
struct Value {
    int32_t id = -1;
    bool defined() const { return id >= 0; }
};

// Reverse-mode tape. Records every primitive in execution order; backward()
// replays the recorded pullbacks in exact reverse order, so identical forward
// computations yield bit-identical gradients. Single-owner, not shareable
// across threads.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    size_t size() const { return nodes_.size(); }

    Value leaf(Tensor t);                    // requires_grad taken from the tensor flag
    Value leaf(Tensor t, bool requires_grad);
    Value constant(Tensor t) { return leaf(std::move(t), false); }

    const Tensor& value(Value v) const { return node(v).value; }
    bool needs_grad(Value v) const { return node(v).needs_grad; }

    // Generic primitive registration; the extension point used by the
    // quantization and codec modules for their custom differentiable ops.
    // `vjp` receives the upstream gradient and must push contributions into
    // the inputs via accumulate_grad(). The output is finiteness-checked.
    using Vjp = std::function<void(Tape&, const Tensor& upstream)>;
    Value record(const char* op, std::vector<Value> inputs, Tensor output, Vjp vjp);

    void accumulate_grad(Value v, const Tensor& contribution);

    // Reverse pass from a scalar loss. Errors: non-scalar loss, a loss with
    // no gradient path (detached graph), or a second call without reset.
    void backward(Value loss);
    bool gradients_ready() const { return gradients_ready_; }
    void reset_gradients();

    // Gradient of a leaf/value after backward(); zeros if no path reached it.
    Tensor grad(Value v) const;

    // --- primitive ops -----------------------------------------------------
    Value matmul(Value a, Value b);
    Value transpose(Value a);
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value neg(Value a);
    Value exp(Value a);
    Value log(Value a);
    Value silu(Value a);
    Value gelu(Value a);
    Value add_scalar(Value a, double s);
    Value mul_scalar(Value a, double s);
    Value softmax(Value x, int axis);
    Value masked_softmax(Value logits, BoolMask mask);
    Value rmsnorm(Value x, Value gain, double eps);
    Value reshape(Value x, Shape new_shape);
    Value slice_rows(Value x, int64_t lo, int64_t hi);
    Value slice_cols(Value x, int64_t lo, int64_t hi);
    Value concat_rows(std::span<const Value> parts);
    Value concat_cols(std::span<const Value> parts);
    Value gather_rows(Value x, std::vector<int64_t> idx);  // embedding-gather
    Value scatter_rows_sum(Value rows, std::vector<int64_t> idx, int64_t out_rows);
    Value gather_flat(Value x, std::vector<int64_t> flat_idx);
    Value scale_rows(Value x, Value row_scales);
    Value sum(Value x);
    Value mean(Value x);
    Value mse_loss(Value pred, Tensor target);
    Value cross_entropy(Value logits, std::vector<int64_t> target_ids);  // mean NLL

private:
    struct Node {
        const char* op;
        std::vector<int32_t> inputs;
        Tensor value;
        bool needs_grad = false;
        Vjp vjp;
    };

    const Node& node(Value v) const;
    Tensor ones_like_scalar(DType dt) const { return Tensor::scalar(1.0, dt); }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool grad_enabled_ = true;
    bool gradients_ready_ = false;
};

}  // namespace ptml
