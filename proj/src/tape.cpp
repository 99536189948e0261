// SPDX-License-Identifier: Apache-2.0
#include "ptml/tape.hpp"

#include <cmath>

#include <fmt/format.h>

namespace ptml {

namespace {

// Elementwise map over two equal-layout tensors, computed in double.
template <class F>
Tensor zipmap(const Tensor& a, const Tensor& b, F&& f) {
    Tensor out(a.shape(), a.dtype());
    for (int64_t i = 0; i < a.numel(); ++i) out.set(i, f(a.get(i), b.get(i)));
    return out;
}

template <class F>
Tensor map1(const Tensor& a, F&& f) {
    Tensor out(a.shape(), a.dtype());
    for (int64_t i = 0; i < a.numel(); ++i) out.set(i, f(a.get(i)));
    return out;
}

// Reduce an upstream gradient onto an operand that may have been scalar-
// broadcast: equal shapes pass through, a scalar operand receives the sum.
Tensor reduce_onto(const Shape& operand_shape, const Tensor& upstream) {
    if (operand_shape == upstream.shape()) return upstream;
    return Tensor::full(operand_shape, ops::sum(upstream).item(), upstream.dtype());
}

}  // namespace

const Tape::Node& Tape::node(Value v) const {
    if (!v.defined() || static_cast<size_t>(v.id) >= nodes_.size()) {
        throw std::logic_error("tape: value handle does not belong to this tape");
    }
    return nodes_[static_cast<size_t>(v.id)];
}

Value Tape::leaf(Tensor t) {
    const bool rg = t.requires_grad;
    return leaf(std::move(t), rg);
}

Value Tape::leaf(Tensor t, bool requires_grad) {
    Node n;
    n.op = "leaf";
    n.value = std::move(t);
    n.needs_grad = grad_enabled_ && requires_grad;
    nodes_.push_back(std::move(n));
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::record(const char* op, std::vector<Value> inputs, Tensor output, Vjp vjp) {
    output.check_finite(op);
    Node n;
    n.op = op;
    n.inputs.reserve(inputs.size());
    bool needs = false;
    for (Value v : inputs) {
        needs = needs || node(v).needs_grad;
        n.inputs.push_back(v.id);
    }
    n.needs_grad = grad_enabled_ && needs;
    n.value = std::move(output);
    if (n.needs_grad) {
        n.vjp = std::move(vjp);
    }
    nodes_.push_back(std::move(n));
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

void Tape::accumulate_grad(Value v, const Tensor& contribution) {
    const Node& n = node(v);
    if (!n.needs_grad) return;
    if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
    if (contribution.shape() != n.value.shape()) {
        throw ShapeError(fmt::format("accumulate_grad: contribution {} vs value {}",
                                     shape_str(contribution.shape()), shape_str(n.value.shape())));
    }
    ops::add_inplace(grads_[static_cast<size_t>(v.id)], contribution);
}

void Tape::backward(Value loss) {
    if (!grad_enabled_) throw std::logic_error("backward: tape was built with gradients disabled");
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    if (gradients_ready_) throw std::logic_error("backward: called twice without reset_gradients()");
    const Node& ln = node(loss);
    if (ln.value.numel() != 1) {
        throw ShapeError(fmt::format("backward: loss must be scalar, got {}", shape_str(ln.value.shape())));
    }
    if (!ln.needs_grad) {
        throw std::logic_error("backward: loss is detached from every requires_grad leaf");
    }
    grads_.assign(nodes_.size(), Tensor{});
    grads_[static_cast<size_t>(loss.id)] = Tensor::full(ln.value.shape(), 1.0, ln.value.dtype());
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (grads_[static_cast<size_t>(i)].defined() && n.vjp) {
            n.vjp(*this, grads_[static_cast<size_t>(i)]);
        }
    }
    gradients_ready_ = true;
}

void Tape::reset_gradients() {
    grads_.clear();
    gradients_ready_ = false;
}

Tensor Tape::grad(Value v) const {
    if (!gradients_ready_) throw std::logic_error("grad: backward() has not run");
    const Node& n = node(v);
    const Tensor& g = grads_[static_cast<size_t>(v.id)];
    if (g.defined()) return g;
    return Tensor::zeros(n.value.shape(), n.value.dtype());
}

// --- ops --------------------------------------------------------------------

Value Tape::matmul(Value a, Value b) {
    Tensor out = ops::matmul(value(a), value(b));
    Tensor av = value(a), bv = value(b);
    return record("matmul", {a, b}, std::move(out), [a, b, av, bv](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, ops::matmul(u, ops::transpose(bv)));
        t.accumulate_grad(b, ops::matmul(ops::transpose(av), u));
    });
}

Value Tape::transpose(Value a) {
    return record("transpose", {a}, ops::transpose(value(a)),
                  [a](Tape& t, const Tensor& u) { t.accumulate_grad(a, ops::transpose(u)); });
}

Value Tape::add(Value a, Value b) {
    Shape sa = value(a).shape(), sb = value(b).shape();
    return record("add", {a, b}, ops::add(value(a), value(b)), [a, b, sa, sb](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, reduce_onto(sa, u));
        t.accumulate_grad(b, reduce_onto(sb, u));
    });
}

Value Tape::sub(Value a, Value b) {
    Shape sa = value(a).shape(), sb = value(b).shape();
    return record("sub", {a, b}, ops::sub(value(a), value(b)), [a, b, sa, sb](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, reduce_onto(sa, u));
        t.accumulate_grad(b, reduce_onto(sb, ops::neg(u)));
    });
}

Value Tape::mul(Value a, Value b) {
    Tensor av = value(a), bv = value(b);
    return record("mul", {a, b}, ops::mul(av, bv), [a, b, av, bv](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, reduce_onto(av.shape(), ops::mul(u, bv)));
        t.accumulate_grad(b, reduce_onto(bv.shape(), ops::mul(u, av)));
    });
}

Value Tape::neg(Value a) {
    return record("neg", {a}, ops::neg(value(a)),
                  [a](Tape& t, const Tensor& u) { t.accumulate_grad(a, ops::neg(u)); });
}

Value Tape::exp(Value a) {
    Tensor out = ops::exp(value(a));
    Tensor saved = out;
    return record("exp", {a}, std::move(out),
                  [a, saved](Tape& t, const Tensor& u) { t.accumulate_grad(a, ops::mul(u, saved)); });
}

Value Tape::log(Value a) {
    Tensor av = value(a);
    return record("log", {a}, ops::log(av), [a, av](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, zipmap(u, av, [](double g, double x) { return g / x; }));
    });
}

Value Tape::silu(Value a) {
    Tensor av = value(a);
    return record("silu", {a}, ops::silu(av), [a, av](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, zipmap(u, av, [](double g, double x) {
                              const double sig = 1.0 / (1.0 + std::exp(-x));
                              return g * sig * (1.0 + x * (1.0 - sig));
                          }));
    });
}

Value Tape::gelu(Value a) {
    Tensor av = value(a);
    return record("gelu", {a}, ops::gelu(av), [a, av](Tape& t, const Tensor& u) {
        t.accumulate_grad(a, zipmap(u, av, [](double g, double x) {
                              constexpr double c = 0.7978845608028654;
                              const double inner = c * (x + 0.044715 * x * x * x);
                              const double th = std::tanh(inner);
                              const double d = 0.5 * (1.0 + th) +
                                               0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
                              return g * d;
                          }));
    });
}

Value Tape::add_scalar(Value a, double s) {
    return record("add_scalar", {a}, ops::add_scalar(value(a), s),
                  [a](Tape& t, const Tensor& u) { t.accumulate_grad(a, u); });
}

Value Tape::mul_scalar(Value a, double s) {
    return record("mul_scalar", {a}, ops::mul_scalar(value(a), s),
                  [a, s](Tape& t, const Tensor& u) { t.accumulate_grad(a, ops::mul_scalar(u, s)); });
}

Value Tape::softmax(Value x, int axis) {
    Tensor out = ops::softmax(value(x), axis);
    Tensor y = out;
    return record("softmax", {x}, std::move(out), [x, y, axis](Tape& t, const Tensor& u) {
        // restricted to the layouts ops::softmax accepts (rank 1 or 2)
        Tensor yr = y.rank() == 1 ? ops::reshape(y, {1, y.dim(0)}) : (axis == 0 ? ops::transpose(y) : y);
        Tensor ur = u.rank() == 1 ? ops::reshape(u, {1, u.dim(0)}) : (axis == 0 ? ops::transpose(u) : u);
        const int64_t rows = yr.dim(0), cols = yr.dim(1);
        Tensor gx(yr.shape(), yr.dtype());
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) dot += ur.at2(r, c) * yr.at2(r, c);
            for (int64_t c = 0; c < cols; ++c) {
                gx.set2(r, c, yr.at2(r, c) * (ur.at2(r, c) - dot));
            }
        }
        if (y.rank() == 1) {
            gx = ops::reshape(gx, y.shape());
        } else if (axis == 0) {
            gx = ops::transpose(gx);
        }
        t.accumulate_grad(x, gx);
    });
}

Value Tape::masked_softmax(Value logits, BoolMask mask) {
    Tensor out = ops::masked_softmax(value(logits), mask);
    Tensor y = out;
    return record("masked_softmax", {logits}, std::move(out), [logits, y, mask](Tape& t, const Tensor& u) {
        const int64_t rows = y.dim(0), cols = y.dim(1);
        Tensor gx(y.shape(), y.dtype());
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                if (mask.at(r, c)) dot += u.at2(r, c) * y.at2(r, c);
            }
            for (int64_t c = 0; c < cols; ++c) {
                gx.set2(r, c, mask.at(r, c) ? y.at2(r, c) * (u.at2(r, c) - dot) : 0.0);
            }
        }
        t.accumulate_grad(logits, gx);
    });
}

Value Tape::rmsnorm(Value x, Value gain, double eps) {
    Tensor xv = value(x), gv = value(gain);
    return record("rmsnorm", {x, gain}, ops::rmsnorm(xv, gv, eps), [x, gain, xv, gv, eps](Tape& t, const Tensor& u) {
        const int64_t rows = xv.dim(0), cols = xv.dim(1);
        Tensor gx(xv.shape(), xv.dtype());
        Tensor gg(gv.shape(), gv.dtype());
        for (int64_t r = 0; r < rows; ++r) {
            double ss = 0.0;
            for (int64_t c = 0; c < cols; ++c) ss += xv.at2(r, c) * xv.at2(r, c);
            const double m = ss / static_cast<double>(cols) + eps;
            const double inv_r = 1.0 / std::sqrt(m);
            const double inv_r3 = inv_r * inv_r * inv_r;
            double dot = 0.0;  // sum_k u_k g_k x_k
            for (int64_t c = 0; c < cols; ++c) dot += u.at2(r, c) * gv.get(c) * xv.at2(r, c);
            for (int64_t c = 0; c < cols; ++c) {
                const double xi = xv.at2(r, c);
                gx.set2(r, c, u.at2(r, c) * gv.get(c) * inv_r - xi * dot * inv_r3 / static_cast<double>(cols));
                gg.set(c, gg.get(c) + u.at2(r, c) * xi * inv_r);
            }
        }
        t.accumulate_grad(x, gx);
        t.accumulate_grad(gain, gg);
    });
}

Value Tape::reshape(Value x, Shape new_shape) {
    Shape old_shape = value(x).shape();
    return record("reshape", {x}, ops::reshape(value(x), std::move(new_shape)),
                  [x, old_shape](Tape& t, const Tensor& u) { t.accumulate_grad(x, ops::reshape(u, old_shape)); });
}

Value Tape::slice_rows(Value x, int64_t lo, int64_t hi) {
    Shape xs = value(x).shape();
    return record("slice_rows", {x}, ops::slice_rows(value(x), lo, hi), [x, xs, lo](Tape& t, const Tensor& u) {
        Tensor gx = Tensor::zeros(xs, u.dtype());
        for (int64_t r = 0; r < u.dim(0); ++r) {
            for (int64_t c = 0; c < u.dim(1); ++c) gx.set2(r + lo, c, u.at2(r, c));
        }
        t.accumulate_grad(x, gx);
    });
}

Value Tape::slice_cols(Value x, int64_t lo, int64_t hi) {
    Shape xs = value(x).shape();
    return record("slice_cols", {x}, ops::slice_cols(value(x), lo, hi), [x, xs, lo](Tape& t, const Tensor& u) {
        Tensor gx = Tensor::zeros(xs, u.dtype());
        for (int64_t r = 0; r < u.dim(0); ++r) {
            for (int64_t c = 0; c < u.dim(1); ++c) gx.set2(r, c + lo, u.at2(r, c));
        }
        t.accumulate_grad(x, gx);
    });
}

Value Tape::concat_rows(std::span<const Value> parts) {
    std::vector<Tensor> tensors;
    std::vector<Value> inputs;
    std::vector<int64_t> row_counts;
    for (Value v : parts) {
        tensors.push_back(value(v));
        inputs.push_back(v);
        row_counts.push_back(value(v).dim(0));
    }
    Tensor out = ops::concat_rows(tensors);
    return record("concat_rows", inputs, std::move(out), [inputs, row_counts](Tape& t, const Tensor& u) {
        int64_t at = 0;
        for (size_t i = 0; i < inputs.size(); ++i) {
            t.accumulate_grad(inputs[i], ops::slice_rows(u, at, at + row_counts[i]));
            at += row_counts[i];
        }
    });
}

Value Tape::concat_cols(std::span<const Value> parts) {
    std::vector<Tensor> tensors;
    std::vector<Value> inputs;
    std::vector<int64_t> col_counts;
    for (Value v : parts) {
        tensors.push_back(value(v));
        inputs.push_back(v);
        col_counts.push_back(value(v).dim(1));
    }
    Tensor out = ops::concat_cols(tensors);
    return record("concat_cols", inputs, std::move(out), [inputs, col_counts](Tape& t, const Tensor& u) {
        int64_t at = 0;
        for (size_t i = 0; i < inputs.size(); ++i) {
            t.accumulate_grad(inputs[i], ops::slice_cols(u, at, at + col_counts[i]));
            at += col_counts[i];
        }
    });
}

Value Tape::gather_rows(Value x, std::vector<int64_t> idx) {
    const int64_t src_rows = value(x).dim(0);
    Tensor out = ops::gather_rows(value(x), idx);
    return record("gather_rows", {x}, std::move(out), [x, idx, src_rows](Tape& t, const Tensor& u) {
        t.accumulate_grad(x, ops::scatter_rows_sum(u, idx, src_rows));
    });
}

Value Tape::scatter_rows_sum(Value rows, std::vector<int64_t> idx, int64_t out_rows) {
    Tensor out = ops::scatter_rows_sum(value(rows), idx, out_rows);
    return record("scatter_rows_sum", {rows}, std::move(out), [rows, idx](Tape& t, const Tensor& u) {
        t.accumulate_grad(rows, ops::gather_rows(u, idx));
    });
}

Value Tape::gather_flat(Value x, std::vector<int64_t> flat_idx) {
    Shape xs = value(x).shape();
    Tensor out = ops::gather_flat(value(x), flat_idx);
    return record("gather_flat", {x}, std::move(out), [x, xs, flat_idx](Tape& t, const Tensor& u) {
        Tensor gx = Tensor::zeros(xs, u.dtype());
        for (size_t i = 0; i < flat_idx.size(); ++i) {
            gx.set(flat_idx[i], gx.get(flat_idx[i]) + u.get(static_cast<int64_t>(i)));
        }
        t.accumulate_grad(x, gx);
    });
}

Value Tape::scale_rows(Value x, Value row_scales) {
    Tensor xv = value(x), sv = value(row_scales);
    return record("scale_rows", {x, row_scales}, ops::scale_rows(xv, sv),
                  [x, row_scales, xv, sv](Tape& t, const Tensor& u) {
                      t.accumulate_grad(x, ops::scale_rows(u, sv));
                      Tensor gs(sv.shape(), sv.dtype());
                      for (int64_t r = 0; r < xv.dim(0); ++r) {
                          double acc = 0.0;
                          for (int64_t c = 0; c < xv.dim(1); ++c) acc += u.at2(r, c) * xv.at2(r, c);
                          gs.set(r, acc);
                      }
                      t.accumulate_grad(row_scales, gs);
                  });
}

Value Tape::sum(Value x) {
    Shape xs = value(x).shape();
    return record("sum", {x}, ops::sum(value(x)), [x, xs](Tape& t, const Tensor& u) {
        t.accumulate_grad(x, Tensor::full(xs, u.item(), u.dtype()));
    });
}

Value Tape::mean(Value x) {
    Shape xs = value(x).shape();
    const double n = static_cast<double>(value(x).numel());
    return record("mean", {x}, ops::mean(value(x)), [x, xs, n](Tape& t, const Tensor& u) {
        t.accumulate_grad(x, Tensor::full(xs, u.item() / n, u.dtype()));
    });
}

Value Tape::mse_loss(Value pred, Tensor target) {
    const Tensor& pv = value(pred);
    if (pv.shape() != target.shape()) {
        throw ShapeError(fmt::format("mse_loss: prediction {} vs target {}", shape_str(pv.shape()),
                                     shape_str(target.shape())));
    }
    Tensor diff = ops::sub(pv, target.to(pv.dtype()));
    Tensor loss = ops::mean(ops::mul(diff, diff));
    return record("mse_loss", {pred}, std::move(loss), [pred, diff](Tape& t, const Tensor& u) {
        const double scale = 2.0 * u.item() / static_cast<double>(diff.numel());
        t.accumulate_grad(pred, ops::mul_scalar(diff, scale));
    });
}

Value Tape::cross_entropy(Value logits, std::vector<int64_t> target_ids) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2) throw ShapeError("cross_entropy: rank-2 logits expected");
    const int64_t n = lv.dim(0), vocab = lv.dim(1);
    if (static_cast<int64_t>(target_ids.size()) != n) {
        throw ShapeError(fmt::format("cross_entropy: {} targets for {} rows", target_ids.size(), n));
    }
    for (int64_t id : target_ids) {
        if (id < 0 || id >= vocab) throw ShapeError(fmt::format("cross_entropy: target {} outside vocab {}", id, vocab));
    }
    Tensor probs = ops::softmax(lv, 1);
    double loss_acc = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        loss_acc -= std::log(std::max(probs.at2(r, target_ids[static_cast<size_t>(r)]), 1e-300));
    }
    Tensor loss = Tensor::scalar(loss_acc / static_cast<double>(n), lv.dtype());
    return record("cross_entropy", {logits}, std::move(loss), [logits, probs, target_ids, n](Tape& t, const Tensor& u) {
        Tensor g = ops::mul_scalar(probs, u.item() / static_cast<double>(n));
        for (int64_t r = 0; r < n; ++r) {
            const int64_t c = target_ids[static_cast<size_t>(r)];
            g.set2(r, c, g.at2(r, c) - u.item() / static_cast<double>(n));
        }
        t.accumulate_grad(logits, g);
    });
}

}  // namespace ptml
