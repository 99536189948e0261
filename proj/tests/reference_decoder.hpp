// SPDX-License-Identifier: Apache-2.0
#pragma once

// Plain sequential decoder used as the oracle for single-track equivalence.
// No tape, no track machinery, no cache: rotation, masking, and softmax are
// written out longhand so agreement actually means something.

#include <cmath>
#include <span>
#include <vector>

#include "ptml/model.hpp"

namespace ptml::test {

inline Tensor ref_attention(const Tensor& q, const Tensor& k, const Tensor& v, AttnKind kind,
                            int64_t heads, int64_t hd, int64_t window, double base) {
    const int64_t n = q.dim(0);
    Tensor out({n, heads * hd}, q.dtype());
    for (int64_t h = 0; h < heads; ++h) {
        auto rotated = [&](const Tensor& m, int64_t row, int64_t col, int64_t pos) {
            if (kind == AttnKind::global) return m.at2(row, h * hd + col);
            const int64_t pair = col / 2;
            const double theta =
                std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(hd));
            const double ang = static_cast<double>(pos) * theta;
            const double a = m.at2(row, h * hd + 2 * pair);
            const double b = m.at2(row, h * hd + 2 * pair + 1);
            return col % 2 == 0 ? a * std::cos(ang) - b * std::sin(ang)
                                : a * std::sin(ang) + b * std::cos(ang);
        };
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> weight(static_cast<size_t>(n), 0.0);
            double best = -1e300;
            for (int64_t j = 0; j <= i; ++j) {
                if (kind == AttnKind::local && i - j >= window) continue;
                double s = 0;
                for (int64_t c = 0; c < hd; ++c) s += rotated(q, i, c, i) * rotated(k, j, c, j);
                weight[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(hd));
                best = std::max(best, weight[static_cast<size_t>(j)]);
            }
            double z = 0;
            for (int64_t j = 0; j <= i; ++j) {
                if (kind == AttnKind::local && i - j >= window) continue;
                weight[static_cast<size_t>(j)] = std::exp(weight[static_cast<size_t>(j)] - best);
                z += weight[static_cast<size_t>(j)];
            }
            for (int64_t c = 0; c < hd; ++c) {
                double acc = 0;
                for (int64_t j = 0; j <= i; ++j) {
                    if (kind == AttnKind::local && i - j >= window) continue;
                    acc += weight[static_cast<size_t>(j)] / z * v.at2(j, h * hd + c);
                }
                out.set2(i, h * hd + c, acc);
            }
        }
    }
    return out;
}

// Full forward for a single-track dense model without sharing.
inline Tensor ref_decoder_logits(const PTModel& m, std::span<const int64_t> tokens) {
    const auto& c = m.cfg;
    const auto pat = InterleavePattern::parse(c.attention_unit);
    auto W = [&](const std::string& name) { return m.params.at(name); };

    Tensor h = ops::gather_rows(W("embed"), tokens);
    for (int64_t i = 0; i < c.total_layers; ++i) {
        const std::string pfx = "t0.l" + std::to_string(i) + ".";
        Tensor a_in = ops::rmsnorm(h, W(pfx + "ln1.gain"), 1e-6);
        Tensor q = ops::matmul(a_in, ops::transpose(W(pfx + "attn.wq")));
        Tensor k = ops::matmul(a_in, ops::transpose(W(pfx + "attn.wk")));
        Tensor v = ops::matmul(a_in, ops::transpose(W(pfx + "attn.wv")));
        Tensor att = ref_attention(q, k, v, pat.is_global(i) ? AttnKind::global : AttnKind::local,
                                   c.heads, c.head_dim, c.window, c.rope_base);
        h = ops::add(h, ops::matmul(att, ops::transpose(W(pfx + "attn.wo"))));

        Tensor f_in = ops::rmsnorm(h, W(pfx + "ln2.gain"), 1e-6);
        Tensor gate = ops::silu(ops::matmul(f_in, ops::transpose(W(pfx + "ffn.wg"))));
        Tensor up = ops::matmul(f_in, ops::transpose(W(pfx + "ffn.wi")));
        h = ops::add(h, ops::matmul(ops::mul(gate, up), ops::transpose(W(pfx + "ffn.wo"))));
    }
    h = ops::rmsnorm(h, W("final_norm.gain"), 1e-6);
    return ops::matmul(h, ops::transpose(W("unembed")));
}

}  // namespace ptml::test
