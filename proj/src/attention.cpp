// SPDX-License-Identifier: Apache-2.0
#include "ptml/attention.hpp"

#include <cmath>

#include <fmt/format.h>

namespace ptml {

void AttentionLayerSpec::validate() const {
    if (num_heads < 1 || head_dim < 1) throw ShapeError("attention: heads and head_dim must be positive");
    if (kind == AttnKind::local) {
        if (window < 1) throw ShapeError("attention: local window must be >= 1");
        if (head_dim % 2 != 0) throw ShapeError("attention: rotary layers need even head_dim");
        if (rope_base <= 0) throw ShapeError("attention: rope_base must be positive");
    }
}

InterleavePattern InterleavePattern::parse(std::string_view s) {
    if (s.empty()) throw FormatError("attention pattern: empty unit");
    for (char c : s) {
        if (c != 'L' && c != 'G') {
            throw FormatError(fmt::format("attention pattern: character '{}' not in {{L, G}}", c));
        }
    }
    return InterleavePattern{std::string(s)};
}

bool InterleavePattern::is_global(int64_t layer_index) const {
    return unit[static_cast<size_t>(layer_index % static_cast<int64_t>(unit.size()))] == 'G';
}

int64_t InterleavePattern::globals_in(int64_t num_layers) const {
    int64_t n = 0;
    for (int64_t i = 0; i < num_layers; ++i) n += is_global(i) ? 1 : 0;
    return n;
}

BoolMask attention_mask(AttnKind kind, int64_t window, std::span<const int64_t> pos_q,
                        std::span<const int64_t> pos_k) {
    BoolMask m(static_cast<int64_t>(pos_q.size()), static_cast<int64_t>(pos_k.size()));
    for (size_t i = 0; i < pos_q.size(); ++i) {
        for (size_t j = 0; j < pos_k.size(); ++j) {
            const int64_t gap = pos_q[i] - pos_k[j];
            bool allow = gap >= 0;
            if (kind == AttnKind::local) allow = allow && gap < window;
            m.set(static_cast<int64_t>(i), static_cast<int64_t>(j), allow);
        }
    }
    return m;
}

BoolMask local_attention_mask(int64_t seq_len, int64_t window) {
    if (window < 1) throw ShapeError("local_attention_mask: window must be >= 1");
    std::vector<int64_t> pos(static_cast<size_t>(seq_len));
    for (int64_t i = 0; i < seq_len; ++i) pos[static_cast<size_t>(i)] = i;
    return attention_mask(AttnKind::local, window, pos, pos);
}

Tensor rope_apply(const Tensor& x, std::span<const int64_t> positions, int64_t num_heads,
                  int64_t head_dim, double base, bool inverse) {
    if (x.rank() != 2 || x.dim(1) != num_heads * head_dim) {
        throw ShapeError(fmt::format("rope: input {} vs {} heads x {} dims", shape_str(x.shape()),
                                     num_heads, head_dim));
    }
    if (head_dim % 2 != 0) throw ShapeError("rope: head_dim must be even");
    if (static_cast<int64_t>(positions.size()) != x.dim(0)) {
        throw ShapeError(fmt::format("rope: {} positions for {} rows", positions.size(), x.dim(0)));
    }
    Tensor out(x.shape(), x.dtype());
    const int64_t half = head_dim / 2;
    for (int64_t r = 0; r < x.dim(0); ++r) {
        if (positions[static_cast<size_t>(r)] < 0) throw ShapeError("rope: negative position");
        const double pos = static_cast<double>(positions[static_cast<size_t>(r)]);
        for (int64_t h = 0; h < num_heads; ++h) {
            const int64_t off = h * head_dim;
            for (int64_t i = 0; i < half; ++i) {
                const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) /
                                                               static_cast<double>(head_dim));
                const double c = std::cos(theta);
                const double s = inverse ? -std::sin(theta) : std::sin(theta);
                const double a = x.at2(r, off + 2 * i);
                const double b = x.at2(r, off + 2 * i + 1);
                out.set2(r, off + 2 * i, a * c - b * s);
                out.set2(r, off + 2 * i + 1, a * s + b * c);
            }
        }
    }
    return out;
}

Value rope(Tape& t, Value x, std::vector<int64_t> positions, int64_t num_heads, int64_t head_dim,
           double base) {
    Tensor out = rope_apply(t.value(x), positions, num_heads, head_dim, base);
    return t.record("rope", {x}, std::move(out),
                    [x, positions = std::move(positions), num_heads, head_dim, base](
                        Tape& tp, const Tensor& u) {
                        tp.accumulate_grad(x, rope_apply(u, positions, num_heads, head_dim, base,
                                                         /*inverse=*/true));
                    });
}

Value attend(Tape& t, const AttentionLayerSpec& spec, Value q, Value k, Value v,
             std::vector<int64_t> pos_q, std::vector<int64_t> pos_k) {
    spec.validate();
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    const int64_t width = spec.num_heads * spec.head_dim;
    if (qv.rank() != 2 || qv.dim(1) != width) {
        throw ShapeError(fmt::format("attend: q {} vs width {}", shape_str(qv.shape()), width));
    }
    if (kv.shape() != vv.shape() || kv.rank() != 2 || kv.dim(1) != width) {
        throw ShapeError("attend: k/v layout mismatch");
    }
    if (static_cast<int64_t>(pos_q.size()) != qv.dim(0) ||
        static_cast<int64_t>(pos_k.size()) != kv.dim(0)) {
        throw ShapeError("attend: position list lengths do not match rows");
    }

    Value qr = q, kr = k;
    if (spec.kind == AttnKind::local) {
        qr = rope(t, q, pos_q, spec.num_heads, spec.head_dim, spec.rope_base);
        kr = rope(t, k, pos_k, spec.num_heads, spec.head_dim, spec.rope_base);
    }
    const BoolMask mask = attention_mask(spec.kind, spec.window, pos_q, pos_k);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(spec.head_dim));

    std::vector<Value> head_outs;
    head_outs.reserve(static_cast<size_t>(spec.num_heads));
    for (int64_t h = 0; h < spec.num_heads; ++h) {
        const int64_t lo = h * spec.head_dim, hi = lo + spec.head_dim;
        Value qh = t.slice_cols(qr, lo, hi);
        Value kh = t.slice_cols(kr, lo, hi);
        Value vh = t.slice_cols(v, lo, hi);
        Value logits = t.mul_scalar(t.matmul(qh, t.transpose(kh)), inv_sqrt);
        Value weights = t.masked_softmax(logits, mask);
        head_outs.push_back(t.matmul(weights, vh));
    }
    return t.concat_cols(head_outs);
}

}  // namespace ptml
