// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ptml/tape.hpp"

namespace ptml {

enum class AttnKind : uint8_t { local, global };

// Local layers use sliding-window causal attention with rotary positions;
// global layers attend to the whole causal prefix with no positional
// embedding at all.
struct AttentionLayerSpec {
    AttnKind kind = AttnKind::local;
    int64_t window = 8;  // local only: self plus window-1 predecessors
    int64_t num_heads = 1;
    int64_t head_dim = 8;
    double rope_base = 10000.0;  // local only
    bool has_kv_projection = true;
    void validate() const;
};

// Repeating layer-kind unit, e.g. "LLLG": three local layers then one global.
struct InterleavePattern {
    std::string unit;
    static InterleavePattern parse(std::string_view s);
    bool is_global(int64_t layer_index) const;
    int64_t globals_in(int64_t num_layers) const;
};

// allowed(i, j) iff pos_k[j] ≤ pos_q[i] and, for local kind,
// pos_q[i] − pos_k[j] < window.
BoolMask attention_mask(AttnKind kind, int64_t window, std::span<const int64_t> pos_q,
                        std::span<const int64_t> pos_k);
BoolMask local_attention_mask(int64_t seq_len, int64_t window);

// Rotary embedding over [seq × num_heads·head_dim] rows; adjacent dimension
// pairs inside each head rotate by position·base^(−2i/head_dim). `inverse`
// applies the opposite rotation (used by the backward pass).
Tensor rope_apply(const Tensor& x, std::span<const int64_t> positions, int64_t num_heads,
                  int64_t head_dim, double base, bool inverse = false);
Value rope(Tape& t, Value x, std::vector<int64_t> positions, int64_t num_heads, int64_t head_dim,
           double base);

// Scaled dot-product attention over flattened-head tensors
// q: [nq × H·hd], k/v: [nk × H·hd]. Local kind applies rope to q and k with
// the given positions; global kind uses raw projections (NoPE).
Value attend(Tape& t, const AttentionLayerSpec& spec, Value q, Value k, Value v,
             std::vector<int64_t> pos_q, std::vector<int64_t> pos_k);

}  // namespace ptml
