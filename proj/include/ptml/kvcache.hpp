// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ptml/tensor.hpp"

namespace ptml {

// Two-block layer split for cache sharing: Block 1 owns key/value storage,
// Block 2 reads Block 1's entries and has its K/V projections removed.
struct BlockSplit {
    int64_t total_layers = 0;
    int64_t block1_layers = 0;
    int64_t block2_layers = 0;

    static BlockSplit from_fraction(int64_t total_layers, double block1_fraction = 0.625);
    void validate() const;
    double saved_fraction() const;  // block2_layers / total_layers
};

enum class SharePolicy : uint8_t { tail_aligned, modulo };

// Block-2 layer j (0-based within Block 2) → Block-1 layer index.
// tail_aligned pairs adjacent depths: j → n1 − n2 + j. modulo wraps: j → j mod n1.
std::vector<int64_t> build_share_map(const BlockSplit& split, SharePolicy policy);

struct PrefillFlopPlan {
    int64_t block1_positions = 0;  // prompt positions that run Block 1
    int64_t block2_positions = 0;  // prompt positions that run Block 2 (the last one)
    int64_t skipped_layer_invocations = 0;
    double saved_fraction = 0.0;  // of total layer invocations for this prompt
};
PrefillFlopPlan prefill_flop_plan(const BlockSplit& split, int64_t seq_len);

// Symmetric per-head absmax 8-bit quantization of one cache entry.
struct QuantizedKV {
    int64_t rows = 0;
    int64_t num_heads = 0;
    int64_t head_dim = 0;
    std::vector<int8_t> codes;   // rows × num_heads × head_dim
    std::vector<float> scales;   // rows × num_heads
};
QuantizedKV quantize_cache_entry(const Tensor& kv, int64_t num_heads);
Tensor dequantize_cache_entry(const QuantizedKV& q);

// Per-session cache. Only owner layers may write; shared layers resolve to
// their owner's storage on read. Counters expose what instrumented tests
// need: writes, reads, and that Block-2 layers never write.
class KVCacheStore {
  public:
    // sharing off: every layer owns its slot
    KVCacheStore(int64_t total_layers, bool quantized, int64_t num_heads);
    // sharing on
    KVCacheStore(const BlockSplit& split, SharePolicy policy, bool quantized, int64_t num_heads);
    // explicit owner table (e.g. multi-track layouts); owner[i] must be an owner itself
    KVCacheStore(std::vector<int64_t> owner, bool quantized, int64_t num_heads);

    int64_t total_layers() const { return static_cast<int64_t>(owner_.size()); }
    int64_t owner_of(int64_t layer) const;
    bool owns(int64_t layer) const { return owner_of(layer) == layer; }
    int64_t owned_layers() const { return owned_count_; }
    bool sharing() const { return owned_count_ != total_layers(); }

    // rows: [n × num_heads·head_dim]; every owner must append the same row
    // count per position batch
    void append(int64_t layer, const Tensor& k_rows, const Tensor& v_rows);
    std::pair<Tensor, Tensor> read(int64_t layer);

    int64_t length() const { return length_; }
    int64_t write_count() const { return writes_; }
    int64_t read_count() const { return reads_; }

    int64_t bytes_unquantized(int64_t value_width_bytes = 4) const;
    nlohmann::ordered_json memory_record(int64_t value_width_bytes = 4) const;

  private:
    struct Slot {
        std::vector<Tensor> k_rows, v_rows;
        std::vector<QuantizedKV> k_q, v_q;
    };
    std::vector<int64_t> owner_;
    std::vector<Slot> slots_;
    bool quantized_ = false;
    int64_t num_heads_ = 1;
    int64_t owned_count_ = 0;
    int64_t length_ = 0;
    int64_t writes_ = 0;
    int64_t reads_ = 0;
};

}  // namespace ptml
