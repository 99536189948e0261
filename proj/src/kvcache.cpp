// SPDX-License-Identifier: Apache-2.0
#include "ptml/kvcache.hpp"

#include <cmath>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace ptml {

BlockSplit BlockSplit::from_fraction(int64_t total_layers, double block1_fraction) {
    if (total_layers < 2) throw ShapeError("block split needs at least 2 layers");
    int64_t n1 = static_cast<int64_t>(std::llround(static_cast<double>(total_layers) * block1_fraction));
    // keep n1 ≥ n2 ≥ 1
    const int64_t lo = (total_layers + 1) / 2;
    const int64_t hi = total_layers - 1;
    if (n1 < lo) n1 = lo;
    if (n1 > hi) n1 = hi;
    BlockSplit split{total_layers, n1, total_layers - n1};
    split.validate();
    return split;
}

void BlockSplit::validate() const {
    if (block1_layers + block2_layers != total_layers || block1_layers < block2_layers ||
        block2_layers < 1) {
        throw ShapeError(fmt::format("invalid block split {}+{} of {}", block1_layers, block2_layers,
                                     total_layers));
    }
}

double BlockSplit::saved_fraction() const {
    return static_cast<double>(block2_layers) / static_cast<double>(total_layers);
}

std::vector<int64_t> build_share_map(const BlockSplit& split, SharePolicy policy) {
    split.validate();
    std::vector<int64_t> map(static_cast<size_t>(split.block2_layers));
    for (int64_t j = 0; j < split.block2_layers; ++j) {
        map[static_cast<size_t>(j)] = policy == SharePolicy::tail_aligned
                                          ? split.block1_layers - split.block2_layers + j
                                          : j % split.block1_layers;
    }
    return map;
}

PrefillFlopPlan prefill_flop_plan(const BlockSplit& split, int64_t seq_len) {
    if (seq_len < 1) throw ShapeError("prefill plan needs seq_len >= 1");
    PrefillFlopPlan plan;
    plan.block1_positions = seq_len;
    plan.block2_positions = 1;
    plan.skipped_layer_invocations = (seq_len - 1) * split.block2_layers;
    plan.saved_fraction = static_cast<double>(plan.skipped_layer_invocations) /
                          static_cast<double>(seq_len * split.total_layers);
    return plan;
}

QuantizedKV quantize_cache_entry(const Tensor& kv, int64_t num_heads) {
    if (kv.rank() != 2 || kv.dim(1) % num_heads != 0) {
        throw ShapeError(fmt::format("cache quantize: {} does not split into {} heads",
                                     shape_str(kv.shape()), num_heads));
    }
    kv.check_finite("quantize_cache_entry");
    QuantizedKV q;
    q.rows = kv.dim(0);
    q.num_heads = num_heads;
    q.head_dim = kv.dim(1) / num_heads;
    q.codes.resize(static_cast<size_t>(kv.numel()));
    q.scales.resize(static_cast<size_t>(q.rows * num_heads));
    for (int64_t r = 0; r < q.rows; ++r) {
        for (int64_t h = 0; h < num_heads; ++h) {
            double absmax = 0.0;
            for (int64_t i = 0; i < q.head_dim; ++i) {
                absmax = std::max(absmax, std::fabs(kv.at2(r, h * q.head_dim + i)));
            }
            const float scale = static_cast<float>(absmax / 127.0);
            q.scales[static_cast<size_t>(r * num_heads + h)] = scale;
            for (int64_t i = 0; i < q.head_dim; ++i) {
                const int64_t flat = r * kv.dim(1) + h * q.head_dim + i;
                double code = 0.0;
                if (scale > 0.0f) {
                    code = std::nearbyint(kv.get(flat) / static_cast<double>(scale));
                    code = std::min(127.0, std::max(-127.0, code));
                }
                q.codes[static_cast<size_t>(flat)] = static_cast<int8_t>(code);
            }
        }
    }
    return q;
}

Tensor dequantize_cache_entry(const QuantizedKV& q) {
    Tensor out({q.rows, q.num_heads * q.head_dim}, DType::f32);
    for (int64_t r = 0; r < q.rows; ++r) {
        for (int64_t h = 0; h < q.num_heads; ++h) {
            const float scale = q.scales[static_cast<size_t>(r * q.num_heads + h)];
            for (int64_t i = 0; i < q.head_dim; ++i) {
                const int64_t flat = r * q.num_heads * q.head_dim + h * q.head_dim + i;
                out.set(flat, static_cast<double>(q.codes[static_cast<size_t>(flat)]) * scale);
            }
        }
    }
    return out;
}

KVCacheStore::KVCacheStore(int64_t total_layers, bool quantized, int64_t num_heads)
    : quantized_(quantized), num_heads_(num_heads) {
    if (total_layers < 1) throw ShapeError("cache needs at least one layer");
    owner_.resize(static_cast<size_t>(total_layers));
    for (int64_t i = 0; i < total_layers; ++i) owner_[static_cast<size_t>(i)] = i;
    slots_.resize(owner_.size());
    owned_count_ = total_layers;
}

KVCacheStore::KVCacheStore(const BlockSplit& split, SharePolicy policy, bool quantized,
                           int64_t num_heads)
    : quantized_(quantized), num_heads_(num_heads) {
    const auto map = build_share_map(split, policy);
    owner_.resize(static_cast<size_t>(split.total_layers));
    for (int64_t i = 0; i < split.block1_layers; ++i) owner_[static_cast<size_t>(i)] = i;
    for (int64_t j = 0; j < split.block2_layers; ++j) {
        owner_[static_cast<size_t>(split.block1_layers + j)] = map[static_cast<size_t>(j)];
    }
    slots_.resize(owner_.size());
    owned_count_ = split.block1_layers;
}

KVCacheStore::KVCacheStore(std::vector<int64_t> owner, bool quantized, int64_t num_heads)
    : owner_(std::move(owner)), quantized_(quantized), num_heads_(num_heads) {
    if (owner_.empty()) throw ShapeError("cache needs at least one layer");
    const auto n = static_cast<int64_t>(owner_.size());
    owned_count_ = 0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t o = owner_[static_cast<size_t>(i)];
        if (o < 0 || o >= n || owner_[static_cast<size_t>(o)] != o) {
            throw ShapeError(fmt::format("layer {} names {} as owner, which is not an owner", i, o));
        }
        if (o == i) ++owned_count_;
    }
    slots_.resize(owner_.size());
}

int64_t KVCacheStore::owner_of(int64_t layer) const {
    if (layer < 0 || layer >= total_layers()) {
        throw ShapeError(fmt::format("cache layer {} outside [0, {})", layer, total_layers()));
    }
    return owner_[static_cast<size_t>(layer)];
}

void KVCacheStore::append(int64_t layer, const Tensor& k_rows, const Tensor& v_rows) {
    if (!owns(layer)) {
        throw std::logic_error(fmt::format("cache append from non-owner layer {} (owner {})", layer,
                                           owner_of(layer)));
    }
    if (k_rows.rank() != 2 || k_rows.shape() != v_rows.shape()) {
        throw ShapeError("cache append: k/v rows must be matching rank-2 tensors");
    }
    Slot& slot = slots_[static_cast<size_t>(layer)];
    if (quantized_) {
        slot.k_q.push_back(quantize_cache_entry(k_rows, num_heads_));
        slot.v_q.push_back(quantize_cache_entry(v_rows, num_heads_));
    } else {
        slot.k_rows.push_back(k_rows);
        slot.v_rows.push_back(v_rows);
    }
    ++writes_;
    if (layer == 0) length_ += k_rows.dim(0);
}

std::pair<Tensor, Tensor> KVCacheStore::read(int64_t layer) {
    const int64_t src = owner_of(layer);
    const Slot& slot = slots_[static_cast<size_t>(src)];
    ++reads_;
    std::vector<Tensor> ks, vs;
    if (quantized_) {
        for (const auto& q : slot.k_q) ks.push_back(dequantize_cache_entry(q));
        for (const auto& q : slot.v_q) vs.push_back(dequantize_cache_entry(q));
    } else {
        ks = slot.k_rows;
        vs = slot.v_rows;
    }
    if (ks.empty()) throw std::logic_error(fmt::format("cache read from empty layer {}", layer));
    return {ops::concat_rows(ks), ops::concat_rows(vs)};
}

int64_t KVCacheStore::bytes_unquantized(int64_t value_width_bytes) const {
    int64_t width = 0;
    for (const Slot& s : slots_) {
        if (!s.k_rows.empty()) {
            width = s.k_rows.front().dim(1);
            break;
        }
        if (!s.k_q.empty()) {
            width = s.k_q.front().num_heads * s.k_q.front().head_dim;
            break;
        }
    }
    return owned_count_ * length_ * 2 * width * value_width_bytes;
}

nlohmann::ordered_json KVCacheStore::memory_record(int64_t value_width_bytes) const {
    nlohmann::ordered_json rec;
    rec["layers"] = total_layers();
    rec["owned_layers"] = owned_count_;
    rec["bytes"] = bytes_unquantized(value_width_bytes);
    rec["saved_fraction"] =
        static_cast<double>(total_layers() - owned_count_) / static_cast<double>(total_layers());
    return rec;
}

}  // namespace ptml
