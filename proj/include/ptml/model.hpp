// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ptml/attention.hpp"
#include "ptml/config.hpp"
#include "ptml/io.hpp"
#include "ptml/kvcache.hpp"
#include "ptml/moe.hpp"
#include "ptml/rng.hpp"
#include "ptml/tape.hpp"

namespace ptml {

enum class BoundaryCombine : uint8_t { mean_broadcast, concat_permute };
enum class Parallelism : uint8_t { tensor, track };

struct SyncAccount {
    Parallelism parallelism;
    int64_t total_layers = 0;
    int64_t block_depth = 1;
    int64_t sync_points = 0;
    double reduction_vs_tensor = 0.0;  // 1 − sync_points / (2·total_layers)
};

// tensor parallelism: 2 sync points per layer. track parallelism: one per
// track-block boundary, total_layers / block_depth.
SyncAccount count_sync_points(Parallelism mode, int64_t total_layers, int64_t block_depth);

struct PTModelConfig {
    int64_t tracks = 1;
    int64_t track_block_depth = 4;
    int64_t total_layers = 16;
    int64_t model_dim = 32;
    int64_t heads = 4;
    int64_t head_dim = 8;
    int64_t vocab = 64;
    int64_t ffn_hidden = 64;
    std::string attention_unit = "LLLG";
    int64_t window = 8;        // desk-scale default; production uses 4096
    double rope_base = 10000.0;
    bool moe_enabled = false;
    MoEConfig moe;
    bool kv_sharing = false;
    double kv_block1_fraction = 0.625;
    SharePolicy kv_share_policy = SharePolicy::tail_aligned;
    int64_t kv_quant_bits = 0;  // 0 (off) or 8
    BoundaryCombine boundary = BoundaryCombine::mean_broadcast;

    void validate() const;
    int64_t num_blocks() const { return total_layers / track_block_depth; }
    int64_t track_width() const {
        return boundary == BoundaryCombine::concat_permute ? model_dim / tracks : model_dim;
    }
    int64_t track_heads() const {
        return boundary == BoundaryCombine::concat_permute ? heads / tracks : heads;
    }
    BlockSplit split() const { return BlockSplit::from_fraction(total_layers, kv_block1_fraction); }
    bool layer_in_block2(int64_t layer) const {
        return kv_sharing && layer >= split().block1_layers;
    }
    bool layer_is_moe(int64_t layer) const {
        return moe_enabled && (!moe.every_other_layer || layer % 2 == 1);
    }
    AttentionLayerSpec layer_attention(int64_t layer) const;

    static PTModelConfig from_kv(const cfg::KvMap& kv);
    cfg::KvMap to_kv() const;
    static PTModelConfig profile(const std::string& name);  // on_device | server
};

struct PTModel {
    PTModelConfig cfg;
    io::TensorMap params;
    static PTModel init(const PTModelConfig& cfg, Rng& rng);
    uint64_t content_hash() const { return io::content_hash(params); }
};

// Binds model parameters onto a tape. Subclasses swap in alternative weight
// behaviors (fake-quantized, compressed + adapter) without touching the
// forward code.
class ParamBinder {
  public:
    ParamBinder(Tape& tape, PTModel& model, bool trainable);
    virtual ~ParamBinder() = default;

    Tape& tape() { return *tape_; }
    PTModel& model() { return *model_; }

    Value param(const std::string& name);  // raw parameter leaf, cached per binder
    virtual Value weight(const std::string& name) { return param(name); }
    virtual Value linear(const std::string& name, Value x);  // x · W(name)ᵀ
    std::vector<std::string> bound_names() const;

  protected:
    Tape* tape_;
    PTModel* model_;
    bool trainable_;
    std::map<std::string, Value> cache_;
};

struct ForwardStats {
    int64_t barriers = 0;
    int64_t layer_invocations = 0;          // one per (layer, track, position)
    int64_t skipped_layer_invocations = 0;  // prefill bypass accounting
    int64_t kv_writes = 0;
    int64_t kv_reads = 0;
};

// Boundary synchronization between track states. mean_broadcast averages
// full-width states; concat_permute rotates width-d/T slices by one slot.
std::vector<Value> boundary_combine(Tape& t, std::vector<Value> track_states,
                                    BoundaryCombine strategy);

class PTForward {
  public:
    explicit PTForward(ParamBinder& binder);

    // Training path: every position, logits [seq × vocab]. KV sharing reuses
    // Block-1 projections; nothing is skipped.
    Value full_logits(std::span<const int64_t> tokens, ForwardStats* stats = nullptr);

    // Routing balance terms from the most recent full_logits call, one per
    // (track, expert layer). The trainer folds these into its loss when a
    // balance coefficient is set.
    const std::vector<Value>& balance_terms() const { return balance_terms_; }

    // Inference: last-position logits [1 × vocab]; fills the cache. With
    // sharing, Block 2 runs only for the final prompt position.
    Tensor prefill(std::span<const int64_t> tokens, KVCacheStore& cache,
                   ForwardStats* stats = nullptr);
    Tensor decode_step(int64_t token, KVCacheStore& cache, ForwardStats* stats = nullptr);

    KVCacheStore make_cache() const;

  private:
    struct LayerIO {
        std::vector<Value>* states;          // per track
        const std::vector<int64_t>* pos_q;
        KVCacheStore* cache;                 // null on the training path
        ForwardStats* stats;
    };
    void run_layer(int64_t layer, LayerIO io);
    Value embed_tokens(std::span<const int64_t> tokens);
    Tensor finish_logits_last_row(std::vector<Value> states);
    Value combine_to_full(std::vector<Value> states);

    ParamBinder& b_;
    const PTModelConfig& cfg_;
    // training-path raw K/V per (track, block-1 layer) for sharing
    std::map<std::pair<int64_t, int64_t>, std::pair<Value, Value>> train_kv_;
    std::vector<Value> balance_terms_;
};

}  // namespace ptml
