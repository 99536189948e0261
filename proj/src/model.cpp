// SPDX-License-Identifier: Apache-2.0
#include "ptml/model.hpp"

#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace ptml {

SyncAccount count_sync_points(Parallelism mode, int64_t total_layers, int64_t block_depth) {
    if (total_layers < 1) throw ShapeError("sync accounting needs at least one layer");
    SyncAccount acc;
    acc.parallelism = mode;
    acc.total_layers = total_layers;
    acc.block_depth = block_depth;
    if (mode == Parallelism::tensor) {
        acc.sync_points = 2 * total_layers;
    } else {
        if (block_depth < 1 || total_layers % block_depth != 0) {
            throw ShapeError(fmt::format("block depth {} must divide layer count {}", block_depth,
                                         total_layers));
        }
        acc.sync_points = total_layers / block_depth;
    }
    acc.reduction_vs_tensor =
        1.0 - static_cast<double>(acc.sync_points) / static_cast<double>(2 * total_layers);
    return acc;
}

void PTModelConfig::validate() const {
    if (tracks < 1) throw ShapeError("tracks must be >= 1");
    if (track_block_depth < 1 || total_layers < 1 || total_layers % track_block_depth != 0) {
        throw ShapeError(fmt::format("block depth {} must divide layer count {}", track_block_depth,
                                     total_layers));
    }
    if (heads < 1 || head_dim < 1 || heads * head_dim != model_dim) {
        throw ShapeError(fmt::format("heads {} x head_dim {} must equal model_dim {}", heads,
                                     head_dim, model_dim));
    }
    if (vocab < 2) throw ShapeError("vocab must be >= 2");
    if (ffn_hidden < 1) throw ShapeError("ffn_hidden must be >= 1");
    if (window < 1) throw ShapeError("window must be >= 1");
    if (rope_base <= 1.0) throw ShapeError("rope_base must exceed 1");
    InterleavePattern::parse(attention_unit);
    if (boundary == BoundaryCombine::concat_permute) {
        if (model_dim % tracks != 0 || heads % tracks != 0) {
            throw ShapeError(fmt::format(
                "concat_permute needs tracks {} to divide model_dim {} and heads {}", tracks,
                model_dim, heads));
        }
    }
    if (head_dim % 2 != 0) throw ShapeError("head_dim must be even for rotary pairs");
    if (kv_quant_bits != 0 && kv_quant_bits != 8) {
        throw ShapeError(fmt::format("kv_quant_bits {} unsupported (0 or 8)", kv_quant_bits));
    }
    if (kv_sharing) split().validate();
    if (moe_enabled) moe.validate();
    for (int64_t i = 0; i < total_layers; ++i) layer_attention(i).validate();
}

AttentionLayerSpec PTModelConfig::layer_attention(int64_t layer) const {
    AttentionLayerSpec spec;
    spec.kind = InterleavePattern::parse(attention_unit).is_global(layer) ? AttnKind::global
                                                                          : AttnKind::local;
    spec.window = window;
    spec.num_heads = track_heads();
    spec.head_dim = head_dim;
    spec.rope_base = rope_base;
    spec.has_kv_projection = !layer_in_block2(layer);
    return spec;
}

namespace {

SharePolicy share_policy_from_str(const std::string& s) {
    if (s == "tail_aligned") return SharePolicy::tail_aligned;
    if (s == "modulo") return SharePolicy::modulo;
    throw FormatError(fmt::format("unknown kv_share_policy `{}`", s));
}

const char* share_policy_str(SharePolicy p) {
    return p == SharePolicy::tail_aligned ? "tail_aligned" : "modulo";
}

BoundaryCombine boundary_from_str(const std::string& s) {
    if (s == "mean_broadcast") return BoundaryCombine::mean_broadcast;
    if (s == "concat_permute") return BoundaryCombine::concat_permute;
    throw FormatError(fmt::format("unknown boundary_combine `{}`", s));
}

const char* boundary_str(BoundaryCombine b) {
    return b == BoundaryCombine::mean_broadcast ? "mean_broadcast" : "concat_permute";
}

}  // namespace

PTModelConfig PTModelConfig::from_kv(const cfg::KvMap& kv) {
    static const std::set<std::string> known = {
        "tracks",          "track_block_depth", "total_layers",
        "model_dim",       "heads",             "head_dim",
        "vocab",           "ffn_hidden",        "attention_unit",
        "window",          "rope_base",         "moe_enabled",
        "moe_experts",     "moe_top_k",         "moe_hidden",
        "moe_every_other_layer",                "moe_load_balance_coeff",
        "kv_sharing",      "kv_block1_fraction", "kv_share_policy",
        "kv_quant_bits",   "boundary_combine",
    };
    for (const auto& [key, value] : kv) {
        (void)value;
        if (!known.count(key)) throw FormatError(fmt::format("unknown model config key `{}`", key));
    }
    PTModelConfig c;
    c.tracks = cfg::kv_int(kv, "tracks", c.tracks);
    c.track_block_depth = cfg::kv_int(kv, "track_block_depth", c.track_block_depth);
    c.total_layers = cfg::kv_int(kv, "total_layers", c.total_layers);
    c.model_dim = cfg::kv_int(kv, "model_dim", c.model_dim);
    c.heads = cfg::kv_int(kv, "heads", c.heads);
    c.head_dim = cfg::kv_int(kv, "head_dim", c.head_dim);
    c.vocab = cfg::kv_int(kv, "vocab", c.vocab);
    c.ffn_hidden = cfg::kv_int(kv, "ffn_hidden", c.ffn_hidden);
    c.attention_unit = cfg::kv_str(kv, "attention_unit", c.attention_unit);
    c.window = cfg::kv_int(kv, "window", c.window);
    c.rope_base = cfg::kv_real(kv, "rope_base", c.rope_base);
    c.moe_enabled = cfg::kv_bool(kv, "moe_enabled", c.moe_enabled);
    c.moe.num_experts = cfg::kv_int(kv, "moe_experts", c.moe.num_experts);
    c.moe.top_k = cfg::kv_int(kv, "moe_top_k", c.moe.top_k);
    c.moe.expert_hidden = cfg::kv_int(kv, "moe_hidden", c.moe.expert_hidden);
    c.moe.every_other_layer = cfg::kv_bool(kv, "moe_every_other_layer", c.moe.every_other_layer);
    c.moe.load_balance_coeff =
        cfg::kv_real(kv, "moe_load_balance_coeff", c.moe.load_balance_coeff);
    c.kv_sharing = cfg::kv_bool(kv, "kv_sharing", c.kv_sharing);
    c.kv_block1_fraction = cfg::kv_real(kv, "kv_block1_fraction", c.kv_block1_fraction);
    c.kv_share_policy =
        share_policy_from_str(cfg::kv_str(kv, "kv_share_policy", share_policy_str(c.kv_share_policy)));
    c.kv_quant_bits = cfg::kv_int(kv, "kv_quant_bits", c.kv_quant_bits);
    c.boundary = boundary_from_str(cfg::kv_str(kv, "boundary_combine", boundary_str(c.boundary)));
    c.validate();
    return c;
}

cfg::KvMap PTModelConfig::to_kv() const {
    cfg::KvMap kv;
    kv["tracks"] = fmt::format("{}", tracks);
    kv["track_block_depth"] = fmt::format("{}", track_block_depth);
    kv["total_layers"] = fmt::format("{}", total_layers);
    kv["model_dim"] = fmt::format("{}", model_dim);
    kv["heads"] = fmt::format("{}", heads);
    kv["head_dim"] = fmt::format("{}", head_dim);
    kv["vocab"] = fmt::format("{}", vocab);
    kv["ffn_hidden"] = fmt::format("{}", ffn_hidden);
    kv["attention_unit"] = attention_unit;
    kv["window"] = fmt::format("{}", window);
    kv["rope_base"] = fmt::format("{}", rope_base);
    kv["moe_enabled"] = moe_enabled ? "true" : "false";
    kv["moe_experts"] = fmt::format("{}", moe.num_experts);
    kv["moe_top_k"] = fmt::format("{}", moe.top_k);
    kv["moe_hidden"] = fmt::format("{}", moe.expert_hidden);
    kv["moe_every_other_layer"] = moe.every_other_layer ? "true" : "false";
    kv["moe_load_balance_coeff"] = fmt::format("{}", moe.load_balance_coeff);
    kv["kv_sharing"] = kv_sharing ? "true" : "false";
    kv["kv_block1_fraction"] = fmt::format("{}", kv_block1_fraction);
    kv["kv_share_policy"] = share_policy_str(kv_share_policy);
    kv["kv_quant_bits"] = fmt::format("{}", kv_quant_bits);
    kv["boundary_combine"] = boundary_str(boundary);
    return kv;
}

PTModelConfig PTModelConfig::profile(const std::string& name) {
    PTModelConfig c;  // defaults describe the single-track device shape
    if (name == "on_device") {
        c.kv_sharing = true;
        return c;
    }
    if (name == "server") {
        c.tracks = 2;
        c.track_block_depth = 2;
        c.total_layers = 8;
        c.moe_enabled = true;
        c.kv_sharing = false;
        return c;
    }
    throw UsageError(fmt::format("unknown profile `{}` (expected on_device or server)", name));
}

PTModel PTModel::init(const PTModelConfig& cfg, Rng& rng) {
    cfg.validate();
    PTModel m;
    m.cfg = cfg;
    auto weight = [&](const std::string& name, int64_t rows, int64_t cols) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(cols));
        m.params[name] = Tensor::gaussian({rows, cols}, rng, 0.0, stddev);
    };
    auto gain = [&](const std::string& name, int64_t n) { m.params[name] = Tensor::ones({n}); };

    weight("embed", cfg.vocab, cfg.model_dim);
    weight("unembed", cfg.vocab, cfg.model_dim);
    gain("final_norm.gain", cfg.model_dim);

    const int64_t w = cfg.track_width();
    for (int64_t tr = 0; tr < cfg.tracks; ++tr) {
        for (int64_t i = 0; i < cfg.total_layers; ++i) {
            const std::string pfx = fmt::format("t{}.l{}.", tr, i);
            gain(pfx + "ln1.gain", w);
            weight(pfx + "attn.wq", w, w);
            if (!cfg.layer_in_block2(i)) {
                weight(pfx + "attn.wk", w, w);
                weight(pfx + "attn.wv", w, w);
            }
            weight(pfx + "attn.wo", w, w);
            gain(pfx + "ln2.gain", w);
            if (cfg.layer_is_moe(i)) {
                weight(pfx + "moe.router", cfg.moe.num_experts, w);
                for (int64_t e = 0; e < cfg.moe.num_experts; ++e) {
                    const std::string ep = fmt::format("{}moe.e{}.", pfx, e);
                    weight(ep + "wg", cfg.moe.expert_hidden, w);
                    weight(ep + "wi", cfg.moe.expert_hidden, w);
                    weight(ep + "wo", w, cfg.moe.expert_hidden);
                }
            } else {
                weight(pfx + "ffn.wg", cfg.ffn_hidden, w);
                weight(pfx + "ffn.wi", cfg.ffn_hidden, w);
                weight(pfx + "ffn.wo", w, cfg.ffn_hidden);
            }
        }
    }
    return m;
}

ParamBinder::ParamBinder(Tape& tape, PTModel& model, bool trainable)
    : tape_(&tape), model_(&model), trainable_(trainable) {}

Value ParamBinder::param(const std::string& name) {
    auto hit = cache_.find(name);
    if (hit != cache_.end()) return hit->second;
    auto it = model_->params.find(name);
    if (it == model_->params.end()) {
        throw std::logic_error(fmt::format("model has no parameter `{}`", name));
    }
    Value v = tape_->leaf(it->second, trainable_);
    cache_.emplace(name, v);
    return v;
}

Value ParamBinder::linear(const std::string& name, Value x) {
    return tape_->matmul(x, tape_->transpose(weight(name)));
}

std::vector<std::string> ParamBinder::bound_names() const {
    std::vector<std::string> names;
    names.reserve(cache_.size());
    for (const auto& [name, v] : cache_) {
        (void)v;
        names.push_back(name);
    }
    return names;
}

std::vector<Value> boundary_combine(Tape& t, std::vector<Value> track_states,
                                    BoundaryCombine strategy) {
    const auto n = static_cast<int64_t>(track_states.size());
    if (n == 0) throw ShapeError("boundary combine needs at least one track state");
    const Shape shape0 = t.value(track_states[0]).shape();
    for (const Value& v : track_states) {
        if (t.value(v).shape() != shape0) throw ShapeError("track states disagree on shape");
    }
    if (n == 1) return track_states;
    if (strategy == BoundaryCombine::mean_broadcast) {
        Value acc = track_states[0];
        for (int64_t i = 1; i < n; ++i) acc = t.add(acc, track_states[static_cast<size_t>(i)]);
        Value mean = t.mul_scalar(acc, 1.0 / static_cast<double>(n));
        return std::vector<Value>(static_cast<size_t>(n), mean);
    }
    // concat_permute: glue slices in slot order, hand each track its
    // neighbor's slice (rotation by one)
    Value full = t.concat_cols(track_states);
    const int64_t w = shape0[1];
    std::vector<Value> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t src = (i + 1) % n;
        out.push_back(t.slice_cols(full, src * w, (src + 1) * w));
    }
    return out;
}

PTForward::PTForward(ParamBinder& binder) : b_(binder), cfg_(binder.model().cfg) {
    cfg_.validate();
}

Value PTForward::embed_tokens(std::span<const int64_t> tokens) {
    if (tokens.empty()) throw ShapeError("empty token sequence");
    std::vector<int64_t> idx(tokens.begin(), tokens.end());
    for (int64_t id : idx) {
        if (id < 0 || id >= cfg_.vocab) {
            throw ShapeError(fmt::format("token {} outside vocab [0, {})", id, cfg_.vocab));
        }
    }
    return b_.tape().gather_rows(b_.weight("embed"), std::move(idx));
}

namespace {

std::vector<Value> split_tracks(Tape& t, const PTModelConfig& cfg, Value h) {
    if (cfg.boundary == BoundaryCombine::concat_permute && cfg.tracks > 1) {
        const int64_t w = cfg.track_width();
        std::vector<Value> st;
        st.reserve(static_cast<size_t>(cfg.tracks));
        for (int64_t tr = 0; tr < cfg.tracks; ++tr) {
            st.push_back(t.slice_cols(h, tr * w, (tr + 1) * w));
        }
        return st;
    }
    return std::vector<Value>(static_cast<size_t>(cfg.tracks), h);
}

}  // namespace

void PTForward::run_layer(int64_t layer, LayerIO io) {
    Tape& t = b_.tape();
    const AttentionLayerSpec spec = cfg_.layer_attention(layer);
    const bool shared_kv = cfg_.kv_sharing && cfg_.layer_in_block2(layer);
    int64_t owner = layer;
    if (shared_kv) {
        const BlockSplit split = cfg_.split();
        owner = build_share_map(split, cfg_.kv_share_policy)[static_cast<size_t>(
            layer - split.block1_layers)];
    }
    const int64_t nq = static_cast<int64_t>(io.pos_q->size());

    for (int64_t tr = 0; tr < cfg_.tracks; ++tr) {
        const std::string pfx = fmt::format("t{}.l{}.", tr, layer);
        Value x = (*io.states)[static_cast<size_t>(tr)];
        Value a_in = t.rmsnorm(x, b_.param(pfx + "ln1.gain"), 1e-6);
        Value q = b_.linear(pfx + "attn.wq", a_in);

        Value k, v;
        std::vector<int64_t> pos_k;
        if (io.cache != nullptr) {
            const int64_t slot = tr * cfg_.total_layers + layer;
            if (!shared_kv) {
                Value kp = b_.linear(pfx + "attn.wk", a_in);
                Value vp = b_.linear(pfx + "attn.wv", a_in);
                io.cache->append(slot, t.value(kp), t.value(vp));
                if (io.stats) io.stats->kv_writes++;
            }
            auto [kc, vc] = io.cache->read(slot);
            if (io.stats) io.stats->kv_reads++;
            pos_k.resize(static_cast<size_t>(kc.dim(0)));
            std::iota(pos_k.begin(), pos_k.end(), 0);
            k = t.constant(std::move(kc));
            v = t.constant(std::move(vc));
        } else {
            if (!shared_kv) {
                k = b_.linear(pfx + "attn.wk", a_in);
                v = b_.linear(pfx + "attn.wv", a_in);
                if (cfg_.kv_sharing) train_kv_[{tr, layer}] = {k, v};
            } else {
                auto it = train_kv_.find({tr, owner});
                if (it == train_kv_.end()) {
                    throw std::logic_error(
                        fmt::format("layer {} reads k/v of layer {} before it ran", layer, owner));
                }
                k = it->second.first;
                v = it->second.second;
            }
            pos_k = *io.pos_q;
        }

        Value att = attend(t, spec, q, k, v, *io.pos_q, std::move(pos_k));
        x = t.add(x, b_.linear(pfx + "attn.wo", att));

        Value f_in = t.rmsnorm(x, b_.param(pfx + "ln2.gain"), 1e-6);
        Value ffn_out;
        if (cfg_.layer_is_moe(layer)) {
            Value router_logits = b_.linear(pfx + "moe.router", f_in);
            std::vector<ExpertParams> experts;
            experts.reserve(static_cast<size_t>(cfg_.moe.num_experts));
            for (int64_t e = 0; e < cfg_.moe.num_experts; ++e) {
                const std::string ep = fmt::format("{}moe.e{}.", pfx, e);
                experts.push_back({b_.weight(ep + "wg"), b_.weight(ep + "wi"),
                                   b_.weight(ep + "wo")});
            }
            RoutingDecision decision;
            ffn_out = moe_forward(t, f_in, router_logits, experts, cfg_.moe.top_k, &decision);
            if (io.cache == nullptr) {
                balance_terms_.push_back(load_balance_value(t, router_logits, decision));
            }
        } else {
            Value h = t.mul(t.silu(b_.linear(pfx + "ffn.wg", f_in)),
                            b_.linear(pfx + "ffn.wi", f_in));
            ffn_out = b_.linear(pfx + "ffn.wo", h);
        }
        (*io.states)[static_cast<size_t>(tr)] = t.add(x, ffn_out);
        if (io.stats) io.stats->layer_invocations += nq;
    }
}

Value PTForward::full_logits(std::span<const int64_t> tokens, ForwardStats* stats) {
    train_kv_.clear();
    balance_terms_.clear();
    Tape& t = b_.tape();
    Value h = embed_tokens(tokens);
    std::vector<int64_t> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<Value> st = split_tracks(t, cfg_, h);

    for (int64_t blk = 0; blk < cfg_.num_blocks(); ++blk) {
        for (int64_t j = 0; j < cfg_.track_block_depth; ++j) {
            run_layer(blk * cfg_.track_block_depth + j, {&st, &positions, nullptr, stats});
        }
        st = boundary_combine(t, std::move(st), cfg_.boundary);
        if (stats) stats->barriers++;
    }
    Value full = combine_to_full(std::move(st));
    full = t.rmsnorm(full, b_.param("final_norm.gain"), 1e-6);
    return b_.linear("unembed", full);
}

Tensor PTForward::prefill(std::span<const int64_t> tokens, KVCacheStore& cache,
                          ForwardStats* stats) {
    train_kv_.clear();
    if (cache.total_layers() != cfg_.tracks * cfg_.total_layers) {
        throw std::logic_error("cache layout does not match this model");
    }
    if (cache.length() != 0) throw std::logic_error("prefill expects an empty cache");
    Tape& t = b_.tape();
    const auto prompt = static_cast<int64_t>(tokens.size());
    Value h = embed_tokens(tokens);
    std::vector<int64_t> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<Value> st = split_tracks(t, cfg_, h);

    const int64_t first_shared =
        cfg_.kv_sharing ? cfg_.split().block1_layers : cfg_.total_layers;
    for (int64_t blk = 0; blk < cfg_.num_blocks(); ++blk) {
        for (int64_t j = 0; j < cfg_.track_block_depth; ++j) {
            const int64_t layer = blk * cfg_.track_block_depth + j;
            if (layer == first_shared && prompt > 1 && cfg_.kv_sharing) {
                // Block 2 only ever needs the final prompt position: its k/v
                // come from Block-1 caches, so earlier rows are dead weight
                for (Value& s : st) s = t.slice_rows(s, prompt - 1, prompt);
                positions.assign(1, prompt - 1);
                if (stats) {
                    stats->skipped_layer_invocations +=
                        (prompt - 1) * (cfg_.total_layers - first_shared) * cfg_.tracks;
                }
            }
            run_layer(layer, {&st, &positions, &cache, stats});
        }
        st = boundary_combine(t, std::move(st), cfg_.boundary);
        if (stats) stats->barriers++;
    }
    return finish_logits_last_row(std::move(st));
}

Tensor PTForward::decode_step(int64_t token, KVCacheStore& cache, ForwardStats* stats) {
    train_kv_.clear();
    if (cache.total_layers() != cfg_.tracks * cfg_.total_layers) {
        throw std::logic_error("cache layout does not match this model");
    }
    if (cache.length() == 0) throw std::logic_error("decode_step needs a prefilled cache");
    Tape& t = b_.tape();
    const int64_t pos = cache.length();
    Value h = embed_tokens(std::span<const int64_t>(&token, 1));
    std::vector<int64_t> positions{pos};
    std::vector<Value> st = split_tracks(t, cfg_, h);

    for (int64_t blk = 0; blk < cfg_.num_blocks(); ++blk) {
        for (int64_t j = 0; j < cfg_.track_block_depth; ++j) {
            run_layer(blk * cfg_.track_block_depth + j, {&st, &positions, &cache, stats});
        }
        st = boundary_combine(t, std::move(st), cfg_.boundary);
        if (stats) stats->barriers++;
    }
    return finish_logits_last_row(std::move(st));
}

KVCacheStore PTForward::make_cache() const {
    const int64_t layers = cfg_.total_layers;
    std::vector<int64_t> owner(static_cast<size_t>(cfg_.tracks * layers));
    if (cfg_.kv_sharing) {
        const BlockSplit split = cfg_.split();
        const auto map = build_share_map(split, cfg_.kv_share_policy);
        for (int64_t tr = 0; tr < cfg_.tracks; ++tr) {
            for (int64_t i = 0; i < layers; ++i) {
                const int64_t local =
                    i < split.block1_layers ? i : map[static_cast<size_t>(i - split.block1_layers)];
                owner[static_cast<size_t>(tr * layers + i)] = tr * layers + local;
            }
        }
    } else {
        std::iota(owner.begin(), owner.end(), 0);
    }
    return KVCacheStore(std::move(owner), cfg_.kv_quant_bits == 8, cfg_.track_heads());
}

Value PTForward::combine_to_full(std::vector<Value> states) {
    if (states.size() == 1) return states[0];
    if (cfg_.boundary == BoundaryCombine::mean_broadcast) return states[0];
    return b_.tape().concat_cols(states);
}

Tensor PTForward::finish_logits_last_row(std::vector<Value> states) {
    Tape& t = b_.tape();
    Value full = combine_to_full(std::move(states));
    const int64_t rows = t.value(full).dim(0);
    if (rows > 1) full = t.slice_rows(full, rows - 1, rows);
    full = t.rmsnorm(full, b_.param("final_norm.gain"), 1e-6);
    return t.value(b_.linear("unembed", full));
}

}  // namespace ptml
