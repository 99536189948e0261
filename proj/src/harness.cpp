// SPDX-License-Identifier: Apache-2.0
#include "ptml/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "ptml/attention.hpp"
#include "ptml/blockcodec.hpp"
#include "ptml/datasets.hpp"
#include "ptml/errors.hpp"
#include "ptml/kvcache.hpp"
#include "ptml/moe.hpp"
#include "ptml/qat.hpp"
#include "ptml/train.hpp"

namespace fs = std::filesystem;

namespace ptml {

namespace {

const std::set<std::string> kRunKeys = {
    "profile", "seed",      "steps",        "batch",       "lr",   "dataset", "dataset_size",
    "seq_len", "level_set", "embed_group",  "rank",        "alpha", "out",
};

std::string fmt_real(double v) { return fmt::format("{}", v); }

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
    cfg::KvMap kv = cfg::parse_kv_text(text);
    cfg::KvMap model_kv;
    for (const auto& [key, value] : kv) {
        if (key.rfind("model.", 0) == 0) {
            model_kv[key.substr(6)] = value;
        } else if (!kRunKeys.count(key)) {
            throw UsageError(fmt::format("unknown config key `{}`", key));
        }
    }

    ExperimentConfig c;
    c.profile = cfg::kv_str(kv, "profile", c.profile);
    PTModelConfig base =
        c.profile == "custom" ? PTModelConfig{} : PTModelConfig::profile(c.profile);
    cfg::KvMap merged = base.to_kv();
    for (const auto& [key, value] : model_kv) merged[key] = value;
    try {
        c.model = PTModelConfig::from_kv(merged);
    } catch (const FormatError& e) {
        throw UsageError(e.what());
    }

    c.seed = static_cast<uint64_t>(cfg::kv_int(kv, "seed", static_cast<int64_t>(c.seed)));
    c.steps = cfg::kv_int(kv, "steps", c.steps);
    c.batch = cfg::kv_int(kv, "batch", c.batch);
    c.lr = cfg::kv_real(kv, "lr", c.lr);
    c.dataset = cfg::kv_str(kv, "dataset", c.dataset);
    c.dataset_size = cfg::kv_int(kv, "dataset_size", c.dataset_size);
    c.seq_len = cfg::kv_int(kv, "seq_len", c.seq_len);
    c.level_set = cfg::kv_str(kv, "level_set", c.level_set);
    c.embed_group = cfg::kv_int(kv, "embed_group", c.embed_group);
    c.rank = cfg::kv_int(kv, "rank", c.rank);
    c.alpha = cfg::kv_real(kv, "alpha", c.alpha);
    c.out = cfg::kv_str(kv, "out", c.out);

    if (c.dataset != "copy" && c.dataset != "modular_add" && c.dataset != "random_walk") {
        throw UsageError(fmt::format("unknown dataset `{}`", c.dataset));
    }
    level_set_from_str(c.level_set);  // throws on a bad name
    if (c.dataset_size < 1) throw UsageError("dataset_size must be positive");
    if (c.seq_len < 2) throw UsageError("seq_len must be at least 2");
    if (c.embed_group < 1) throw UsageError("embed_group must be positive");
    if (c.rank < 0) throw UsageError("rank must be nonnegative");
    if (c.out.empty()) throw UsageError("out directory must be set");
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::string text;
    try {
        text = io::read_text_file(path);
    } catch (const FormatError& e) {
        throw UsageError(e.what());
    }
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw UsageError(fmt::format("config file is empty: {}", path));
    }
    return parse(text);
}

std::string ExperimentConfig::serialize() const {
    cfg::KvMap kv;
    kv["profile"] = profile;
    kv["seed"] = fmt::format("{}", seed);
    kv["steps"] = fmt::format("{}", steps);
    kv["batch"] = fmt::format("{}", batch);
    kv["lr"] = fmt_real(lr);
    kv["dataset"] = dataset;
    kv["dataset_size"] = fmt::format("{}", dataset_size);
    kv["seq_len"] = fmt::format("{}", seq_len);
    kv["level_set"] = level_set;
    kv["embed_group"] = fmt::format("{}", embed_group);
    kv["rank"] = fmt::format("{}", rank);
    kv["alpha"] = fmt_real(alpha);
    kv["out"] = out;
    for (const auto& [key, value] : model.to_kv()) kv["model." + key] = value;
    return cfg::serialize_kv_text(kv);
}

uint64_t ExperimentConfig::config_hash() const { return io::fnv1a64_str(serialize()); }

// ---------------------------------------------------------------------------
// stage plumbing

namespace {

std::string join(const std::string& dir, const std::string& leaf) {
    return (fs::path(dir) / leaf).string();
}

TokenDataset stage_dataset(const ExperimentConfig& cfg) {
    Rng rng(cfg.seed + 1);
    return make_dataset(cfg.dataset, cfg.model.vocab, cfg.seq_len, cfg.dataset_size, rng);
}

TrainToyConfig stage_train_config(const ExperimentConfig& cfg) {
    TrainToyConfig tc;
    tc.steps = cfg.steps;
    tc.batch = cfg.batch;
    tc.lr = cfg.lr;
    tc.seed = cfg.seed;
    return tc;
}

void save_model_checkpoint(const std::string& dir, const PTModel& model) {
    io::ordered_json extra;
    io::ordered_json model_kv = io::ordered_json::object();
    for (const auto& [key, value] : model.cfg.to_kv()) model_kv[key] = value;
    extra["model_config"] = model_kv;
    io::save_checkpoint(dir, model.params, extra);
}

PTModel load_model_checkpoint(const std::string& dir, const std::string& produced_by,
                              std::string* hash_hex = nullptr) {
    if (!fs::exists(dir)) {
        throw UsageError(
            fmt::format("checkpoint not found: {} (run {} first)", dir, produced_by));
    }
    io::Checkpoint ck = io::load_checkpoint(dir);
    if (!ck.extra.contains("model_config")) {
        throw FormatError(fmt::format("checkpoint {} lacks model_config metadata", dir));
    }
    cfg::KvMap kv;
    for (const auto& [key, value] : ck.extra["model_config"].items()) {
        kv[key] = value.get<std::string>();
    }
    if (hash_hex) *hash_hex = ck.content_hash_hex;
    return PTModel{PTModelConfig::from_kv(kv), std::move(ck.tensors)};
}

io::ordered_json make_manifest(const char* stage, const ExperimentConfig& cfg,
                               io::ordered_json inputs, io::ordered_json outputs,
                               io::ordered_json metrics) {
    io::ordered_json m;
    m["stage"] = stage;
    m["config_hash"] = io::hex64(cfg.config_hash());
    m["seed"] = cfg.seed;
    m["inputs"] = std::move(inputs);
    m["outputs"] = std::move(outputs);
    m["metrics"] = std::move(metrics);
    return m;
}

void write_manifest(const ExperimentConfig& cfg, const std::string& leaf,
                    const io::ordered_json& manifest) {
    io::write_text_file(join(cfg.out, leaf), manifest.dump(2) + "\n");
}

io::ordered_json train_metrics(const TrainReport& rep) {
    io::ordered_json m;
    m["first_loss"] = rep.first_loss;
    m["final_loss"] = rep.final_loss;
    m["final_ema_loss"] = rep.final_ema_loss;
    m["spike_count"] = rep.spike_count;
    m["diverged"] = rep.diverged;
    return m;
}

}  // namespace

io::ordered_json run_train_toy(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out);
    Rng mrng(cfg.seed);
    PTModel model = PTModel::init(cfg.model, mrng);
    TokenDataset data = stage_dataset(cfg);
    TrainReport rep = train_toy(model, data, stage_train_config(cfg));

    save_model_checkpoint(join(cfg.out, "base"), model);
    io::ordered_json outputs;
    outputs["base"] = io::hex64(io::content_hash(model.params));
    io::ordered_json manifest = make_manifest("train-toy", cfg, io::ordered_json::object(),
                                              std::move(outputs), train_metrics(rep));
    write_manifest(cfg, "train_toy_manifest.json", manifest);
    return manifest;
}

io::ordered_json run_quantize(const ExperimentConfig& cfg) {
    std::string in_hash;
    PTModel model = load_model_checkpoint(join(cfg.out, "base"), "train-toy", &in_hash);
    if (cfg.model.model_dim % cfg.embed_group != 0) {
        throw UsageError(fmt::format("embed_group {} must divide model_dim {}", cfg.embed_group,
                                     cfg.model.model_dim));
    }

    TokenDataset data = stage_dataset(cfg);
    const QuantSpec spec = QuantSpec::make(level_set_from_str(cfg.level_set));
    QatTrainReport qrep = qat_train_toy(model, data, stage_train_config(cfg), spec);

    // realize the trained grid in the stored weights
    for (auto& [name, t] : model.params) {
        auto fit = qrep.f_store.find(name);
        if (fit != qrep.f_store.end()) t = fake_quant_tensor(t, spec, fit->second.get(0));
    }
    // embedding tables take the grouped 4-bit path instead
    for (const char* name : {"embed", "unembed"}) {
        auto it = model.params.find(name);
        if (it != model.params.end()) {
            it->second = dequantize_embedding(quantize_embedding(it->second, cfg.embed_group));
        }
    }

    save_model_checkpoint(join(cfg.out, "quantized"), model);
    io::ordered_json inputs;
    inputs["base"] = in_hash;
    io::ordered_json outputs;
    outputs["quantized"] = io::hex64(io::content_hash(model.params));
    io::ordered_json metrics = train_metrics(qrep.base);
    metrics["level_set"] = cfg.level_set;
    io::ordered_json manifest =
        make_manifest("quantize", cfg, std::move(inputs), std::move(outputs), std::move(metrics));
    write_manifest(cfg, "quantize_manifest.json", manifest);
    return manifest;
}

void save_compressed(const std::string& dir, const CompressedModel& cm) {
    fs::create_directories(dir);
    io::save_checkpoint(join(dir, "passthrough"), cm.passthrough);
    io::ordered_json meta;
    meta["format"] = "compressed-model";
    meta["version"] = 1;
    io::ordered_json model_kv = io::ordered_json::object();
    for (const auto& [key, value] : cm.cfg.to_kv()) model_kv[key] = value;
    meta["model_config"] = model_kv;
    meta["base_hash"] = io::hex64(cm.base_hash);
    io::ordered_json names = io::ordered_json::array();
    for (const auto& [name, mat] : cm.matrices) {
        names.push_back(name);
        io::write_file_bytes(join(dir, name + ".ptbc"), mat.serialize());
    }
    meta["matrices"] = names;
    io::write_text_file(join(dir, "meta.json"), meta.dump(2) + "\n");
}

CompressedModel load_compressed(const std::string& dir) {
    if (!fs::exists(join(dir, "meta.json"))) {
        throw UsageError(
            fmt::format("compressed model not found: {} (run compress first)", dir));
    }
    io::ordered_json meta = io::ordered_json::parse(io::read_text_file(join(dir, "meta.json")));
    if (meta.value("format", "") != "compressed-model") {
        throw FormatError(fmt::format("{}: not a compressed-model directory", dir));
    }
    CompressedModel cm;
    cfg::KvMap kv;
    for (const auto& [key, value] : meta["model_config"].items()) {
        kv[key] = value.get<std::string>();
    }
    cm.cfg = PTModelConfig::from_kv(kv);
    cm.base_hash = std::strtoull(meta["base_hash"].get<std::string>().c_str(), nullptr, 16);
    for (const auto& name : meta["matrices"]) {
        const std::string n = name.get<std::string>();
        auto bytes = io::read_file_bytes(join(dir, n + ".ptbc"));
        cm.matrices.emplace(n, CompressedBlockMatrix::deserialize(bytes));
    }
    cm.passthrough = io::load_checkpoint(join(dir, "passthrough")).tensors;
    return cm;
}

uint64_t compressed_artifact_hash(const std::string& dir) {
    uint64_t h = io::fnv1a64_str(io::read_text_file(join(dir, "meta.json")));
    io::ordered_json meta = io::ordered_json::parse(io::read_text_file(join(dir, "meta.json")));
    for (const auto& name : meta["matrices"]) {
        const std::string n = name.get<std::string>();
        h = io::fnv1a64_str(n, h);
        h = io::fnv1a64(io::read_file_bytes(join(dir, n + ".ptbc")), h);
    }
    h = io::fnv1a64_str(io::load_checkpoint(join(dir, "passthrough")).content_hash_hex, h);
    return h;
}

io::ordered_json run_compress(const ExperimentConfig& cfg) {
    // prefer the quantized checkpoint; fall back to the float base
    const bool have_quant = fs::exists(join(cfg.out, "quantized"));
    const std::string source = have_quant ? "quantized" : "base";
    std::string in_hash;
    PTModel model = load_model_checkpoint(join(cfg.out, source),
                                          have_quant ? "quantize" : "train-toy", &in_hash);

    CompressedModel cm = compress_model(model);
    const std::string dir = join(cfg.out, "compressed");
    save_compressed(dir, cm);

    int64_t blocks = 0;
    int64_t elems = 0;
    double worst = 0.0;
    for (const auto& [name, mat] : cm.matrices) {
        blocks += mat.block_count();
        elems += mat.rows() * mat.cols();
        worst = std::max(worst, mat.stats().max_abs_error);
    }
    io::ordered_json inputs;
    inputs[source] = in_hash;
    io::ordered_json outputs;
    outputs["compressed"] = io::hex64(compressed_artifact_hash(dir));
    io::ordered_json metrics;
    metrics["matrices"] = static_cast<int64_t>(cm.matrices.size());
    metrics["payload_bpw"] = static_cast<double>(blocks) * 128.0 / static_cast<double>(elems);
    metrics["total_bpw"] = static_cast<double>(blocks) * 144.0 / static_cast<double>(elems);
    metrics["max_abs_error"] = worst;
    io::ordered_json manifest =
        make_manifest("compress", cfg, std::move(inputs), std::move(outputs), std::move(metrics));
    write_manifest(cfg, "compress_manifest.json", manifest);
    return manifest;
}

io::ordered_json run_recover(const ExperimentConfig& cfg) {
    const std::string dir = join(cfg.out, "compressed");
    CompressedModel cm = load_compressed(dir);
    const std::string in_hash = io::hex64(compressed_artifact_hash(dir));

    PTModel base = materialize_compressed(cm);
    Rng arng(cfg.seed + 2);
    const double alpha = cfg.alpha < 0.0 ? static_cast<double>(cfg.rank) : cfg.alpha;
    ModelAdapters adapters = ModelAdapters::zero_init(cm, cfg.rank, alpha, arng);

    TokenDataset data = stage_dataset(cfg);
    TrainReport rep = recover_train_toy(base, adapters, data, stage_train_config(cfg));

    io::ordered_json extra;
    extra["rank"] = adapters.rank;
    extra["alpha"] = adapters.alpha;
    extra["base_hash"] = io::hex64(cm.base_hash);
    io::save_checkpoint(join(cfg.out, "adapters"), adapters.params, extra);

    io::ordered_json inputs;
    inputs["compressed"] = in_hash;
    io::ordered_json outputs;
    outputs["adapters"] = io::hex64(io::content_hash(adapters.params));
    io::ordered_json metrics = train_metrics(rep);
    metrics["rank"] = adapters.rank;
    io::ordered_json manifest =
        make_manifest("recover", cfg, std::move(inputs), std::move(outputs), std::move(metrics));
    write_manifest(cfg, "recover_manifest.json", manifest);
    return manifest;
}

// ---------------------------------------------------------------------------
// report

namespace {

// artifact name -> hash of what is on disk right now
std::string artifact_hash_now(const ExperimentConfig& cfg, const std::string& name) {
    if (name == "compressed") {
        return io::hex64(compressed_artifact_hash(join(cfg.out, "compressed")));
    }
    return io::load_checkpoint(join(cfg.out, name)).content_hash_hex;
}

}  // namespace

io::ordered_json run_report(const ExperimentConfig& cfg) {
    static const std::vector<std::pair<std::string, std::string>> kStages = {
        {"train-toy", "train_toy_manifest.json"},
        {"quantize", "quantize_manifest.json"},
        {"compress", "compress_manifest.json"},
        {"recover", "recover_manifest.json"},
    };
    // artifact -> hash recorded by the stage that produced it
    std::map<std::string, std::string> produced;
    io::ordered_json stages = io::ordered_json::array();
    bool all_ok = true;

    for (const auto& [stage, leaf] : kStages) {
        const std::string path = join(cfg.out, leaf);
        if (!fs::exists(path)) continue;
        io::ordered_json m = io::ordered_json::parse(io::read_text_file(path));
        io::ordered_json entry;
        entry["stage"] = stage;
        bool ok = true;
        std::vector<std::string> notes;

        for (const auto& [name, recorded] : m["inputs"].items()) {
            const std::string want = recorded.get<std::string>();
            auto it = produced.find(name);
            if (it == produced.end()) {
                ok = false;
                notes.push_back(fmt::format("input {} has no producing manifest", name));
            } else if (it->second != want) {
                ok = false;
                notes.push_back(fmt::format("input {} hash chain broken", name));
            }
        }
        for (const auto& [name, recorded] : m["outputs"].items()) {
            const std::string want = recorded.get<std::string>();
            std::string now;
            try {
                now = artifact_hash_now(cfg, name);
            } catch (const std::exception&) {
                now = "missing";
            }
            if (now != want) {
                ok = false;
                notes.push_back(fmt::format("output {} no longer matches its manifest", name));
            }
            produced[name] = want;
        }
        entry["ok"] = ok;
        entry["detail"] = notes.empty() ? "verified" : fmt::format("{}", fmt::join(notes, "; "));
        stages.push_back(entry);
        all_ok = all_ok && ok;
    }

    io::ordered_json report;
    report["config_hash"] = io::hex64(cfg.config_hash());
    report["stages"] = stages;
    report["provenance_ok"] = all_ok;
    fs::create_directories(cfg.out);
    io::write_text_file(join(cfg.out, "report.json"), report.dump(2) + "\n");
    return report;
}

// ---------------------------------------------------------------------------
// bench

namespace {

std::string percent1(double fraction) { return fmt::format("{:.1f}%", 100.0 * fraction); }
std::string percent2(double fraction) { return fmt::format("{:.2f}%", 100.0 * fraction); }

std::vector<std::pair<int64_t, int64_t>> sync_pairs(const ExperimentConfig& cfg) {
    std::vector<std::pair<int64_t, int64_t>> pairs = {
        {32, 4}, {16, 4}, {16, 2}, {8, 2}, {64, 8}};
    const std::pair<int64_t, int64_t> own{cfg.model.total_layers, cfg.model.track_block_depth};
    if (std::find(pairs.begin(), pairs.end(), own) == pairs.end()) pairs.push_back(own);
    return pairs;
}

constexpr int64_t kBenchPrefillPrompt = 128;
constexpr int64_t kBenchMatrixDim = 216;

}  // namespace

io::ordered_json bench_json(const ExperimentConfig& cfg) {
    io::ordered_json j;

    io::ordered_json sync = io::ordered_json::array();
    for (auto [l, d] : sync_pairs(cfg)) {
        SyncAccount tensor = count_sync_points(Parallelism::tensor, l, d);
        SyncAccount track = count_sync_points(Parallelism::track, l, d);
        io::ordered_json row;
        row["layers"] = l;
        row["block_depth"] = d;
        row["tensor_sync"] = tensor.sync_points;
        row["track_sync"] = track.sync_points;
        row["reduction"] = percent1(track.reduction_vs_tensor);
        sync.push_back(row);
    }
    j["sync"] = sync;

    {
        io::ordered_json kv;
        kv["total_layers"] = cfg.model.total_layers;
        kv["kv_sharing"] = cfg.model.kv_sharing;
        if (cfg.model.kv_sharing) {
            BlockSplit split = cfg.model.split();
            kv["block1_layers"] = split.block1_layers;
            kv["block2_layers"] = split.block2_layers;
            kv["memory_saving"] = percent1(split.saved_fraction());
        } else {
            kv["block1_layers"] = cfg.model.total_layers;
            kv["block2_layers"] = 0;
            kv["memory_saving"] = percent1(0.0);
        }
        j["kv"] = kv;
    }

    {
        io::ordered_json pf;
        pf["prompt"] = kBenchPrefillPrompt;
        if (cfg.model.kv_sharing) {
            BlockSplit split = cfg.model.split();
            PrefillFlopPlan plan = prefill_flop_plan(split, kBenchPrefillPrompt);
            pf["skipped_layer_invocations"] = plan.skipped_layer_invocations;
            pf["measured_saving"] = percent2(plan.saved_fraction);
            pf["stated_saving"] = percent1(split.saved_fraction());
        } else {
            pf["skipped_layer_invocations"] = 0;
            pf["measured_saving"] = percent2(0.0);
            pf["stated_saving"] = percent1(0.0);
        }
        j["prefill"] = pf;
    }

    {
        Rng rng(cfg.seed);
        Tensor w = Tensor::gaussian({kBenchMatrixDim, kBenchMatrixDim}, rng);
        auto mat = CompressedBlockMatrix::compress(w);
        const auto st = mat.stats();
        io::ordered_json bpw;
        bpw["matrix"] = fmt::format("{}x{}", kBenchMatrixDim, kBenchMatrixDim);
        bpw["payload_bpw"] = fmt::format("{:.2f}", st.payload_bpw);
        bpw["payload_bpw_raw"] = st.payload_bpw;
        bpw["total_bpw"] = fmt::format("{:.2f}", st.total_bpw);
        bpw["serialized_bytes"] = static_cast<int64_t>(mat.serialize().size());
        j["bpw"] = bpw;
    }
    return j;
}

std::string bench_csv(const ExperimentConfig& cfg) {
    io::ordered_json j = bench_json(cfg);
    std::string csv = "table,key,value\n";
    auto scalar = [](const io::ordered_json& v) {
        return v.is_string() ? v.get<std::string>() : v.dump();
    };
    for (const auto& row : j["sync"]) {
        const std::string tag =
            fmt::format("L{}_D{}", row["layers"].get<int64_t>(), row["block_depth"].get<int64_t>());
        for (const char* key : {"tensor_sync", "track_sync", "reduction"}) {
            csv += fmt::format("sync,{}.{},{}\n", tag, key, scalar(row[key]));
        }
    }
    for (const char* table : {"kv", "prefill", "bpw"}) {
        for (const auto& [key, value] : j[table].items()) {
            csv += fmt::format("{},{},{}\n", table, key, scalar(value));
        }
    }
    return csv;
}

void write_bench(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out);
    io::write_text_file(join(cfg.out, "bench.csv"), bench_csv(cfg));
    io::write_text_file(join(cfg.out, "bench.json"), bench_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// verify

namespace {

struct CheckSink {
    std::vector<io::ordered_json> lines;
    int64_t failed = 0;

    void run(const char* suite, const char* name,
             const std::function<std::pair<bool, std::string>()>& fn) {
        bool pass = false;
        std::string detail;
        try {
            auto [p, d] = fn();
            pass = p;
            detail = d;
        } catch (const std::exception& e) {
            pass = false;
            detail = e.what();
        }
        io::ordered_json line;
        line["suite"] = suite;
        line["name"] = name;
        line["pass"] = pass;
        line["detail"] = detail;
        lines.push_back(std::move(line));
        if (!pass) failed++;
    }
};

std::pair<bool, std::string> pass_if(bool ok, std::string detail) {
    return {ok, std::move(detail)};
}

}  // namespace

VerifyOutcome run_verify(const ExperimentConfig& cfg) {
    CheckSink sink;

    sink.run("config", "experiment kv round trip", [&] {
        ExperimentConfig back = ExperimentConfig::parse(cfg.serialize());
        return pass_if(back == cfg, fmt::format("hash {}", io::hex64(cfg.config_hash())));
    });
    sink.run("config", "model kv round trip", [&] {
        PTModelConfig back = PTModelConfig::from_kv(cfg.model.to_kv());
        return pass_if(cfg::serialize_kv_text(back.to_kv()) ==
                           cfg::serialize_kv_text(cfg.model.to_kv()),
                       "stable");
    });

    sink.run("tensor", "matmul against identity is exact", [] {
        Rng rng(3);
        Tensor a = Tensor::gaussian({5, 4}, rng);
        return pass_if(ops::bit_equal(ops::matmul(a, Tensor::identity(4)), a), "bit equal");
    });
    sink.run("tensor", "rng streams are reproducible", [] {
        Rng r1(9), r2(9);
        for (int i = 0; i < 8; ++i) {
            if (r1.gauss() != r2.gauss()) return pass_if(false, "streams diverged");
        }
        return pass_if(true, "8 draws identical");
    });

    sink.run("attention", "rotation preserves pair norms", [] {
        Rng rng(4);
        Tensor x = Tensor::gaussian({3, 8}, rng, 0.0, 1.0, DType::f64);
        std::vector<int64_t> pos{0, 5, 9};
        Tensor y = rope_apply(x, pos, 2, 4, 10000.0);
        double worst = 0.0;
        for (int64_t r = 0; r < 3; ++r) {
            for (int64_t p = 0; p < 4; ++p) {
                const double nx = x.at2(r, 2 * p) * x.at2(r, 2 * p) +
                                  x.at2(r, 2 * p + 1) * x.at2(r, 2 * p + 1);
                const double ny = y.at2(r, 2 * p) * y.at2(r, 2 * p) +
                                  y.at2(r, 2 * p + 1) * y.at2(r, 2 * p + 1);
                worst = std::max(worst, std::fabs(nx - ny));
            }
        }
        return pass_if(worst < 1e-12, fmt::format("max pair-norm drift {:.1e}", worst));
    });
    sink.run("attention", "local mask is the sliding window", [] {
        BoolMask m = local_attention_mask(6, 3);
        for (int64_t i = 0; i < 6; ++i) {
            for (int64_t j = 0; j < 6; ++j) {
                const bool want = j <= i && i - j < 3;
                if (m.at(i, j) != want) return pass_if(false, "window bounds violated");
            }
        }
        return pass_if(true, "0 <= gap < window everywhere");
    });

    sink.run("kvcache", "share map targets are owners", [] {
        BlockSplit split = BlockSplit::from_fraction(16);
        for (SharePolicy p : {SharePolicy::tail_aligned, SharePolicy::modulo}) {
            auto map = build_share_map(split, p);
            if (static_cast<int64_t>(map.size()) != split.block2_layers) {
                return pass_if(false, "wrong map size");
            }
            for (int64_t target : map) {
                if (target < 0 || target >= split.block1_layers) {
                    return pass_if(false, "target outside block 1");
                }
            }
        }
        return pass_if(true, "both policies in range");
    });
    sink.run("kvcache", "prefill plan matches the closed form", [] {
        BlockSplit split = BlockSplit::from_fraction(16);
        PrefillFlopPlan plan = prefill_flop_plan(split, 128);
        const int64_t want = 127 * split.block2_layers;
        const double frac = static_cast<double>(want) / (128.0 * 16.0);
        return pass_if(plan.skipped_layer_invocations == want &&
                           std::fabs(plan.saved_fraction - frac) < 1e-15,
                       fmt::format("skipped {} ({})", plan.skipped_layer_invocations,
                                   percent2(plan.saved_fraction)));
    });
    sink.run("kvcache", "cache entry quantization is bounded by half a step", [] {
        Rng rng(6);
        Tensor kv = Tensor::gaussian({4, 16}, rng);
        QuantizedKV q = quantize_cache_entry(kv, 2);
        Tensor back = dequantize_cache_entry(q);
        for (int64_t r = 0; r < 4; ++r) {
            for (int64_t c = 0; c < 16; ++c) {
                const float scale = q.scales[static_cast<size_t>(r * 2 + c / 8)];
                if (std::fabs(back.at2(r, c) - kv.at2(r, c)) > 0.5 * scale + 1e-6) {
                    return pass_if(false, "error above half a step");
                }
            }
        }
        return pass_if(true, "all entries within scale/2");
    });

    sink.run("moe", "grouped execution equals per-token routing", [] {
        Rng rng(8);
        Tape t(false);
        const int64_t dim = 6, hidden = 8, experts_n = 4, k = 2, tokens = 5;
        std::vector<ExpertParams> experts;
        for (int64_t e = 0; e < experts_n; ++e) {
            experts.push_back(
                {t.constant(Tensor::gaussian({hidden, dim}, rng, 0.0, 0.4, DType::f64)),
                 t.constant(Tensor::gaussian({hidden, dim}, rng, 0.0, 0.4, DType::f64)),
                 t.constant(Tensor::gaussian({dim, hidden}, rng, 0.0, 0.4, DType::f64))});
        }
        Tensor x = Tensor::gaussian({tokens, dim}, rng, 0.0, 1.0, DType::f64);
        Tensor logits = Tensor::gaussian({tokens, experts_n}, rng, 0.0, 1.0, DType::f64);
        Tensor grouped =
            t.value(moe_forward(t, t.constant(x), t.constant(logits), experts, k));

        auto decision = route(logits, k);
        Tensor naive = Tensor::zeros(x.shape(), DType::f64);
        for (int64_t tok = 0; tok < tokens; ++tok) {
            Tensor xt = ops::slice_rows(x, tok, tok + 1);
            for (int64_t slot = 0; slot < k; ++slot) {
                const auto e = static_cast<size_t>(
                    decision.token_experts[static_cast<size_t>(tok)][static_cast<size_t>(slot)]);
                const double g =
                    decision.token_gates[static_cast<size_t>(tok)][static_cast<size_t>(slot)];
                const auto& p = experts[e];
                Tensor h = ops::mul(ops::silu(ops::matmul(xt, ops::transpose(t.value(p.w_gate)))),
                                    ops::matmul(xt, ops::transpose(t.value(p.w_in))));
                Tensor y = ops::matmul(h, ops::transpose(t.value(p.w_out)));
                for (int64_t c = 0; c < dim; ++c) {
                    naive.set2(tok, c, naive.at2(tok, c) + g * y.at2(0, c));
                }
            }
        }
        const double diff = ops::max_abs_diff(grouped, naive);
        return pass_if(diff < 1e-12, fmt::format("max diff {:.1e}", diff));
    });
    sink.run("moe", "tied logits drop nothing", [] {
        Tensor logits = Tensor::full({6, 4}, 0.25);
        auto d = route(logits, 2);
        for (const auto& chosen : d.token_experts) {
            if (chosen.size() != 2 || chosen[0] == chosen[1]) {
                return pass_if(false, "token lost an expert slot");
            }
        }
        for (const auto& gates : d.token_gates) {
            if (std::fabs(gates[0] + gates[1] - 1.0) > 1e-12) {
                return pass_if(false, "gates do not normalize");
            }
        }
        return pass_if(true, "every token keeps k experts, gates normalized");
    });

    sink.run("model", "sync accounting formulas", [] {
        SyncAccount tensor = count_sync_points(Parallelism::tensor, 32, 4);
        SyncAccount track = count_sync_points(Parallelism::track, 32, 4);
        return pass_if(tensor.sync_points == 64 && track.sync_points == 8 &&
                           std::fabs(track.reduction_vs_tensor - 0.875) < 1e-15,
                       fmt::format("tensor=64 track=8 reduction={}",
                                   percent1(track.reduction_vs_tensor)));
    });
    sink.run("model", "instrumented barriers match the formula", [] {
        PTModelConfig c;
        c.tracks = 2;
        c.track_block_depth = 2;
        c.total_layers = 4;
        c.model_dim = 8;
        c.heads = 2;
        c.head_dim = 4;
        c.vocab = 8;
        c.ffn_hidden = 8;
        c.attention_unit = "LG";
        c.window = 4;
        c.validate();
        Rng rng(5);
        PTModel m = PTModel::init(c, rng);
        Tape t(false);
        ParamBinder binder(t, m, false);
        PTForward fwd(binder);
        ForwardStats stats;
        std::vector<int64_t> prompt{1, 2, 3};
        fwd.full_logits(prompt, &stats);
        const int64_t want = count_sync_points(Parallelism::track, 4, 2).sync_points;
        return pass_if(stats.barriers == want,
                       fmt::format("{} barriers for L=4 D=2", stats.barriers));
    });

    sink.run("qat", "outputs sit on the level grid", [] {
        Rng rng(12);
        for (LevelSet ls : {LevelSet::balanced_2bit, LevelSet::unbalanced_2bit, LevelSet::int4,
                            LevelSet::int8}) {
            const QuantSpec spec = QuantSpec::make(ls);
            Tensor w = Tensor::gaussian({64}, rng);
            Tensor q = fake_quant_tensor(w, spec, 0.9);
            const double s = 0.9 * ops::max_abs(w) / spec.level_max();
            for (int64_t i = 0; i < q.numel(); ++i) {
                const double code = q.get(i) / s + spec.zero_point;
                const float level = static_cast<float>(
                    s * (std::nearbyint(code) - spec.zero_point));
                if (static_cast<float>(q.get(i)) != level) {
                    return pass_if(false, fmt::format("off grid on {}", level_set_str(ls)));
                }
            }
        }
        return pass_if(true, "all four level sets");
    });
    sink.run("qat", "balanced levels are symmetric half-steps", [] {
        const QuantSpec spec = QuantSpec::make(LevelSet::balanced_2bit);
        Tensor w = Tensor::from({5}, {-1.2, -0.3, 0.0, 0.4, 1.2});
        Tensor q = fake_quant_tensor(w, spec, 1.0);
        const double s = ops::max_abs(w) / spec.level_max();
        const std::set<float> allowed{static_cast<float>(-1.5 * s), static_cast<float>(-0.5 * s),
                                      static_cast<float>(0.5 * s), static_cast<float>(1.5 * s)};
        for (int64_t i = 0; i < q.numel(); ++i) {
            if (!allowed.count(static_cast<float>(q.get(i)))) {
                return pass_if(false, "level outside s*{-1.5,-0.5,0.5,1.5}");
            }
        }
        return pass_if(true, "levels realized");
    });
    sink.run("qat", "requantization is a fixed point", [] {
        Rng rng(13);
        const QuantSpec spec = QuantSpec::make(LevelSet::int4);
        Tensor w = Tensor::gaussian({128}, rng);
        const double s = 0.8 * ops::max_abs(w) / spec.level_max();
        Tensor once = fake_quant_with_scale(w, spec, s);
        Tensor twice = fake_quant_with_scale(once, spec, s);
        return pass_if(ops::bit_equal(once, twice), "byte identical");
    });

    sink.run("blockcodec", "round trip stays within the error bound", [] {
        Rng rng(14);
        for (int trial = 0; trial < 50; ++trial) {
            const double mag = std::pow(10.0, trial % 5 - 2);
            std::array<float, kBlockElems> w{};
            for (auto& v : w) v = static_cast<float>(rng.gauss(0.0, mag));
            CompressedBlock blk = encode_block(w);
            const auto dec = decode_block(blk);
            float top = w[0];
            for (float v : w) top = std::max(top, v);
            const double bound =
                block_error_bound(blk.scale(), top - blk.block_min());
            for (size_t i = 0; i < w.size(); ++i) {
                if (std::fabs(dec[i] - w[i]) > bound) return pass_if(false, "bound exceeded");
            }
        }
        return pass_if(true, "50 random blocks");
    });
    sink.run("blockcodec", "double round trip is payload identical", [] {
        Rng rng(15);
        Tensor w = Tensor::gaussian({13, 9}, rng);
        auto m1 = CompressedBlockMatrix::compress(w);
        auto m2 = CompressedBlockMatrix::compress(m1.decompress());
        auto b1 = m1.serialize();
        auto b2 = m2.serialize();
        return pass_if(b1 == b2, fmt::format("{} bytes stable", b1.size()));
    });
    sink.run("blockcodec", "corrupted reserved bit names its block", [] {
        Rng rng(16);
        Tensor w = Tensor::gaussian({13, 20}, rng);  // 3 x 4 block grid
        auto bytes = CompressedBlockMatrix::compress(w).serialize();
        const size_t pos = 36 + (1 * 4 + 2) * 16 + 15;  // block (1, 2), last payload byte
        bytes[pos] |= 0x10;
        const uint32_t crc = io::crc32(std::span<const uint8_t>(bytes).first(bytes.size() - 4));
        for (int i = 0; i < 4; ++i) {
            bytes[bytes.size() - 4 + static_cast<size_t>(i)] =
                static_cast<uint8_t>(crc >> (8 * i));
        }
        try {
            CompressedBlockMatrix::deserialize(bytes);
            return pass_if(false, "corruption not detected");
        } catch (const FormatError& e) {
            const std::string what = e.what();
            return pass_if(what.find("(1, 2)") != std::string::npos,
                           fmt::format("surfaced: {}", what));
        }
    });

    sink.run("adapters", "svd reconstructs its input", [] {
        Rng rng(17);
        Tensor w = Tensor::gaussian({6, 4}, rng, 0.0, 1.0, DType::f64);
        SVDResult r = svd(w);
        Tensor us({6, 4}, DType::f64);
        for (int64_t i = 0; i < 6; ++i) {
            for (int64_t j = 0; j < 4; ++j) us.set2(i, j, r.u.at2(i, j) * r.s.get(j));
        }
        const double diff = ops::max_abs_diff(ops::matmul(us, ops::transpose(r.v)), w);
        return pass_if(diff < 1e-10, fmt::format("max diff {:.1e}", diff));
    });
    sink.run("adapters", "zero adapter is a no-op", [] {
        Rng rng(18);
        Tensor w = Tensor::gaussian({12, 6}, rng);
        auto cm = CompressedBlockMatrix::compress(ops::transpose(w));
        LoRAAdapter zero = LoRAAdapter::fresh(12, 6, 0, 0.0, rng);
        Tensor x = Tensor::gaussian({4, 6}, rng);
        return pass_if(ops::bit_equal(adapted_forward(x, cm, zero), matmul_compressed(x, cm)),
                       "bit equal");
    });
    sink.run("adapters", "exact low rank leaves no residual", [] {
        Rng rng(19);
        Tensor a = Tensor::gaussian({8, 2}, rng);
        Tensor b = Tensor::gaussian({2, 6}, rng);
        SVDSplit split = svd_pullout(ops::matmul(a, b), 2);
        const double fro = ops::frobenius_norm(split.residual);
        return pass_if(fro < 1e-5, fmt::format("residual norm {:.1e}", fro));
    });

    sink.run("io", "checkpoint round trip preserves the hash", [&] {
        Rng rng(20);
        io::TensorMap tensors{{"w", Tensor::gaussian({6, 6}, rng)}};
        const std::string dir = join(cfg.out, "verify_tmp/ck");
        io::save_checkpoint(dir, tensors);
        io::Checkpoint back = io::load_checkpoint(dir);
        fs::remove_all(join(cfg.out, "verify_tmp"));
        const bool same = back.content_hash_hex == io::hex64(io::content_hash(tensors)) &&
                          ops::bit_equal(back.tensors.at("w"), tensors.at("w"));
        return pass_if(same, fmt::format("hash {}", back.content_hash_hex));
    });
    sink.run("datasets", "generators are seed deterministic", [&] {
        Rng r1(5), r2(5);
        TokenDataset d1 = make_dataset(cfg.dataset, 16, 6, 4, r1);
        TokenDataset d2 = make_dataset(cfg.dataset, 16, 6, 4, r2);
        return pass_if(d1.samples == d2.samples, fmt::format("{} samples", d1.samples.size()));
    });

    VerifyOutcome out;
    out.checks = static_cast<int64_t>(sink.lines.size());
    out.failed = sink.failed;
    std::string jsonl;
    for (const auto& line : sink.lines) jsonl += line.dump() + "\n";
    out.jsonl = std::move(jsonl);
    fs::create_directories(cfg.out);
    io::write_text_file(join(cfg.out, "verify.jsonl"), out.jsonl);
    return out;
}

}  // namespace ptml
