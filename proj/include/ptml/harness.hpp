// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "ptml/adapters.hpp"
#include "ptml/config.hpp"
#include "ptml/io.hpp"
#include "ptml/model.hpp"

namespace ptml {

// One experiment = one config file. Plain `key = value` lines; model fields
// carry a `model.` prefix and overlay the chosen profile's defaults, the
// rest steer the run itself. serialize() is sorted and value-stable, so
// parse(serialize(c)) == c and the hash pins provenance.
//
// Every random stream is derived from the one seed: model init draws from
// seed, the dataset generator from seed + 1, adapter init from seed + 2.
struct ExperimentConfig {
    std::string profile = "custom";  // on_device | server | custom
    PTModelConfig model;             // resolved: profile defaults + overrides
    uint64_t seed = 1;
    int64_t steps = 60;
    int64_t batch = 4;
    double lr = 0.01;
    std::string dataset = "copy";  // copy | modular_add | random_walk
    int64_t dataset_size = 32;
    int64_t seq_len = 8;
    std::string level_set = "int8";  // weight grid for the quantize stage
    int64_t embed_group = 8;         // 4-bit embedding-table group size
    int64_t rank = 4;                // recovery adapter rank (production: 32)
    double alpha = -1.0;             // adapter alpha; negative means = rank
    std::string out = "out";

    static ExperimentConfig parse(std::string_view text);
    static ExperimentConfig load(const std::string& path);  // empty file is a usage error
    std::string serialize() const;
    uint64_t config_hash() const;
    bool operator==(const ExperimentConfig& other) const {
        return serialize() == other.serialize();
    }
};

// Pipeline stages. Each writes its artifact under cfg.out plus a
// `<stage>_manifest.json` recording the config hash, every consumed
// artifact's content hash, and every produced artifact's content hash.
// Missing upstream artifacts raise UsageError.
io::ordered_json run_train_toy(const ExperimentConfig& cfg);
io::ordered_json run_quantize(const ExperimentConfig& cfg);
io::ordered_json run_compress(const ExperimentConfig& cfg);
io::ordered_json run_recover(const ExperimentConfig& cfg);

// Re-reads every manifest under cfg.out, re-hashes the artifacts on disk,
// and checks the input/output chain; report["provenance_ok"] sums it up.
io::ordered_json run_report(const ExperimentConfig& cfg);

// Accounting tables: parallelism sync points, KV-cache memory saving,
// prefill bypass, and codec bits-per-weight. Pure functions of the config,
// emitted as bench.csv and bench.json under cfg.out.
std::string bench_csv(const ExperimentConfig& cfg);
io::ordered_json bench_json(const ExperimentConfig& cfg);
void write_bench(const ExperimentConfig& cfg);

// In-process invariant sweep over every module; one JSONL line per check.
// Writes verify.jsonl under cfg.out. Deterministic byte-for-byte per config.
struct VerifyOutcome {
    std::string jsonl;
    int64_t checks = 0;
    int64_t failed = 0;
    bool ok() const { return failed == 0; }
};
VerifyOutcome run_verify(const ExperimentConfig& cfg);

// compressed-model artifact layout used by the compress/recover stages
void save_compressed(const std::string& dir, const CompressedModel& cm);
CompressedModel load_compressed(const std::string& dir);
uint64_t compressed_artifact_hash(const std::string& dir);

}  // namespace ptml
