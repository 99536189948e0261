// SPDX-License-Identifier: Apache-2.0
// Command line front end: train, quantize, compress, recover, verify, bench, report.
#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "ptml/errors.hpp"
#include "ptml/harness.hpp"

namespace {

struct Cli {
    std::string command;
    std::optional<std::string> config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> profile;
    std::string format = "csv";
};

ptml::ExperimentConfig resolve_config(const Cli& cli) {
    ptml::ExperimentConfig cfg =
        cli.config_path ? ptml::ExperimentConfig::load(*cli.config_path)
                        : ptml::ExperimentConfig::parse("");
    // flags override the file
    std::string text = cfg.serialize();
    ptml::cfg::KvMap kv = ptml::cfg::parse_kv_text(text);
    if (cli.profile) kv["profile"] = *cli.profile;
    if (cli.seed) kv["seed"] = fmt::format("{}", *cli.seed);
    if (cli.out) kv["out"] = *cli.out;
    if (cli.profile) {
        // a fresh profile replaces the model section wholesale
        for (auto it = kv.begin(); it != kv.end();) {
            it = it->first.rfind("model.", 0) == 0 ? kv.erase(it) : std::next(it);
        }
    }
    return ptml::ExperimentConfig::parse(ptml::cfg::serialize_kv_text(kv));
}

int dispatch(const Cli& cli) {
    ptml::ExperimentConfig cfg = resolve_config(cli);
    if (cli.command == "verify") {
        ptml::VerifyOutcome out = ptml::run_verify(cfg);
        fmt::print("{}", out.jsonl);
        fmt::print("{} checks, {} failed\n", out.checks, out.failed);
        return out.ok() ? 0 : 1;
    }
    if (cli.command == "bench") {
        ptml::write_bench(cfg);
        if (cli.format == "json") {
            fmt::print("{}\n", ptml::bench_json(cfg).dump(2));
        } else {
            fmt::print("{}", ptml::bench_csv(cfg));
        }
        return 0;
    }
    if (cli.command == "train-toy") {
        fmt::print("{}\n", ptml::run_train_toy(cfg).dump(2));
        return 0;
    }
    if (cli.command == "quantize") {
        fmt::print("{}\n", ptml::run_quantize(cfg).dump(2));
        return 0;
    }
    if (cli.command == "compress") {
        fmt::print("{}\n", ptml::run_compress(cfg).dump(2));
        return 0;
    }
    if (cli.command == "recover") {
        fmt::print("{}\n", ptml::run_recover(cfg).dump(2));
        return 0;
    }
    ptml::io::ordered_json report = ptml::run_report(cfg);
    fmt::print("{}\n", report.dump(2));
    return report["provenance_ok"].get<bool>() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"parallel-track transformer toolkit"};
    app.require_subcommand(1);

    Cli cli;
    for (const char* name : {"verify", "bench", "train-toy", "quantize", "compress", "recover",
                             "report"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", cli.config_path, "key = value experiment file");
        sub->add_option("--seed", cli.seed, "override the config seed");
        sub->add_option("--out", cli.out, "override the output directory");
        sub->add_option("--profile", cli.profile, "on_device | server | custom");
        if (std::string(name) == "bench") {
            sub->add_option("--format", cli.format, "csv | json")
                ->check(CLI::IsMember({"csv", "json"}));
        }
        sub->callback([&cli, name] { cli.command = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        return dispatch(cli);
    } catch (const ptml::UsageError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
}
