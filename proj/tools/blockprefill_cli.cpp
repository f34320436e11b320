// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "blockprefill/config.hpp"
#include "blockprefill/errors.hpp"
#include "blockprefill/harness.hpp"
#include "blockprefill/report.hpp"

namespace {

using namespace blockprefill;

enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kConfig = 2,
    kNumeric = 3,
    kIo = 4,
    kCheckFailed = 5,
    kInternal = 70,
};

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::size_t> budget;
    std::optional<std::size_t> block_size;
    std::optional<std::string> policy;
    std::optional<std::string> mode;
    std::optional<std::string> align;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> csv;
    std::optional<std::string> json;
    bool wall_clock = false;
};

void add_common(CLI::App& cmd, CommonOptions& o) {
    cmd.add_option("-c,--config", o.config_path, "YAML config file")->check(CLI::ExistingFile);
    cmd.add_option("--set", o.overrides, "Override a config key, e.g. --set prefill.budget=512");
    cmd.add_option("--budget", o.budget, "prefill.budget");
    cmd.add_option("--block-size", o.block_size, "prefill.block_size");
    cmd.add_option("--policy", o.policy, "prefill.policy (snapkv, keydiff, random)");
    cmd.add_option("--mode", o.mode, "prefill.mode (bulk, blockwise, hybrid)");
    cmd.add_option("--align", o.align, "prefill.align (none, structure)");
    cmd.add_option("--seed", o.seed, "task.seed");
    cmd.add_option("--csv", o.csv, "CSV report path");
    cmd.add_option("--json", o.json, "JSON report path");
    cmd.add_flag("--wall-clock", o.wall_clock, "Record wall-clock TTFT (reports are no longer byte-identical)");
}

RunConfig resolve_config(const CommonOptions& o, const std::string& command) {
    std::vector<std::string> overrides = o.overrides;
    const auto push = [&](const char* key, const auto& value) {
        if (value) {
            std::ostringstream os;
            os << key << '=' << *value;
            overrides.push_back(os.str());
        }
    };
    push("prefill.budget", o.budget);
    push("prefill.block_size", o.block_size);
    push("prefill.policy", o.policy);
    push("prefill.mode", o.mode);
    push("prefill.align", o.align);
    push("task.seed", o.seed);
    push("output.csv", o.csv);
    push("output.json", o.json);
    if (o.wall_clock) {
        overrides.emplace_back("output.wall_clock=true");
    }
    RunConfig cfg = o.config_path.empty() ? parse_config("", overrides) : load_config_file(o.config_path, overrides);

    if (const char* dir = std::getenv("PREFILL_OUTPUT_DIR"); dir != nullptr && *dir != '\0') {
        const std::filesystem::path base(dir);
        std::filesystem::create_directories(base);
        const auto place = [&](std::string& path, const std::string& fallback) {
            if (path.empty()) {
                path = (base / fallback).string();
            } else if (std::filesystem::path(path).is_relative()) {
                path = (base / path).string();
            }
        };
        place(cfg.output.csv, command + ".csv");
        place(cfg.output.json, command + ".json");
    }
    return cfg;
}

void print_rows(const std::vector<RunReport>& rows) {
    for (const auto& r : rows) {
        std::cout << r.label << ": global_peak_bytes=" << r.global_peak_bytes << " ttft_flops=" << r.ttft_flops
                  << " needle_retention=" << r.needle_retention << '\n';
    }
}

int finish(const SweepOutcome& outcome, const RunConfig& cfg) {
    write_reports(outcome.rows, cfg.output.csv, cfg.output.json);
    print_rows(outcome.rows);
    for (const auto& c : outcome.checks) {
        std::cout << "check " << c.name << ": " << (c.passed ? "PASS" : "FAIL") << " (" << c.detail << ")\n";
    }
    return outcome.all_passed() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memory-bounded block-wise prefill with online KV eviction"};
    app.require_subcommand(1);

    CommonOptions run_opts, input_opts, budget_opts, block_opts, policy_opts, reduction_opts;
    std::vector<std::size_t> counts{4, 8, 16, 32};
    std::vector<std::size_t> budgets{256, 1024, 4096};
    std::vector<std::size_t> block_sizes{32, 49, 64, 98, 128};

    auto* run = app.add_subcommand("run", "One prefill run");
    add_common(*run, run_opts);
    auto* sweep_input = app.add_subcommand("sweep-input", "Peak memory vs. number of tiles or frames");
    add_common(*sweep_input, input_opts);
    sweep_input->add_option("--counts", counts, "Tile or frame counts")->delimiter(',');
    auto* sweep_budget_cmd = app.add_subcommand("sweep-budget", "Peak memory and attention FLOPs vs. budget");
    add_common(*sweep_budget_cmd, budget_opts);
    sweep_budget_cmd->add_option("--budgets", budgets, "Budgets")->delimiter(',');
    auto* sweep_block = app.add_subcommand("sweep-blocksize", "Aligned vs. unaligned block sizes");
    add_common(*sweep_block, block_opts);
    sweep_block->add_option("--block-sizes", block_sizes, "Block sizes")->delimiter(',');
    auto* policies = app.add_subcommand("compare-policies", "snapkv vs. keydiff vs. random on one needle task");
    add_common(*policies, policy_opts);
    auto* reduction = app.add_subcommand("compare-reduction", "Compression vs. strided input reduction");
    add_common(*reduction, reduction_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (run->parsed()) {
            const RunConfig cfg = resolve_config(run_opts, "run");
            return finish(SweepOutcome{{run_config(cfg)}, {}}, cfg);
        }
        if (sweep_input->parsed()) {
            const RunConfig cfg = resolve_config(input_opts, "sweep-input");
            return finish(sweep_input_size(cfg, counts), cfg);
        }
        if (sweep_budget_cmd->parsed()) {
            const RunConfig cfg = resolve_config(budget_opts, "sweep-budget");
            return finish(sweep_budget(cfg, budgets), cfg);
        }
        if (sweep_block->parsed()) {
            const RunConfig cfg = resolve_config(block_opts, "sweep-blocksize");
            return finish(sweep_block_size(cfg, block_sizes), cfg);
        }
        if (policies->parsed()) {
            const RunConfig cfg = resolve_config(policy_opts, "compare-policies");
            return finish(compare_policies(cfg), cfg);
        }
        const RunConfig cfg = resolve_config(reduction_opts, "compare-reduction");
        return finish(compare_reduction(cfg), cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const InvalidConfiguration& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const InvalidArgument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternal;
    }
}
