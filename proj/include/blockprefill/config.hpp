// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "blockprefill/eviction.hpp"
#include "blockprefill/prefill_engine.hpp"
#include "blockprefill/toy_model.hpp"
#include "blockprefill/vision_layout.hpp"
#include "json.hpp"

namespace blockprefill {

struct LayoutConfig {
    std::size_t prompt_len = 16;
    std::size_t tiles = 16;
    std::size_t tokens_per_tile = 144;
    std::size_t frames = 0;
    std::size_t tokens_per_frame = 0;
    PromptPosition prompt_position = PromptPosition::first;

    TokenLayout build() const;
};

enum class StatsSource { none, first_block };

struct PrefillConfig {
    PrefillKind mode = PrefillKind::hybrid;
    std::size_t block_size = 256;
    Alignment align = Alignment::none;
    PolicyKind policy = PolicyKind::query_aware;
    std::size_t budget = 1024;
    BudgetMode budget_mode = BudgetMode::fixed;
    std::vector<double> layer_entropies;
    StatsSource stats_source = StatsSource::none;
    std::size_t budget_floor = 0;
    bool protect_recent = true;
    bool protect_prompt = true;
    ProxySource proxy_source = ProxySource::prompt_first;
    std::uint64_t precision_bytes = 2;
    std::uint64_t random_seed = 0;
};

struct TaskConfig {
    /// Visual structure id (tile or frame index) holding the needle; defaults to the middle one.
    std::optional<std::size_t> needle_segment;
    double kappa = 8.0;
    double needle_strength = 8.0;
    std::uint64_t seed = 1;
};

struct OutputConfig {
    std::string csv;
    std::string json;
    /// Off by default so that reports are byte-identical across runs.
    bool wall_clock = false;
};

struct RunConfig {
    ModelConfig model;
    LayoutConfig layout;
    PrefillConfig prefill;
    TaskConfig task;
    OutputConfig output;

    /// Throws ConfigError naming the key path of the violated constraint.
    void validate() const;
    /// Entries protected from eviction in every round (prompt and current block).
    std::size_t protected_size() const;
    nlohmann::json to_json() const;
};

/**
 * Parses a YAML document and applies `key.path=value` overrides on top.
 *
 * Override values are read as YAML, so lists can be written as [a, b].
 * Unknown keys, malformed values and constraint violations throw ConfigError
 * with the offending key path. The result is validated.
 */
RunConfig parse_config(std::string_view yaml_text, const std::vector<std::string>& overrides = {});

RunConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides = {});

std::string_view to_string(PolicyKind kind);
std::string_view to_string(Alignment align);
std::string_view to_string(BudgetMode mode);
std::string_view to_string(ProxySource source);

}  // namespace blockprefill
