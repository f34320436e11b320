// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace blockprefill {

/// One experiment row. Field order is the CSV column order.
struct RunReport {
    std::string label;
    /// Full configuration echo; enough to rerun this row on its own.
    nlohmann::json config;
    std::uint64_t global_peak_bytes = 0;
    double avg_block_peak_bytes = 0.0;
    double ttft_wall_s = 0.0;
    std::uint64_t ttft_flops = 0;
    double needle_retention = 0.0;
    double decode_attention_mass_on_needle = 0.0;
    std::string policy;
    std::size_t budget = 0;
    std::size_t block_size = 0;
    std::string mode;
    std::string align;
    std::size_t seq_len = 0;
    bool needle_split = false;

    /// Throws InvalidState when a fraction leaves [0, 1] or a peak is negative.
    void validate() const;
    bool operator==(const RunReport&) const = default;
};

inline constexpr std::array<std::string_view, 15> kReportColumns{
    "label",  "config",     "global_peak_bytes", "avg_block_peak_bytes", "ttft_wall_s",
    "ttft_flops", "needle_retention", "decode_attention_mass_on_needle", "policy", "budget",
    "block_size", "mode",   "align",             "seq_len",              "needle_split"};

std::string csv_header();
std::string to_csv_row(const RunReport& report);
RunReport from_csv_row(std::string_view line);
/// Header plus one line per report, '\n' terminated.
std::string to_csv(std::span<const RunReport> reports);
std::vector<RunReport> from_csv(std::string_view text);

nlohmann::json to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);
nlohmann::json to_json(std::span<const RunReport> reports);

/// Writes whichever paths are non-empty; throws IoError on failure.
void write_reports(std::span<const RunReport> reports, const std::string& csv_path, const std::string& json_path);

}  // namespace blockprefill
