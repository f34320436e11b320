// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/report.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>

#include "blockprefill/errors.hpp"

namespace blockprefill {

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string quote(std::string_view field) {
    if (field.find_first_of(",\"\n") == std::string_view::npos) {
        return std::string(field);
    }
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::string> split_csv(std::string_view line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else {
            fields.back() += c;
        }
    }
    if (quoted) {
        throw InvalidArgument("csv: unterminated quoted field");
    }
    return fields;
}

template <typename T>
T parse_number(const std::string& text, std::string_view column) {
    T value{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size()) {
        throw InvalidArgument("csv: column " + std::string(column) + " has malformed value '" + text + "'");
    }
    return value;
}

}  // namespace

void RunReport::validate() const {
    const auto fraction = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!fraction(needle_retention) || !fraction(decode_attention_mass_on_needle)) {
        throw InvalidState("report '" + label + "': fraction outside [0, 1]");
    }
    if (!(avg_block_peak_bytes >= 0.0) || !(ttft_wall_s >= 0.0)) {
        throw InvalidState("report '" + label + "': negative peak or time");
    }
}

std::string csv_header() {
    std::string out;
    for (std::size_t i = 0; i < kReportColumns.size(); ++i) {
        out += (i == 0 ? "" : ",") + std::string(kReportColumns[i]);
    }
    return out;
}

std::string to_csv_row(const RunReport& r) {
    const std::vector<std::string> fields{quote(r.label),
                                          quote(r.config.dump()),
                                          std::to_string(r.global_peak_bytes),
                                          format_double(r.avg_block_peak_bytes),
                                          format_double(r.ttft_wall_s),
                                          std::to_string(r.ttft_flops),
                                          format_double(r.needle_retention),
                                          format_double(r.decode_attention_mass_on_needle),
                                          quote(r.policy),
                                          std::to_string(r.budget),
                                          std::to_string(r.block_size),
                                          quote(r.mode),
                                          quote(r.align),
                                          std::to_string(r.seq_len),
                                          r.needle_split ? "true" : "false"};
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        out += (i == 0 ? "" : ",") + fields[i];
    }
    return out;
}

RunReport from_csv_row(std::string_view line) {
    const auto f = split_csv(line);
    if (f.size() != kReportColumns.size()) {
        throw InvalidArgument("csv: expected " + std::to_string(kReportColumns.size()) + " columns, got " +
                              std::to_string(f.size()));
    }
    RunReport r;
    r.label = f[0];
    r.config = nlohmann::json::parse(f[1]);
    r.global_peak_bytes = parse_number<std::uint64_t>(f[2], kReportColumns[2]);
    r.avg_block_peak_bytes = parse_number<double>(f[3], kReportColumns[3]);
    r.ttft_wall_s = parse_number<double>(f[4], kReportColumns[4]);
    r.ttft_flops = parse_number<std::uint64_t>(f[5], kReportColumns[5]);
    r.needle_retention = parse_number<double>(f[6], kReportColumns[6]);
    r.decode_attention_mass_on_needle = parse_number<double>(f[7], kReportColumns[7]);
    r.policy = f[8];
    r.budget = parse_number<std::size_t>(f[9], kReportColumns[9]);
    r.block_size = parse_number<std::size_t>(f[10], kReportColumns[10]);
    r.mode = f[11];
    r.align = f[12];
    r.seq_len = parse_number<std::size_t>(f[13], kReportColumns[13]);
    if (f[14] != "true" && f[14] != "false") {
        throw InvalidArgument("csv: column needle_split has malformed value '" + f[14] + "'");
    }
    r.needle_split = f[14] == "true";
    return r;
}

std::string to_csv(std::span<const RunReport> reports) {
    std::string out = csv_header() + "\n";
    for (const auto& r : reports) {
        out += to_csv_row(r) + "\n";
    }
    return out;
}

std::vector<RunReport> from_csv(std::string_view text) {
    std::vector<RunReport> out;
    bool header = true;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        const std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (header) {
            if (line != csv_header()) {
                throw InvalidArgument("csv: unexpected header");
            }
            header = false;
        } else if (!line.empty()) {
            out.push_back(from_csv_row(line));
        }
    }
    return out;
}

nlohmann::json to_json(const RunReport& r) {
    return nlohmann::json{{"label", r.label},
                          {"config", r.config},
                          {"global_peak_bytes", r.global_peak_bytes},
                          {"avg_block_peak_bytes", r.avg_block_peak_bytes},
                          {"ttft_wall_s", r.ttft_wall_s},
                          {"ttft_flops", r.ttft_flops},
                          {"needle_retention", r.needle_retention},
                          {"decode_attention_mass_on_needle", r.decode_attention_mass_on_needle},
                          {"policy", r.policy},
                          {"budget", r.budget},
                          {"block_size", r.block_size},
                          {"mode", r.mode},
                          {"align", r.align},
                          {"seq_len", r.seq_len},
                          {"needle_split", r.needle_split}};
}

RunReport report_from_json(const nlohmann::json& j) {
    try {
        RunReport r;
        r.label = j.at("label").get<std::string>();
        r.config = j.at("config");
        r.global_peak_bytes = j.at("global_peak_bytes").get<std::uint64_t>();
        r.avg_block_peak_bytes = j.at("avg_block_peak_bytes").get<double>();
        r.ttft_wall_s = j.at("ttft_wall_s").get<double>();
        r.ttft_flops = j.at("ttft_flops").get<std::uint64_t>();
        r.needle_retention = j.at("needle_retention").get<double>();
        r.decode_attention_mass_on_needle = j.at("decode_attention_mass_on_needle").get<double>();
        r.policy = j.at("policy").get<std::string>();
        r.budget = j.at("budget").get<std::size_t>();
        r.block_size = j.at("block_size").get<std::size_t>();
        r.mode = j.at("mode").get<std::string>();
        r.align = j.at("align").get<std::string>();
        r.seq_len = j.at("seq_len").get<std::size_t>();
        r.needle_split = j.at("needle_split").get<bool>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("report json: ") + e.what());
    }
}

nlohmann::json to_json(std::span<const RunReport> reports) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : reports) {
        arr.push_back(to_json(r));
    }
    return arr;
}

void write_reports(std::span<const RunReport> reports, const std::string& csv_path, const std::string& json_path) {
    const auto write = [](const std::string& path, const std::string& text) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + path + "' for writing");
        }
        out << text;
        if (!out) {
            throw IoError("write to '" + path + "' failed");
        }
    };
    if (!csv_path.empty()) {
        write(csv_path, to_csv(reports));
    }
    if (!json_path.empty()) {
        write(json_path, to_json(reports).dump(2) + "\n");
    }
}

}  // namespace blockprefill
